"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node (sequence number, parents, backward
rule) on its output. ``backward`` collects the nodes reachable from a scalar
loss and replays their backward rules in reverse recording order, so each
contributing node is visited exactly once and gradients of tensors with
several consumers accumulate additively.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

DTYPE = np.float32

_counter = itertools.count()


class _Flags:
    grad_enabled = True
    nan_guard = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _Flags.grad_enabled
    _Flags.grad_enabled = False
    try:
        yield
    finally:
        _Flags.grad_enabled = prev


@contextlib.contextmanager
def nan_guard(enabled: bool = True) -> Iterator[None]:
    """Abort with the op name on the first non-finite op output."""
    prev = _Flags.nan_guard
    _Flags.nan_guard = enabled
    try:
        yield
    finally:
        _Flags.nan_guard = prev


def set_nan_guard(enabled: bool) -> None:
    _Flags.nan_guard = enabled


class _Node:
    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.seq = next(_counter)
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None
        if _Flags.nan_guard and not np.isfinite(self.data).all():
            raise NonFiniteError("tensor")

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str | None:
        return self._node.op if self._node else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def _raise_scalar(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if _Flags.nan_guard and not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.requires_grad = False
    out._node = None
    if _Flags.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced under an active tape")
    reachable: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is None:
            continue
        reachable.append(t)
        stack.extend(p for p in t._node.parents if p.requires_grad)
    reachable.sort(key=lambda t: t._node.seq, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reachable:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = np.array(pg, dtype=DTYPE) if p.grad is None else p.grad + pg.astype(DTYPE, copy=False)
            else:
                k = id(p)
                pending[k] = pg if k not in pending else pending[k] + pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); no gradient flows through clamped entries."""
    keep = a.data >= floor
    return _make(np.maximum(a.data, DTYPE(floor)), (a,), lambda g: (g * keep,), "clamp_min")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(a.shape) >= p).astype(DTYPE) / DTYPE(1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    ax = axis % (tensors[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=ax), tensors, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand (the usual weight matrix) is applied to every row of
    the left operand and its gradient is summed over the leading axes.
    """
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bw(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        m = np.broadcast_to(mask, x.shape)
        if not m.any(axis=axis).all():
            raise ContractError("no attendable key: a softmax row is fully masked")
        z = np.where(m, x, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.where(m, np.exp(z), 0.0).astype(DTYPE)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (True = keep) gives masked entries zero mass."""
    y = _softmax_np(x.data, axis, mask)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick index shape {index.shape} does not match {x.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise IndexError(f"pick index out of range [0, {x.shape[-1]})")
    idx = index[..., None]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw, "pick")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows whose target is not ignored.

    ``logits`` may carry leading axes; ``targets`` must match them.
    """
    targets = np.asarray(targets)
    n = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    x = logits.data.reshape(-1, n)
    t = targets.reshape(-1)
    keep = t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ContractError("no effective targets")
    if (t[keep] < 0).any() or (t[keep] >= n).any():
        raise IndexError(f"target out of range [0, {n})")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe_t = np.where(keep, t, 0)
    picked = logp[np.arange(len(t)), safe_t]
    value = -(picked * keep).sum(dtype=np.float64) / count

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(len(t)), safe_t] -= 1.0
        grad *= (keep / count).astype(DTYPE)[:, None]
        return ((grad * g).reshape(logits.shape),)

    return _make(np.asarray(value, dtype=DTYPE), (logits,), bw, "cross_entropy")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight``; backward scatter-adds into the used rows."""
    ids = np.asarray(ids)
    vocab, dim = weight.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def bw(g):
        full = np.zeros((vocab, dim), dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, dim))
        return (full,)

    return _make(weight.data[ids], (weight,), bw, "embedding_lookup")


# ---------------------------------------------------------------------------
# non-differentiable helpers
# ---------------------------------------------------------------------------

def multinomial_sample(probs: np.ndarray | Tensor, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of ``probs`` (last axis) by inverse-CDF sampling."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    flat = p.reshape(-1, p.shape[-1]).astype(np.float64)
    cdf = np.cumsum(flat, axis=1)
    u = rng.random(flat.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, p.shape[-1] - 1).reshape(p.shape[:-1])


def argmax(x: np.ndarray | Tensor, axis: int = -1) -> np.ndarray:
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    return d.argmax(axis=axis)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(f: Callable[..., Tensor], inputs, eps: float = 1e-3,
                      tol: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of each coordinate is ``|a - n| / max(1, |a|, |n|)``;
    the unit floor keeps float32 rounding on near-zero gradients from being
    amplified into spurious failures.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.requires_grad = True
        x.grad = None
    loss = f(*inputs)
    if loss.requires_grad:
        backward(loss)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    numeric = []
    with no_grad():
        for x in inputs:
            num = np.zeros(x.shape, dtype=np.float64)
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f(*inputs).data)
                flat[i] = orig - eps
                down = float(f(*inputs).data)
                flat[i] = orig
                num.reshape(-1)[i] = (up - down) / (2 * eps)
            numeric.append(num)

    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return GradCheckReport(worst, tol, analytic, numeric)
