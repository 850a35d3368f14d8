"""Neural building blocks: embeddings, LSTM, attention and Transformer layers.

Layers are plain callables holding their parameters as ``Tensor`` attributes.
Attention masks are boolean arrays broadcastable to the score tensor
``[..., L_q, L_k]`` with ``True`` meaning "may attend".
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import DTYPE, Tensor


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    # per-head width; deliberately not tied to d_model // n_heads
    d_head: int = 64
    d_ff: int | None = None
    max_len: int = 20
    vocab_size: int = 5000

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name, value in asdict(self).items():
            if value < 1:
                raise ContractError(f"ModelDims.{name} must be >= 1, got {value}")
        if self.max_len < 2:
            raise ContractError("ModelDims.max_len must leave room for begin-of-sequence plus one token")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Parameter container with recursive naming and train/eval switching."""

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, rng: np.random.Generator | None = None) -> "Module":
        for m in self.modules():
            m.training = True
            if isinstance(m, Dropout):
                m.rng = rng
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self

    @contextlib.contextmanager
    def inference(self) -> Iterator["Module"]:
        """Temporarily switch every submodule to eval mode."""
        flags = [(m, m.training) for m in self.modules()]
        for m, _ in flags:
            m.training = False
        try:
            yield self
        finally:
            for m, flag in flags:
                m.training = flag

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ContractError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def _uniform(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init_std: float | None = None):
        if init_std is None:
            self.weight = _uniform(rng, (d_in, d_out), d_in)
        else:
            self.weight = Tensor(rng.normal(0.0, init_std, size=(d_in, d_out)), requires_grad=True)
        self.bias = _zeros((d_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, std: float = 1.0):
        self.weight = Tensor(rng.normal(0.0, std, size=(vocab_size, dim)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim, dtype=DTYPE), requires_grad=True)
        self.bias = _zeros((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training)


# ---------------------------------------------------------------------------
# positions and masks
# ---------------------------------------------------------------------------

def positional_encoding(max_len: int, d_model: int) -> Tensor:
    """Sinusoidal table: sin on even features, cos on odd ones."""
    if d_model % 2:
        raise ContractError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return Tensor(pe)


def causal_mask(length: int) -> np.ndarray:
    """``mask[i, j] = j <= i``."""
    return np.tril(np.ones((length, length), dtype=bool))


def key_padding_mask(key_valid: np.ndarray) -> np.ndarray:
    """Lift a ``[B, L_k]`` validity matrix to ``[B, 1, 1, L_k]`` for multi-head scores."""
    return np.asarray(key_valid, dtype=bool)[:, None, None, :]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                         drop: Dropout | None = None) -> Tensor:
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != scores.shape[-2:] and mask.shape[-2:] not in {
                (1, scores.shape[-1]), (scores.shape[-2], 1)}:
            raise ContractError(f"mask {mask.shape} does not match scores {scores.shape}")
    weights = T.softmax(scores, axis=-1, mask=mask)
    if drop is not None:
        weights = drop(weights)
    return T.matmul(weights, v)


class MultiHeadAttention(Module):
    """Projects to ``n_heads * d_head``, attends per head, projects back to ``d_model``."""

    def __init__(self, d_model: int, n_heads: int, d_head: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        self.n_heads = n_heads
        self.d_head = d_head
        inner = n_heads * d_head
        self.w_q = Linear(d_model, inner, rng)
        self.w_k = Linear(d_model, inner, rng)
        self.w_v = Linear(d_model, inner, rng)
        self.w_o = Linear(inner, d_model, rng)
        self.drop = Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        x = x.reshape(*lead, length, self.n_heads, self.d_head)
        return x.transpose((1, 0, 2) if not lead else (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = x.transpose((1, 0, 2))
        else:
            x = x.transpose((0, 2, 1, 3))
        *lead, length, _, _ = x.shape
        return x.reshape(*lead, length, self.n_heads * self.d_head)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        heads = scaled_dot_attention(self._split(self.w_q(q)), self._split(self.w_k(k)),
                                     self._split(self.w_v(v)), mask, self.drop)
        return self.w_o(self._merge(heads))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None,
                         params: MultiHeadAttention) -> Tensor:
    return params(q, k, v, mask)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dropout: float = 0.0):
        self.inner = Linear(d_model, d_ff, rng)
        self.outer = Linear(d_ff, d_model, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(self.drop(self.inner(x).relu()))


class EncoderLayer(Module):
    """Post-norm layer: self-attention, add & norm, feed-forward, add & norm."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator, dropout: float = 0.1):
        self.attn = MultiHeadAttention(dims.d_model, dims.n_heads, dims.d_head, rng, dropout)
        self.norm1 = LayerNorm(dims.d_model)
        self.ff = FeedForward(dims.d_model, dims.d_ff, rng, dropout)
        self.norm2 = LayerNorm(dims.d_model)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        x = self.norm1(x + self.drop(self.attn(x, x, x, pad_mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(Module):
    """Post-norm layer: masked self-attention, cross-attention, feed-forward."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator, dropout: float = 0.1):
        self.self_attn = MultiHeadAttention(dims.d_model, dims.n_heads, dims.d_head, rng, dropout)
        self.norm1 = LayerNorm(dims.d_model)
        self.cross_attn = MultiHeadAttention(dims.d_model, dims.n_heads, dims.d_head, rng, dropout)
        self.norm2 = LayerNorm(dims.d_model)
        self.ff = FeedForward(dims.d_model, dims.d_ff, rng, dropout)
        self.norm3 = LayerNorm(dims.d_model)
        self.drop = Dropout(dropout)

    def __call__(self, target: Tensor, memory: Tensor, causal: np.ndarray | None = None,
                 memory_mask: np.ndarray | None = None) -> Tensor:
        if causal is None:
            causal = causal_mask(target.shape[-2])
        x = self.norm1(target + self.drop(self.self_attn(target, target, target, causal)))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory, memory, memory_mask)))
        return self.norm3(x + self.drop(self.ff(x)))


def transformer_encoder_layer(x: Tensor, pad_mask, layer: EncoderLayer) -> Tensor:
    return layer(x, pad_mask)


def transformer_decoder_layer(target: Tensor, memory: Tensor, causal, pad_mask,
                              layer: DecoderLayer) -> Tensor:
    return layer(target, memory, causal, pad_mask)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

class LSTM(Module):
    """Single-layer LSTM; gate blocks ordered input, forget, candidate, output."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_hidden = d_hidden
        self.w_x = _uniform(rng, (d_in, 4 * d_hidden), d_hidden)
        self.w_h = _uniform(rng, (d_hidden, 4 * d_hidden), d_hidden)
        self.bias = _zeros((4 * d_hidden,))

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.d_hidden), dtype=DTYPE)
        return Tensor(z), Tensor(z)

    def __call__(self, steps: list[Tensor], state=None) -> tuple[list[Tensor], tuple[Tensor, Tensor]]:
        """Unroll over per-step inputs of shape ``[B, d_in]``; returns per-step hidden states."""
        h, c = state if state is not None else self.initial_state(steps[0].shape[0])
        outputs = []
        for x_t in steps:
            h, c = lstm_step(x_t, (h, c), self)
            outputs.append(h)
        return outputs, (h, c)


def _lstm_cell(gates: Tensor, c: Tensor, width: int) -> tuple[Tensor, Tensor]:
    i = gates[..., 0:width].sigmoid()
    f = gates[..., width:2 * width].sigmoid()
    g = gates[..., 2 * width:3 * width].tanh()
    o = gates[..., 3 * width:].sigmoid()
    c_new = f * c + i * g
    return o * c_new.tanh(), c_new


def lstm_step(x_t: Tensor, state: tuple[Tensor, Tensor], params: LSTM) -> tuple[Tensor, Tensor]:
    h, c = state
    gates = T.matmul(x_t, params.w_x) + T.matmul(h, params.w_h) + params.bias
    return _lstm_cell(gates, c, params.d_hidden)
