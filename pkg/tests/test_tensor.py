import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dpgan_lab import tensor as T
from dpgan_lab.errors import ContractError, NonFiniteError, ShapeError
from dpgan_lab.tensor import Tensor

from conftest import weighted_sum


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


# --- forward examples -----------------------------------------------------

def test_matmul_examples():
    eye = t(np.eye(2))
    m = t([[5, 6], [7, 8]])
    assert np.array_equal((eye @ m).data, m.data)
    assert np.array_equal((t([[1, 2], [3, 4]]) @ t([[1], [1]])).data, [[3], [7]])
    z = T.matmul(t(np.zeros((2, 3))), t(np.random.default_rng(0).normal(size=(3, 4))))
    assert np.array_equal(z.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(t(np.ones((2, 3))), t(np.ones((4, 5))))


def test_softmax_examples():
    assert np.allclose(T.softmax(t([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(t([1000.0, 1000.0, 1000.0])).data
    assert np.all(np.isfinite(big)) and np.allclose(big, 1 / 3)
    assert np.allclose(T.softmax(t([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-6)


def test_softmax_fully_masked_row_is_an_error():
    with pytest.raises(ContractError, match="no attendable key"):
        T.softmax(t([[1.0, 2.0]]), mask=np.array([[False, False]]))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, (3, 6), elements=st.floats(-50, 50, width=32)), st.floats(-100, 100, width=32))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = T.softmax(t(x)).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.allclose(T.softmax(t(x + np.float32(c))).data, s, atol=1e-5)


@pytest.mark.parametrize("n", [2, 10, 5000])
def test_cross_entropy_uniform_is_log_n(n):
    loss = T.cross_entropy(t(np.zeros((3, n))), np.array([0, 1, n - 1]))
    assert abs(loss.item() - math.log(n)) < 1e-6


def test_cross_entropy_limits_and_errors():
    logits = np.zeros((2, 5), dtype=np.float32)
    logits[0, 3] = logits[1, 1] = 30.0
    assert T.cross_entropy(t(logits), np.array([3, 1])).item() < 1e-6
    with pytest.raises(ContractError, match="no effective targets"):
        T.cross_entropy(t(logits), np.array([-100, -100]))
    with pytest.raises(IndexError):
        T.cross_entropy(t(logits), np.array([5, 0]))


def test_backward_examples():
    x = t(np.arange(6).reshape(2, 3), grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))
    a, b = t([1.0, 2.0, 3.0], True), t([4.0, 5.0, 6.0], True)
    (a * b).sum().backward()
    assert np.array_equal(a.grad, b.data) and np.array_equal(b.grad, a.data)


def test_gradients_accumulate_over_multiple_consumers():
    x = t([2.0, -1.0], True)
    (x * x + x * 3.0).sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 3)


def test_backward_rejects_non_scalar_and_untaped():
    with pytest.raises(ContractError):
        (t([1.0, 2.0], True) * 2.0).backward()
    with pytest.raises(ContractError):
        t(1.0).backward()


def test_no_grad_records_nothing():
    x = t([1.0], True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_nan_guard_names_the_op():
    with T.nan_guard():
        with pytest.raises(NonFiniteError, match="log"):
            T.log(t([-1.0]))
    with np.errstate(invalid="ignore"):
        T.log(t([-1.0]))  # guard off: no exception


def test_float32_throughout():
    x = t(np.ones((2, 3)), True)
    loss = T.cross_entropy(x @ t(np.ones((3, 4))), np.array([0, 1]))
    loss.backward()
    assert loss.data.dtype == np.float32 and x.grad.dtype == np.float32


def test_dropout_modes(rng):
    x = t(np.ones((50, 50)))
    assert T.dropout(x, 0.5, rng, train=False) is x
    y = T.dropout(x, 0.5, rng, train=True).data
    assert set(np.unique(y)) <= {0.0, 2.0} and 0.4 < (y == 0).mean() < 0.6


def test_multinomial_and_argmax(rng):
    probs = np.array([[0.0, 1.0, 0.0], [0.5, 0.0, 0.5]])
    draws = np.stack([T.multinomial_sample(probs, rng) for _ in range(200)])
    assert (draws[:, 0] == 1).all() and set(draws[:, 1]) == {0, 2}
    assert np.array_equal(T.argmax(probs[:1]), [1])


def test_same_seed_bit_identical():
    a = T.dropout(t(np.ones(100)), 0.3, np.random.default_rng(5), True).data
    b = T.dropout(t(np.ones(100)), 0.3, np.random.default_rng(5), True).data
    assert a.tobytes() == b.tobytes()


# --- gradient oracle --------------------------------------------------------

def test_finite_diff_sum_of_squares():
    rep = T.finite_diff_check(lambda x: (x * x).sum(), t([1.0, 2.0, 3.0]), tol=1e-4)
    assert rep.passed
    assert np.allclose(rep.analytic[0], [2, 4, 6])


def test_finite_diff_constant():
    rep = T.finite_diff_check(lambda x: t(3.0) + (x * 0.0).sum(), t([1.0, 2.0]))
    assert rep.passed and not rep.analytic[0].any() and not rep.numeric[0].any()


def test_finite_diff_softmax_cross_entropy(rng):
    targets = rng.integers(0, 7, size=4)
    rep = T.finite_diff_check(lambda x: T.cross_entropy(x, targets), t(rng.normal(size=(4, 7))))
    assert rep.passed, rep.max_rel_error


def test_finite_diff_detects_a_wrong_gradient():
    def bad(x):
        return T._make((x.data ** 2).sum(), (x,), lambda g: (g * x.data,), "bad_square")
    assert not T.finite_diff_check(bad, t([1.0, 2.0])).passed


def _ops(rng):
    lw = weighted_sum(7)
    ids = rng.integers(0, 6, size=(3, 4))
    idx = rng.integers(0, 5, size=3)
    return {
        "add": ([(3, 4), (4,)], lambda a, b: lw(a + b)),
        "sub": ([(3, 4), (3, 4)], lambda a, b: lw(a - b)),
        "mul": ([(3, 4), (3, 1)], lambda a, b: lw(a * b)),
        "div": ([(3, 4), (3, 4)], lambda a, b: lw(a / (b * b + 1.0))),
        "exp": ([(3, 4)], lambda a: lw(T.exp(a * 0.5))),
        "log": ([(3, 4)], lambda a: lw(T.log(a * a + 1.0))),
        "tanh": ([(3, 4)], lambda a: lw(T.tanh(a))),
        "sigmoid": ([(3, 4)], lambda a: lw(T.sigmoid(a))),
        "relu": ([(3, 4)], lambda a: lw(T.relu(a + 0.05))),
        "matmul_2d": ([(3, 4), (4, 5)], lambda a, b: lw(a @ b)),
        "matmul_batched": ([(2, 3, 4), (2, 4, 2)], lambda a, b: lw(a @ b)),
        "matmul_3d_by_2d": ([(2, 3, 4), (4, 5)], lambda a, b: lw(a @ b)),
        "sum_axis": ([(3, 4)], lambda a: lw(a.sum(axis=0))),
        "mean": ([(3, 4)], lambda a: lw(a.mean(axis=-1, keepdims=True))),
        "reshape_transpose": ([(2, 3, 4)], lambda a: lw(a.reshape(6, 4).transpose(1, 0))),
        "slice": ([(3, 4)], lambda a: lw(a[1:, ::2])),
        "fancy_index": ([(3, 4)], lambda a: lw(a[np.array([0, 2, 0])])),
        "concat": ([(3, 2), (3, 4)], lambda a, b: lw(T.concat([a, b], axis=1))),
        "stack": ([(3, 4), (3, 4)], lambda a, b: lw(T.stack([a, b], axis=1))),
        "softmax": ([(3, 5)], lambda a: lw(T.softmax(a))),
        "masked_softmax": ([(3, 5)], lambda a: lw(T.softmax(a, mask=np.tri(3, 5, 1, dtype=bool)))),
        "log_softmax": ([(3, 5)], lambda a: lw(T.log_softmax(a))),
        "pick": ([(3, 5)], lambda a: lw(T.pick(a, idx))),
        "cross_entropy_ignore": ([(2, 3, 5)], lambda a: T.cross_entropy(a, np.array([[1, -1, 4], [0, 2, -1]]), -1)),
        "layer_norm": ([(3, 6), (6,), (6,)], lambda x, g, b: lw(T.layer_norm(x, g, b))),
        "embedding_lookup": ([(6, 3)], lambda w: lw(T.embedding_lookup(w, ids))),
        "clamp_min": ([(3, 4)], lambda a: lw(T.clamp_min(a, -0.3))),
    }


@pytest.mark.parametrize("name", list(_ops(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    shapes, fn = _ops(np.random.default_rng(0))[name]
    inputs = [t(rng.normal(size=s)) for s in shapes]
    if name == "clamp_min":  # keep coordinates away from the kink
        d = inputs[0].data
        d[np.abs(d + 0.3) < 0.01] += 0.05
    if name == "relu":
        d = inputs[0].data
        d[np.abs(d + 0.05) < 0.01] += 0.05
    rep = T.finite_diff_check(fn, inputs)
    assert rep.passed, f"{name}: {rep.max_rel_error}"


def test_dropout_gradient_uses_the_same_mask():
    x = t(np.ones((4, 4)), True)
    y = T.dropout(x, 0.5, np.random.default_rng(3), True)
    y.sum().backward()
    assert np.array_equal(x.grad, y.data)
