import math

import numpy as np
import pytest

from dpgan_lab import tensor as T
from dpgan_lab.errors import ContractError
from dpgan_lab.layers import (LSTM, DecoderLayer, EncoderLayer, ModelDims, MultiHeadAttention, causal_mask,
                              key_padding_mask, lstm_step, multi_head_attention, positional_encoding,
                              scaled_dot_attention, transformer_decoder_layer, transformer_encoder_layer)
from dpgan_lab.tensor import Tensor

from conftest import weighted_sum

SMALL = ModelDims(d_model=8, n_layers=1, n_heads=2, d_head=4, max_len=5, vocab_size=10)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float32))


# --- dims --------------------------------------------------------------------

def test_model_dims_defaults_and_validation():
    d = ModelDims()
    assert (d.d_model, d.n_layers, d.n_heads, d.d_head, d.d_ff) == (32, 2, 4, 64, 128)
    with pytest.raises(ValueError):
        ModelDims(max_len=1)
    with pytest.raises(ValueError):
        ModelDims(n_heads=0)


# --- positional encoding -------------------------------------------------------

def test_positional_encoding_examples():
    pe = positional_encoding(20, 32).data
    assert np.allclose(pe[0], np.tile([0.0, 1.0], 16))
    assert np.all(np.abs(pe) <= 1.0)
    assert abs(pe[1, 0] - 0.841471) < 1e-6
    with pytest.raises(ContractError):
        positional_encoding(5, 7)


# --- attention -----------------------------------------------------------------

def test_single_key_returns_its_value(rng):
    v = t(rng.normal(size=(1, 3)))
    out = scaled_dot_attention(t(rng.normal(size=(4, 2))), t(rng.normal(size=(1, 2))), v)
    assert np.allclose(out.data, np.repeat(v.data, 4, axis=0), atol=1e-6)


def test_identical_keys_average_values(rng):
    v = t(rng.normal(size=(3, 2)))
    k = t(np.ones((3, 4)))
    out = scaled_dot_attention(t(rng.normal(size=(2, 4))), k, v)
    assert np.allclose(out.data, v.data.mean(axis=0), atol=1e-6)


def test_causal_row_zero_ignores_later_values(rng):
    q, k, v = (t(rng.normal(size=(3, 4))) for _ in range(3))
    base = scaled_dot_attention(q, k, v, causal_mask(3)).data
    v2 = v.data.copy()
    v2[2] += 10.0
    moved = scaled_dot_attention(q, k, t(v2), causal_mask(3)).data
    assert np.array_equal(base[0], moved[0]) and np.array_equal(base[1], moved[1])
    assert not np.allclose(base[2], moved[2])


def test_fully_masked_row_is_an_error(rng):
    q = t(rng.normal(size=(2, 4)))
    with pytest.raises(ContractError, match="no attendable key"):
        scaled_dot_attention(q, q, q, np.array([[True, False], [False, False]]))


def test_mask_shape_mismatch(rng):
    q = t(rng.normal(size=(2, 4)))
    with pytest.raises(ContractError):
        scaled_dot_attention(q, q, q, np.ones((3, 3), dtype=bool))


def test_single_head_reduces_to_plain_attention(rng):
    mha = MultiHeadAttention(4, 1, 4, rng)
    mha.w_o.weight.data = np.eye(4, dtype=np.float32)
    x = t(rng.normal(size=(5, 4)))
    expect = scaled_dot_attention(mha.w_q(x), mha.w_k(x), mha.w_v(x))
    assert np.allclose(multi_head_attention(x, x, x, None, mha).data, expect.data, atol=1e-6)


def test_multi_head_output_shape(rng):
    mha = MultiHeadAttention(32, 4, 64, rng)
    assert mha(t(np.ones((3, 7, 32))), t(np.ones((3, 5, 32))), t(np.ones((3, 5, 32)))).shape == (3, 7, 32)
    assert mha(t(np.ones((7, 32))), t(np.ones((5, 32))), t(np.ones((5, 32)))).shape == (7, 32)


def _params_check(module, fn, inputs, tol=1e-3):
    """Finite-difference check over the inputs and every parameter of ``module`` (perturbed in place)."""
    n_in = len(inputs)
    params = list(module.parameters().values())
    return T.finite_diff_check(lambda *args: fn(*args[:n_in]), list(inputs) + params, tol=tol)


def test_multi_head_gradients(rng):
    mha = MultiHeadAttention(8, 2, 4, rng)
    lw = weighted_sum(1)
    x = t(rng.normal(size=(5, 8)))
    rep = _params_check(mha, lambda x: lw(mha(x, x, x, causal_mask(5))), [x])
    assert rep.passed, rep.max_rel_error


# --- encoder / decoder layers -----------------------------------------------------

def test_encoder_zeroed_projections_give_layer_norm_of_input(rng):
    layer = EncoderLayer(SMALL, rng, dropout=0.0)
    for lin in (layer.attn.w_o, layer.ff.outer):
        lin.weight.data[:] = 0.0
    x = t(rng.normal(size=(5, 8)))
    xd = x.data
    expect = (xd - xd.mean(-1, keepdims=True)) / np.sqrt(xd.var(-1, keepdims=True) + 1e-5)
    out = transformer_encoder_layer(x, None, layer).data
    assert np.allclose(out, expect, atol=1e-4)


def test_encoder_is_permutation_equivariant(rng):
    layer = EncoderLayer(SMALL, rng, dropout=0.0)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    perm = np.array([3, 1, 2, 0, 4])
    assert np.allclose(layer(t(x)).data[perm], layer(t(x[perm])).data, atol=1e-5)


def test_encoder_depends_on_future_positions(rng):
    layer = EncoderLayer(SMALL, rng, dropout=0.0)
    x = rng.normal(size=(5, 8)).astype(np.float32)
    x2 = x.copy()
    x2[4] += 1.0
    assert not np.allclose(layer(t(x)).data[0], layer(t(x2)).data[0], atol=1e-6)


def test_encoder_padding_keys_are_ignored(rng):
    layer = EncoderLayer(SMALL, rng, dropout=0.0)
    x = rng.normal(size=(1, 5, 8)).astype(np.float32)
    valid = np.array([[True, True, True, False, False]])
    x2 = x.copy()
    x2[0, 4] += 3.0
    a = layer(t(x), key_padding_mask(valid)).data
    b = layer(t(x2), key_padding_mask(valid)).data
    assert np.allclose(a[0, :3], b[0, :3], atol=1e-6)


def test_decoder_is_causal_in_target_and_open_in_memory(rng):
    layer = DecoderLayer(SMALL, rng, dropout=0.0)
    tgt = rng.normal(size=(5, 8)).astype(np.float32)
    mem = rng.normal(size=(4, 8)).astype(np.float32)
    base = transformer_decoder_layer(t(tgt), t(mem), causal_mask(5), None, layer).data
    for j in range(1, 5):
        moved = tgt.copy()
        moved[j] += 2.0
        out = layer(t(moved), t(mem)).data
        assert np.abs(out[:j] - base[:j]).max() <= 1e-6
    mem2 = mem.copy()
    mem2[3] += 2.0
    assert not np.allclose(layer(t(tgt), t(mem2)).data[0], base[0], atol=1e-6)


def _relu_margin(fn, *args) -> float:
    """Smallest |pre-activation| seen by any ReLU while evaluating ``fn``."""
    seen = []
    original = T.relu

    def spy(a):
        seen.append(np.abs(a.data).min())
        return original(a)
    T.relu = spy
    try:
        fn(*args)
    finally:
        T.relu = original
    return min(seen)


@pytest.mark.parametrize("kind", ["encoder", "decoder"])
def test_encoder_and_decoder_gradients(kind):
    lw = weighted_sum(2)
    # central differences are meaningless across a ReLU kink, so draw inputs
    # until every pre-activation sits clear of the perturbation band
    for seed in range(50):
        rng = np.random.default_rng(seed)
        layer = (EncoderLayer if kind == "encoder" else DecoderLayer)(SMALL, rng, dropout=0.0)
        inputs = [t(rng.normal(size=(4, 8)))] + ([t(rng.normal(size=(3, 8)))] if kind == "decoder" else [])
        fn = (lambda x: lw(layer(x))) if kind == "encoder" else (lambda a, m: lw(layer(a, m)))
        if _relu_margin(fn, *inputs) > 0.02:
            break
    rep = _params_check(layer, fn, inputs)
    assert rep.passed, rep.max_rel_error


# --- LSTM --------------------------------------------------------------------

def test_lstm_zero_everything_stays_zero(rng):
    lstm = LSTM(3, 4, rng)
    for p in lstm.parameters().values():
        p.data[:] = 0.0
    h, c = lstm_step(t(np.ones((2, 3))), lstm.initial_state(2), lstm)
    assert not h.data.any() and not c.data.any()


def test_lstm_saturated_gates_hold_memory(rng):
    lstm = LSTM(3, 4, rng)
    lstm.bias.data[:4] = -30.0   # input gate shut
    lstm.bias.data[4:8] = 30.0   # forget gate open
    c0 = t(rng.normal(size=(2, 4)))
    _, c = lstm_step(t(rng.normal(size=(2, 3))), (t(np.zeros((2, 4))), c0), lstm)
    assert np.allclose(c.data, c0.data, atol=1e-6)


def test_lstm_three_step_gradient(rng):
    lstm = LSTM(3, 4, rng)
    lw = weighted_sum(3)

    def f(a, b, c):
        outs, _ = lstm([a, b, c])
        return lw(T.stack(outs, axis=1))
    rep = _params_check(lstm, f, [t(rng.normal(size=(2, 3))) for _ in range(3)])
    assert rep.passed, rep.max_rel_error


def test_lstm_is_causal(rng):
    lstm = LSTM(3, 4, rng)
    xs = [t(rng.normal(size=(1, 3))) for _ in range(4)]
    base, _ = lstm(xs)
    xs2 = list(xs)
    xs2[3] = t(xs[3].data + 5.0)
    moved, _ = lstm(xs2)
    for i in range(3):
        assert np.array_equal(base[i].data, moved[i].data)


def test_dropout_only_in_train_mode(rng):
    layer = EncoderLayer(SMALL, rng, dropout=0.5)
    x = t(rng.normal(size=(5, 8)))
    a = layer(x).data
    assert np.array_equal(a, layer(x).data)
    layer.train(np.random.default_rng(0))
    assert not np.allclose(layer(x).data, a)
    with layer.inference():
        assert np.array_equal(layer(x).data, a)
    assert layer.training
