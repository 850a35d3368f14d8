import math

import numpy as np
import pytest

from dpgan_lab import tensor as T
from dpgan_lab.data import EOS, N_RESERVED, SequenceBatch, random_sequences
from dpgan_lab.errors import ContractError
from dpgan_lab.generators import Generator, Variant, sample_autoregressive, sample_parallel
from dpgan_lab.layers import ModelDims

DIMS = ModelDims(d_model=16, n_layers=2, n_heads=2, d_head=8, max_len=8, vocab_size=30)
ALL = list(Variant)


def make(variant, seed=0, dims=DIMS, dropout=0.1):
    return Generator(variant, dims, np.random.default_rng(seed), dropout=dropout)


def batch(n=3, seed=1, dims=DIMS):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, dims.max_len + 1, size=n)
    seqs = [rng.integers(N_RESERVED, dims.vocab_size, size=k).tolist() for k in lengths]
    return SequenceBatch.from_lists(seqs, dims.max_len)


def future_invariance(g, b: SequenceBatch, t: int) -> float:
    """Max change of logits at positions <= t when sentence tokens from t on are resampled.

    Logits at t read the shifted inputs (sentence tokens < t) and predict
    token t, so tokens at t and later are all in the future.
    """
    full = np.full(b.size, g.dims.max_len)
    tokens = b.tokens.copy()
    tokens[tokens == 0] = N_RESERVED
    base = g.forward_mle(SequenceBatch(tokens, full)).data
    moved_tokens = tokens.copy()
    moved_tokens[:, t:] = np.random.default_rng(t).integers(N_RESERVED, g.dims.vocab_size,
                                                                 size=moved_tokens[:, t:].shape)
    moved = g.forward_mle(SequenceBatch(moved_tokens, full)).data
    return float(np.abs(moved[:, :t + 1] - base[:, :t + 1]).max())


@pytest.mark.parametrize("variant", ALL)
def test_forward_shape_and_index_error(variant):
    g = make(variant)
    assert g.forward_mle(batch()).shape == (3, DIMS.max_len, DIMS.vocab_size)
    bad = SequenceBatch(np.full((1, DIMS.max_len), DIMS.vocab_size), np.array([DIMS.max_len]))
    with pytest.raises(IndexError):
        g.forward_mle(bad)


@pytest.mark.parametrize("variant", [Variant.LSTM, Variant.ENC_DEC_SHIFTED])
def test_causal_variants_ignore_future_tokens(variant):
    g = make(variant)
    b = batch(4)
    for t in range(DIMS.max_len - 1):
        assert future_invariance(g, b, t) <= 1e-6


def test_encoder_only_sees_the_future():
    g = make(Variant.ENCODER_ONLY)
    worst = max(future_invariance(g, batch(2, seed=s), 0) for s in range(10))
    assert worst > 1e-3


@pytest.mark.parametrize("variant", ALL)
def test_fresh_generator_is_near_uniform(variant):
    dims = ModelDims(d_model=32, n_layers=2, n_heads=4, d_head=64, max_len=10, vocab_size=100)
    g = make(variant, dims=dims)
    b = random_sequences(16, dims.max_len, dims.vocab_size, np.random.default_rng(0))
    per_token = -g.log_prob(b).data.sum() / b.target_mask().sum()
    assert abs(per_token - math.log(100)) / math.log(100) < 0.05


def _uniform(g):
    g.out.weight.data[:] = 0.0
    g.out.bias.data[:] = 0.0
    return g


@pytest.mark.parametrize("variant", ALL)
def test_uniform_generator_log_prob_closed_form(variant):
    dims = ModelDims(d_model=8, n_layers=1, n_heads=2, d_head=4, max_len=6, vocab_size=10)
    g = _uniform(make(variant, dims=dims))
    b = batch(3, dims=dims)
    lp = g.log_prob(b).data
    mask = b.target_mask()
    assert np.allclose(lp[mask], -math.log(10), atol=1e-6)
    assert (lp[~mask] == 0).all()


@pytest.mark.parametrize("variant", ALL)
def test_log_prob_rows_deterministic_and_nonpositive(variant):
    g = make(variant)
    one = batch(1)
    twice = SequenceBatch.concat([one, one])
    lp = g.log_prob(twice).data
    assert np.array_equal(lp[0], lp[1]) and (lp <= 0).all()
    with pytest.raises(ContractError):
        g.log_prob(SequenceBatch(np.zeros((0, DIMS.max_len)), np.zeros(0)))


@pytest.mark.parametrize("variant", ALL)
def test_sampling_contracts(variant):
    g = make(variant)
    out = g.sample(4, np.random.default_rng(5))
    assert out.tokens.tokens.shape == (4, DIMS.max_len)
    assert out.tokens.tokens.max() < DIMS.vocab_size and (out.lengths <= DIMS.max_len).all()
    out.tokens.validate(DIMS.vocab_size)
    lp = out.per_token_log_prob.data
    assert (lp <= 0).all() and (lp[~out.mask] == 0).all()
    again = g.sample(4, np.random.default_rng(5))
    assert np.array_equal(out.tokens.tokens, again.tokens.tokens)
    assert out.per_token_log_prob.data.tobytes() == again.per_token_log_prob.data.tobytes()


def test_sampler_dispatch_errors():
    with pytest.raises(ContractError, match="sample_autoregressive"):
        sample_parallel(make(Variant.LSTM), 2, np.random.default_rng(0))
    with pytest.raises(ContractError):
        sample_autoregressive(make(Variant.ENCODER_ONLY), 2, np.random.default_rng(0))


@pytest.mark.parametrize("variant", [Variant.ENCODER_ONLY, Variant.ENC_DEC_EMPTY])
def test_parallel_log_probs_match_softmax_and_greedy_is_deterministic(variant):
    g = make(variant)
    out = sample_parallel(g, 4, np.random.default_rng(2))
    with g.inference():
        logits = g.forward_mle(out.tokens, out.source).data.astype(np.float64)
    logp = logits - np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1, keepdims=True)) \
        - logits.max(-1, keepdims=True)
    expect = np.take_along_axis(logp, out.tokens.targets()[..., None], -1)[..., 0] * out.mask
    assert np.abs(expect - out.per_token_log_prob.data).max() <= 1e-6
    a = sample_parallel(g, 3, np.random.default_rng(9), greedy=True)
    b = sample_parallel(g, 3, np.random.default_rng(9), greedy=True)
    assert np.array_equal(a.tokens.tokens, b.tokens.tokens)


@pytest.mark.parametrize("variant", ALL)
def test_sampling_and_scoring_paths_agree(variant):
    g = make(variant)
    out = g.sample(6, np.random.default_rng(4))
    with g.inference():
        rescored = g.rescore(out).per_token_log_prob.data
    assert np.abs(rescored - out.per_token_log_prob.data).max() <= 1e-5


@pytest.mark.parametrize("variant", [Variant.LSTM, Variant.ENC_DEC_SHIFTED])
def test_rigged_eos_gives_empty_sentences(variant):
    g = make(variant)
    g.out.weight.data[:] = 0.0
    g.out.bias.data[:] = 0.0
    g.out.bias.data[EOS] = 50.0
    out = g.sample(5, np.random.default_rng(0))
    assert (out.lengths == 0).all()
    assert (out.tokens.tokens == 0).all()
    assert out.mask.sum(axis=1).tolist() == [1] * 5


@pytest.mark.parametrize("variant", ALL)
def test_mle_loss_decreases(variant):
    from dpgan_lab.optim import Adam
    g = make(variant)
    g.train(np.random.default_rng(0))
    b = batch(16, seed=3)
    opt = Adam(g.parameters(), 1e-2)
    rng = np.random.default_rng(0)
    first = None
    for _ in range(15):
        loss = g.mle_loss(b, rng)
        first = first if first is not None else loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < first


def test_generator_gradients_small_dims():
    dims = ModelDims(d_model=4, n_layers=1, n_heads=1, d_head=4, max_len=3, vocab_size=6)
    for variant in ALL:
        g = make(variant, dims=dims, dropout=0.0)
        b = batch(2, dims=dims)
        src = g.draw_sources(2, np.random.default_rng(0)) if variant is Variant.ENC_DEC_SHIFTED else None
        params = list(g.parameters().values())
        rep = T.finite_diff_check(lambda *_: g.mle_loss(b) if src is None else
                                  T.cross_entropy(g.forward_mle(b, src), np.where(b.target_mask(), b.targets(), -1), -1),
                                  params)
        assert rep.passed, (variant, rep.max_rel_error)
