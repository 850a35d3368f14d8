"""Generator variants (LSTM baseline and three Transformer drop-ins) and their samplers.

Encoder-bearing variants read a *source* sequence. During generation the
source is a row of uniformly random non-reserved token ids that plays the
role of the latent draw; it travels with the samples so that they can be
re-scored on exactly the path that produced them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .data import BOS, EOS, N_RESERVED, PAD, SequenceBatch
from .errors import ContractError
from .layers import (LSTM, DecoderLayer, Dropout, Embedding, EncoderLayer, Linear, ModelDims, Module,
                     causal_mask, key_padding_mask, lstm_step, positional_encoding)
from .tensor import Tensor


class Variant(str, Enum):
    LSTM = "lstm"
    ENCODER_ONLY = "encoder_only"
    ENC_DEC_EMPTY = "enc_dec_empty"
    ENC_DEC_SHIFTED = "enc_dec_shifted"

    @property
    def causal(self) -> bool:
        return self in (Variant.LSTM, Variant.ENC_DEC_SHIFTED)

    @property
    def has_encoder(self) -> bool:
        return self is not Variant.LSTM

    @property
    def has_decoder(self) -> bool:
        return self in (Variant.ENC_DEC_EMPTY, Variant.ENC_DEC_SHIFTED)

    @property
    def label(self) -> str:
        return "DPGAN" if self is Variant.LSTM else "SADPGAN"


@dataclass
class SampleOutput:
    tokens: SequenceBatch
    # log-probability of each emitted token, terminating eos included; zero elsewhere
    per_token_log_prob: Tensor
    source: np.ndarray | None = None

    @property
    def lengths(self) -> np.ndarray:
        return self.tokens.lengths

    @property
    def mask(self) -> np.ndarray:
        return self.tokens.target_mask()

    def sentence_log_prob(self) -> np.ndarray:
        return self.per_token_log_prob.data.astype(np.float64).sum(axis=1)


class Generator(Module):
    def __init__(self, variant: Variant | str, dims: ModelDims, rng: np.random.Generator,
                 dropout: float = 0.1, n_reference_sources: int = 4,
                 embedding: np.ndarray | None = None):
        self.variant = Variant(variant)
        self.dims = dims
        d, V, L = dims.d_model, dims.vocab_size, dims.max_len
        if V <= N_RESERVED:
            raise ContractError("vocab_size must exceed the reserved ids")
        self.embedding = Embedding(V, d, rng)
        if embedding is not None:
            if embedding.shape != (V, d):
                raise ContractError(f"embedding matrix {embedding.shape} != {(V, d)}")
            self.embedding.weight.data = np.array(embedding, dtype=T.DTYPE)
        if self.variant is Variant.LSTM:
            self.lstm = LSTM(d, d, rng)
            self.reference_sources = None
        else:
            self.pe = positional_encoding(L, d).data
            self.drop = Dropout(dropout)
            self.encoder = [EncoderLayer(dims, rng, dropout) for _ in range(dims.n_layers)]
            if self.variant.has_decoder:
                self.decoder = [DecoderLayer(dims, rng, dropout) for _ in range(dims.n_layers)]
            self.reference_sources = rng.integers(N_RESERVED, V, size=(n_reference_sources, L))
        self.out = Linear(d, V, rng, init_std=0.02)

    # --- state ----------------------------------------------------------------
    def buffers(self) -> dict[str, np.ndarray]:
        if self.reference_sources is None:
            return {}
        return {"reference_sources": self.reference_sources}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        if self.reference_sources is not None:
            self.reference_sources = np.asarray(buffers["reference_sources"]).astype(np.int64)

    def draw_sources(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(N_RESERVED, self.dims.vocab_size, size=(n, self.dims.max_len))

    # --- internal paths ---------------------------------------------------------
    def _embed(self, ids: np.ndarray) -> Tensor:
        x = self.embedding(ids) + Tensor(self.pe[:ids.shape[1]])
        return self.drop(x)

    def _encode(self, ids: np.ndarray, valid: np.ndarray | None) -> Tensor:
        mask = key_padding_mask(valid) if valid is not None else None
        x = self._embed(ids)
        for layer in self.encoder:
            x = layer(x, mask)
        return x

    def _decode(self, target: Tensor, memory: Tensor, memory_valid: np.ndarray | None) -> Tensor:
        causal = causal_mask(target.shape[1])
        mm = key_padding_mask(memory_valid) if memory_valid is not None else None
        for layer in self.decoder:
            target = layer(target, memory, causal, mm)
        return target

    def _empty_target(self, batch: int) -> Tensor:
        L, d = self.dims.max_len, self.dims.d_model
        return self.drop(Tensor(np.broadcast_to(self.pe[:L], (batch, L, d))))

    def _parallel_hidden(self, ids: np.ndarray, valid: np.ndarray | None) -> Tensor:
        memory = self._encode(ids, valid)
        if self.variant is Variant.ENCODER_ONLY:
            return memory
        return self._decode(self._empty_target(ids.shape[0]), memory, valid)

    def _check_tokens(self, batch: SequenceBatch) -> None:
        if batch.size == 0:
            raise ContractError("empty batch")
        if batch.tokens.max() >= self.dims.vocab_size or batch.tokens.min() < 0:
            raise IndexError(f"token id out of range [0, {self.dims.vocab_size})")
        if batch.max_len != self.dims.max_len:
            raise ContractError(f"batch width {batch.max_len} != max_len {self.dims.max_len}")

    # --- public API -------------------------------------------------------------
    def forward_mle(self, batch: SequenceBatch, source: np.ndarray | None = None) -> Tensor:
        """Teacher-forced logits ``[b, L, V]``; position t predicts target t.

        For the parallel variants ``source`` replaces the sentence as the
        encoder input (the generation path). For the shifted-target variant it
        is the encoder input next to the shifted sentence; when omitted, the
        first reference source is used.
        """
        self._check_tokens(batch)
        inputs = batch.inputs()
        valid = batch.target_mask()
        v = self.variant
        if v is Variant.LSTM:
            steps = [self.embedding(inputs[:, t]) for t in range(batch.max_len)]
            hidden, _ = self.lstm(steps)
            h = T.stack(hidden, axis=1)
        elif v is Variant.ENC_DEC_SHIFTED:
            if source is None:
                source = np.broadcast_to(self.reference_sources[0], inputs.shape)
            memory = self._encode(np.asarray(source), None)
            h = self._decode(self._embed(inputs), memory, None)
        elif source is not None:
            h = self._parallel_hidden(np.asarray(source), None)
        else:
            h = self._parallel_hidden(inputs, valid)
        return self.out(h)

    def mle_loss(self, batch: SequenceBatch, rng: np.random.Generator | None = None) -> Tensor:
        """Mean teacher-forced cross-entropy over target positions."""
        source = None
        if self.variant is Variant.ENC_DEC_SHIFTED and rng is not None:
            source = self.draw_sources(batch.size, rng)
        targets = np.where(batch.target_mask(), batch.targets(), -1)
        return T.cross_entropy(self.forward_mle(batch, source), targets, ignore_index=-1)

    def log_prob(self, sequences: SequenceBatch, source: np.ndarray | None = None) -> Tensor:
        """Per-token log-probabilities ``[b, L]`` on the scoring path; zero past the end.

        Without ``source``, encoder-bearing variants average the conditional
        per-token log-probabilities over their fixed reference sources.
        """
        self._check_tokens(sequences)
        mask = sequences.target_mask()
        targets = np.where(mask, sequences.targets(), 0)
        fmask = mask.astype(T.DTYPE)

        def conditional(src):
            logp = T.log_softmax(self.forward_mle(sequences, src), axis=-1)
            return T.pick(logp, targets) * fmask

        if self.variant is Variant.LSTM or source is not None:
            return conditional(source)
        total = None
        for ref in self.reference_sources:
            lp = conditional(np.broadcast_to(ref, sequences.tokens.shape))
            total = lp if total is None else total + lp
        return total * (1.0 / len(self.reference_sources))

    def sample(self, n: int, rng: np.random.Generator, greedy: bool = False) -> SampleOutput:
        if self.variant.causal:
            return sample_autoregressive(self, n, rng, greedy)
        return sample_parallel(self, n, rng, greedy)

    def rescore(self, samples: SampleOutput) -> SampleOutput:
        """Same samples with differentiable log-probabilities from the scoring path."""
        return replace(samples, per_token_log_prob=self.log_prob(samples.tokens, samples.source))


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def _draw(logp: np.ndarray, rng: np.random.Generator, greedy: bool) -> np.ndarray:
    if greedy:
        return T.argmax(logp)
    return T.multinomial_sample(np.exp(logp.astype(np.float64)), rng)


def _finish(tokens: np.ndarray, logp_taken: np.ndarray, source) -> SampleOutput:
    n, L = tokens.shape
    is_eos = tokens == EOS
    lengths = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1), L)
    pos = np.arange(L)[None, :]
    content = pos < lengths[:, None]
    scored = pos <= lengths[:, None]
    tokens = np.where(content, tokens, PAD)
    logp = np.where(scored, logp_taken, 0.0).astype(T.DTYPE)
    return SampleOutput(SequenceBatch(tokens, lengths), Tensor(logp), source)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_parallel(g: Generator, n: int, rng: np.random.Generator, greedy: bool = False) -> SampleOutput:
    """All positions drawn at once, independently, from one pass over a noise source."""
    if g.variant.causal:
        raise ContractError(f"{g.variant.value} is causal; use sample_autoregressive")
    source = g.draw_sources(n, rng)
    with T.no_grad(), g.inference():
        logp = _log_softmax_np(g.out(g._parallel_hidden(source, None)).data)
    tokens = _draw(logp, rng, greedy)
    taken = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
    return _finish(tokens, taken, source)


def sample_autoregressive(g: Generator, n: int, rng: np.random.Generator, greedy: bool = False) -> SampleOutput:
    """Left-to-right sampling that feeds every emitted token back in; stops at eos or max_len."""
    if not g.variant.causal:
        raise ContractError(f"{g.variant.value} is not causal; use sample_parallel")
    L = g.dims.max_len
    tokens = np.full((n, L), PAD, dtype=np.int64)
    taken = np.zeros((n, L), dtype=np.float64)
    done = np.zeros(n, dtype=bool)
    source = None
    with T.no_grad(), g.inference():
        if g.variant is Variant.LSTM:
            state = g.lstm.initial_state(n)
            prev = np.full(n, BOS, dtype=np.int64)
        else:
            source = g.draw_sources(n, rng)
            memory = g._encode(source, None)
            prefix = np.full((n, 1), BOS, dtype=np.int64)
        for t in range(L):
            if g.variant is Variant.LSTM:
                h, c = lstm_step(g.embedding(prev), state, g.lstm)
                state = (h, c)
                logits = g.out(h).data
            else:
                h = g._decode(g._embed(prefix), memory, None)
                logits = g.out(h[:, -1, :]).data
            logp = _log_softmax_np(logits)
            tok = _draw(logp, rng, greedy)
            tok = np.where(done, PAD, tok)
            tokens[:, t] = tok
            taken[:, t] = np.where(done, 0.0, logp[np.arange(n), tok])
            done |= tok == EOS
            if done.all():
                break
            if g.variant is Variant.LSTM:
                prev = tok
            else:
                prefix = np.concatenate([prefix, tok[:, None]], axis=1)
    return _finish(tokens, taken, source)
