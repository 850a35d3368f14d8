"""Language-model discriminator, log-likelihood rewards and the policy-gradient loss.

The discriminator scores text by how likely it finds each token. Real text
is pushed up, generated text is pushed down (clamped at a per-token floor),
and the generator is rewarded with the discriminator's per-token
log-likelihood of its own samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SequenceBatch
from .errors import ContractError, NonFiniteError
from .generators import SampleOutput
from .layers import LSTM, Embedding, Linear, Module
from .optim import Adam
from .tensor import DTYPE, Tensor

REWARD_FLOOR = -10.0


class Discriminator(Module):
    """One-layer LSTM language model over the generator's vocabulary."""

    def __init__(self, vocab_size: int, d_model: int, max_len: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = Embedding(vocab_size, d_model, rng)
        self.lstm = LSTM(d_model, d_model, rng)
        self.out = Linear(d_model, vocab_size, rng, init_std=0.02)

    def logits(self, seqs: SequenceBatch) -> Tensor:
        inputs = seqs.inputs()
        hidden, _ = self.lstm([self.embedding(inputs[:, t]) for t in range(seqs.max_len)])
        return self.out(T.stack(hidden, axis=1))


def d_log_likelihood(d: Discriminator, seqs: SequenceBatch) -> Tensor:
    """Teacher-forced ``log D(y_t | y_<t)`` per target position; zero elsewhere."""
    if seqs.size == 0:
        raise ContractError("empty batch")
    mask = seqs.target_mask()
    targets = np.where(mask, seqs.targets(), 0)
    logp = T.log_softmax(d.logits(seqs), axis=-1)
    return T.pick(logp, targets) * mask.astype(DTYPE)


def discriminator_loss(d: Discriminator, real: SequenceBatch, fake: SequenceBatch,
                       floor: float = REWARD_FLOOR) -> Tensor:
    if real.size == 0 or fake.size == 0:
        raise ContractError("discriminator step needs non-empty real and fake batches")
    real_mask = real.target_mask()
    fake_mask = fake.target_mask()
    real_term = d_log_likelihood(d, real).sum() * (-1.0 / real_mask.sum())
    fake_ll = T.clamp_min(d_log_likelihood(d, fake), floor) * fake_mask.astype(DTYPE)
    return real_term + fake_ll.sum() * (1.0 / fake_mask.sum())


def train_discriminator_step(d: Discriminator, real: SequenceBatch, fake: SequenceBatch,
                             optimizer: Adam, floor: float = REWARD_FLOOR) -> float:
    """One Adam step on -mean log D(real) + mean max(log D(fake), floor)."""
    loss = discriminator_loss(d, real, fake, floor)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError("discriminator_loss", f"value={value}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return value


class EMABaseline:
    """Exponential moving average of batch-mean sentence rewards; the first batch initialises it."""

    def __init__(self, decay: float = 0.95, value: float | None = None):
        self.decay = decay
        self.value = value

    def update(self, batch_mean: float | None) -> float:
        if batch_mean is not None:
            if self.value is None:
                self.value = batch_mean
            else:
                self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean
        return 0.0 if self.value is None else self.value


@dataclass
class RewardBatch:
    word_reward: np.ndarray      # [b, L], log-likelihood units
    sentence_reward: np.ndarray  # [b]
    baseline: float
    weight: np.ndarray           # [b, L], 1 where a reward applies
    signal: np.ndarray           # [b, L], mixed per-token training signal

    @classmethod
    def constant(cls, samples: SampleOutput, value: float = 1.0, baseline: float = 0.0) -> "RewardBatch":
        """Every scored token of every sample gets ``value`` (used for self-checks)."""
        weight = samples.mask.astype(np.float64)
        word = weight * value
        return cls(word, np.full(samples.tokens.size, value, dtype=np.float64), baseline, weight, word.copy())


def compute_rewards(d: Discriminator, samples: SampleOutput, mix: tuple[float, float] = (0.5, 0.5),
                    baseline: EMABaseline | None = None, floor: float = REWARD_FLOOR,
                    normalize: bool = False) -> RewardBatch:
    lam_word, lam_sent = mix
    if lam_word < 0 or lam_sent < 0 or abs(lam_word + lam_sent - 1.0) > 1e-9:
        raise ContractError(f"reward mix must be non-negative and sum to 1, got {mix}")
    with T.no_grad(), d.inference():
        ll = d_log_likelihood(d, samples.tokens).data.astype(np.float64)
    # empty sentences carry no reward at all
    weight = (samples.mask & (samples.lengths > 0)[:, None]).astype(np.float64)
    word = np.maximum(ll, floor) * weight
    counts = weight.sum(axis=1)
    sentence = np.divide(word.sum(axis=1), counts, out=np.zeros_like(counts), where=counts > 0)
    signal = (lam_word * word + lam_sent * sentence[:, None]) * weight

    nonempty = counts > 0
    batch_mean = float(sentence[nonempty].mean()) if nonempty.any() else None
    base = baseline.update(batch_mean) if baseline is not None else (batch_mean or 0.0)
    if normalize and weight.sum() > 1:
        adv = (signal - base)[weight > 0]
        signal = (base + (signal - base) / (adv.std() + 1e-8)) * weight
    if not (np.isfinite(signal).all() and math.isfinite(base)):
        raise NonFiniteError("compute_rewards")
    return RewardBatch(word, sentence, base, weight, signal)


def policy_gradient_loss(samples: SampleOutput, rewards: RewardBatch) -> Tensor:
    """REINFORCE surrogate: -mean over rewarded tokens of (signal - baseline) * log p.

    ``samples.per_token_log_prob`` must carry gradients (see ``Generator.rescore``);
    the reward side is a constant.
    """
    logp = samples.per_token_log_prob
    if logp.shape != rewards.weight.shape:
        raise ContractError(f"log-prob shape {logp.shape} != reward shape {rewards.weight.shape}")
    count = rewards.weight.sum()
    if count == 0:
        return Tensor(0.0)
    advantage = ((rewards.signal - rewards.baseline) * rewards.weight).astype(DTYPE)
    loss = (logp * advantage).sum() * (-1.0 / float(count))
    if not math.isfinite(loss.item()):
        raise NonFiniteError("policy_gradient_loss")
    return loss
