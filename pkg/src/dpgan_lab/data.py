"""Vocabulary, corpora, the synthetic oracle, embedding files and batching."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError
from .layers import LSTM, Embedding, Linear, lstm_step
from .tensor import DTYPE, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = len(RESERVED)


class Vocabulary:
    """Token/id bijection with ids 0-3 reserved for pad, bos, eos and unk."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if len(set(words)) != len(words):
            raise ContractError("vocabulary words must be unique")
        if any(w in RESERVED for w in words):
            raise ContractError("vocabulary words may not reuse reserved tokens")
        self.itos = list(RESERVED) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """Vocabulary whose words are the decimal ids themselves (oracle data)."""
        return cls([str(i) for i in range(N_RESERVED, size)])

    @property
    def size(self) -> int:
        return len(self.itos)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def words(self) -> list[str]:
        return self.itos[N_RESERVED:]

    def encode(self, sentence: str | Sequence[str], max_len: int | None = None) -> list[int]:
        """Map tokens to ids and append eos; content is cut to ``max_len - 1`` tokens."""
        tokens = sentence.lower().split() if isinstance(sentence, str) else list(sentence)
        ids = [self.stoi.get(tok, UNK) for tok in tokens]
        if max_len is not None:
            ids = ids[:max_len - 1]
        return ids + [EOS]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i == PAD:
                continue
            words.append(self.itos[i])
        return " ".join(words)


def build_vocab(lines: Iterable[str | Sequence[str]], max_size: int = 5000) -> Vocabulary:
    """Keep the ``max_size - 4`` most frequent tokens; ties go to the lexicographically smaller."""
    if max_size <= N_RESERVED:
        raise ContractError(f"max_size must exceed the {N_RESERVED} reserved ids")
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.lower().split() if isinstance(line, str) else line)
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([w for w, _ in ranked[:max_size - N_RESERVED]])


def read_corpus(path: str | Path) -> list[list[str]]:
    """One sentence per line, lowercased and whitespace-tokenised; blank lines skipped."""
    with open(path, encoding="utf-8") as fh:
        return [line.lower().split() for line in fh if line.strip()]


@dataclass
class SequenceBatch:
    """Padded token matrix. Content occupies ``tokens[i, :lengths[i]]``; the rest is pad.

    The end-of-sequence token is implicit: when ``lengths[i] < L`` it is the
    target at position ``lengths[i]``.
    """

    tokens: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.tokens.ndim != 2 or self.lengths.shape != (self.tokens.shape[0],):
            raise ContractError(f"bad batch shapes {self.tokens.shape} / {self.lengths.shape}")
        if (self.lengths < 0).any() or (self.lengths > self.tokens.shape[1]).any():
            raise ContractError("lengths must lie in [0, L]")

    @classmethod
    def from_lists(cls, seqs: Sequence[Sequence[int]], max_len: int) -> "SequenceBatch":
        tokens = np.full((len(seqs), max_len), PAD, dtype=np.int64)
        lengths = np.zeros(len(seqs), dtype=np.int64)
        for i, seq in enumerate(seqs):
            seq = list(seq)
            if EOS in seq:
                seq = seq[:seq.index(EOS)]
            seq = seq[:max_len]
            tokens[i, :len(seq)] = seq
            lengths[i] = len(seq)
        return cls(tokens, lengths)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]

    def content_mask(self) -> np.ndarray:
        return np.arange(self.max_len)[None, :] < self.lengths[:, None]

    def target_mask(self) -> np.ndarray:
        """Content positions plus the terminating eos position when it fits."""
        return np.arange(self.max_len)[None, :] <= self.lengths[:, None]

    def targets(self) -> np.ndarray:
        out = self.tokens.copy()
        rows = np.nonzero(self.lengths < self.max_len)[0]
        out[rows, self.lengths[rows]] = EOS
        return out

    def inputs(self) -> np.ndarray:
        """Begin-of-sequence followed by the sentence shifted right by one."""
        out = np.empty_like(self.tokens)
        out[:, 0] = BOS
        out[:, 1:] = self.tokens[:, :-1]
        return out

    def subset(self, index) -> "SequenceBatch":
        return SequenceBatch(self.tokens[index], self.lengths[index])

    def to_lists(self) -> list[list[int]]:
        return [row[:n].tolist() for row, n in zip(self.tokens, self.lengths)]

    def validate(self, vocab_size: int) -> None:
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise IndexError(f"token id out of range [0, {vocab_size})")
        if (self.tokens[~self.content_mask()] != PAD).any():
            raise ContractError("positions beyond a sentence's length must be pad")

    @staticmethod
    def concat(batches: Sequence["SequenceBatch"]) -> "SequenceBatch":
        return SequenceBatch(np.concatenate([b.tokens for b in batches]),
                             np.concatenate([b.lengths for b in batches]))


def encode_corpus(vocab: Vocabulary, sentences: Iterable[Sequence[str]], max_len: int) -> SequenceBatch:
    batch = SequenceBatch.from_lists([vocab.encode(s, max_len) for s in sentences], max_len)
    batch.validate(vocab.size)
    return batch


def batch_iter(data: SequenceBatch, batch_size: int, rng: np.random.Generator) -> Iterator[SequenceBatch]:
    """One shuffled pass over ``data``; the final partial batch is kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(data.size)
    for start in range(0, data.size, batch_size):
        yield data.subset(order[start:start + batch_size])


class BatchStream:
    """Endless reshuffled epochs over ``data``, seeded by the caller's generator.

    The epoch order and cursor are plain state so a checkpoint can restore them.
    """

    def __init__(self, data: SequenceBatch, batch_size: int, rng: np.random.Generator):
        self.data = data
        self.batch_size = batch_size
        self.rng = rng
        self.order: np.ndarray | None = None
        self.pos = 0

    def next(self) -> SequenceBatch:
        if self.order is None or self.pos >= self.data.size:
            self.order = self.rng.permutation(self.data.size)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return self.data.subset(idx)

    def state(self) -> dict:
        return {"order": None if self.order is None else self.order.tolist(), "pos": self.pos,
                "rng": self.rng.bit_generator.state}

    def load_state(self, state: dict) -> None:
        self.order = None if state["order"] is None else np.asarray(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])
        self.rng.bit_generator.state = state["rng"]


# ---------------------------------------------------------------------------
# synthetic oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleSpec:
    seed: int = 0
    vocab_size: int = 5000
    seq_len: int = 20
    hidden: int = 32


class Oracle:
    """Fixed LSTM language model with i.i.d. standard-normal parameters.

    Reserved ids are masked out of its distribution, so every sample has
    exactly ``seq_len`` content tokens and never emits end-of-sequence.
    """

    def __init__(self, spec: OracleSpec):
        if spec.vocab_size <= N_RESERVED + 1:
            raise ContractError("oracle vocabulary needs at least two non-reserved ids")
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        self.embedding = Embedding(spec.vocab_size, spec.hidden, rng)
        self.lstm = LSTM(spec.hidden, spec.hidden, rng)
        self.out = Linear(spec.hidden, spec.vocab_size, rng)
        for module in (self.embedding, self.lstm, self.out):
            for p in module.parameters().values():
                p.data = rng.standard_normal(p.shape).astype(DTYPE)
        self._allowed = np.arange(spec.vocab_size) >= N_RESERVED

    def _step(self, ids: np.ndarray, state):
        h, c = lstm_step(self.embedding(ids), state, self.lstm)
        logits = np.where(self._allowed, self.out(h).data, -np.inf)
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return logp, (h, c)

    def generate(self, n: int) -> SequenceBatch:
        if n < 1:
            raise ContractError("oracle_generate needs n >= 1")
        rng = np.random.default_rng([self.spec.seed, 1, n])
        L = self.spec.seq_len
        tokens = np.zeros((n, L), dtype=np.int64)
        prev = np.full(n, BOS, dtype=np.int64)
        with T.no_grad():
            state = self.lstm.initial_state(n)
            for t in range(L):
                logp, state = self._step(prev, state)
                prev = T.multinomial_sample(np.exp(logp), rng)
                tokens[:, t] = prev
        return SequenceBatch(tokens, np.full(n, L, dtype=np.int64))

    def log_prob(self, batch: SequenceBatch) -> np.ndarray:
        """Per-token log-probabilities of content tokens (zero elsewhere)."""
        n, L = batch.tokens.shape
        out = np.zeros((n, L), dtype=np.float64)
        inputs = batch.inputs()
        mask = batch.content_mask()
        with T.no_grad():
            state = self.lstm.initial_state(n)
            for t in range(L):
                logp, state = self._step(inputs[:, t], state)
                out[:, t] = np.where(mask[:, t], logp[np.arange(n), batch.tokens[:, t]], 0.0)
        return out

    def nll(self, batch: SequenceBatch) -> float:
        return float(-self.log_prob(batch).sum(axis=1).mean())


def oracle_generate(spec: OracleSpec, n: int) -> SequenceBatch:
    return Oracle(spec).generate(n)


def random_sequences(n: int, length: int, vocab_size: int, rng: np.random.Generator) -> SequenceBatch:
    """Uniform non-reserved token sequences of a fixed length."""
    tokens = rng.integers(N_RESERVED, vocab_size, size=(n, length))
    return SequenceBatch(tokens, np.full(n, length))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def load_embeddings(path: str | Path, vocab: Vocabulary, dim: int,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, float]:
    """Read a word2vec-style text file into a ``[V, dim]`` matrix.

    Returns the matrix and the fraction of non-reserved vocabulary words the
    file covered. Rows the file does not provide are drawn from N(0, 0.1^2).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    matrix = rng.normal(0.0, 0.1, size=(vocab.size, dim)).astype(DTYPE)
    covered = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
                continue
            token, values = fields[0], fields[1:]
            if len(values) != dim:
                raise FormatError(f"expected {dim} values for '{token}', got {len(values)}", lineno)
            try:
                vec = np.array([float(v) for v in values], dtype=DTYPE)
            except ValueError as exc:
                raise FormatError(f"non-numeric value for '{token}': {exc}", lineno) from None
            idx = vocab.stoi.get(token)
            if idx is None or idx < N_RESERVED or idx in covered:
                continue
            matrix[idx] = vec
            covered.add(idx)
    denom = vocab.size - N_RESERVED
    return Tensor(matrix), (len(covered) / denom if denom else 0.0)


def write_embeddings(path: str | Path, words: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(words)} {matrix.shape[1]}\n")
        for word, row in zip(words, matrix):
            fh.write(word + " " + " ".join(f"{v:.6f}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# desk-scale caption corpus
# ---------------------------------------------------------------------------

_ADJ = ["young", "old", "little", "small", "large", "white", "black", "red", "brown", "green",
        "blue", "wooden", "busy", "empty", "tall"]
_AGENTS = ["man", "woman", "boy", "girl", "dog", "cat", "person", "child", "skier", "surfer",
           "player", "horse", "baby", "couple", "bird"]
_THINGS = ["bike", "bench", "chair", "couch", "bed", "train", "car", "bus", "tree", "umbrella",
           "kite", "phone", "sandwich", "pizza", "banana", "cake", "laptop", "clock", "plate",
           "ball", "table", "window", "boat", "street", "road", "field", "beach", "building"]
_VERBS = ["riding", "holding", "eating", "watching", "near", "carrying", "pushing", "beside",
          "under", "behind", "on"]
_PLACES = ["in", "at", "near", "on", "by", "inside", "outside", "across"]
_DETS = ["a", "the", "two", "some"]
_LINKS = ["with", "and", "while"]


def _phrase(rng, nouns) -> str:
    det = _DETS[rng.integers(len(_DETS))]
    noun = nouns[rng.integers(len(nouns))]
    if rng.random() < 0.6:
        return f"{det} {_ADJ[rng.integers(len(_ADJ))]} {noun}"
    return f"{det} {noun}"


def synthetic_captions(n: int, seed: int) -> list[str]:
    """Caption-style sentences from a small templated grammar (desk-scale stand-in corpus).

    About 100 word types combined freely, so that sampled sets of sentences
    share n-grams at roughly the rate real image captions do.
    """
    rng = np.random.default_rng([seed, 7])
    out = []
    for _ in range(n):
        words = [_phrase(rng, _AGENTS), _VERBS[rng.integers(len(_VERBS))], _phrase(rng, _THINGS)]
        if rng.random() < 0.6:
            words += [_PLACES[rng.integers(len(_PLACES))], _phrase(rng, _THINGS)]
        if rng.random() < 0.3:
            words += [_LINKS[rng.integers(len(_LINKS))], _phrase(rng, _AGENTS + _THINGS)]
        out.append(" ".join(words))
    return out


def random_embedding_file(path: str | Path, vocab: Vocabulary, dim: int, seed: int) -> None:
    """Tiny stand-in embedding file in the loader's text format."""
    rng = np.random.default_rng([seed, 11])
    write_embeddings(path, vocab.words, rng.normal(0.0, 1.0 / math.sqrt(dim), size=(len(vocab.words), dim)))
