"""NLL_gen, NLL_div, BLEU-n, self-BLEU-n and mode-collapse probes.

BLEU here is sentence-level and averaged over candidates: clipped n-gram
precisions for orders 1..n with uniform weights, a brevity penalty against
the closest reference length (ties go to the shorter reference), and a zero
clipped count replaced by 0.1 before taking the log. Empty candidates are
skipped; a candidate set with nothing left scores ``nan``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import tensor as T
from .data import SequenceBatch
from .errors import ContractError

UNDEFINED = math.nan
SMOOTHING = 0.1
BLEU_ORDERS = (2, 3, 4, 5)
SELF_BLEU_ORDERS = (2, 3, 4)
CSV_HEADER = ("phase", "iteration", "nll_gen", "nll_div", "bleu2", "bleu3", "bleu4", "bleu5",
              "sbleu2", "sbleu3", "sbleu4", "distinct1", "distinct2", "empty_fraction")

Sentence = Sequence[Hashable]


# ---------------------------------------------------------------------------
# likelihood metrics
# ---------------------------------------------------------------------------

def nll_gen(g, held_out: SequenceBatch, batch_size: int = 256) -> float:
    """Mean over sentences of the summed negative log-likelihood (nats per sentence)."""
    if held_out.size == 0:
        raise ContractError("nll_gen needs a non-empty held-out set")
    total = 0.0
    with T.no_grad(), g.inference():
        for start in range(0, held_out.size, batch_size):
            part = held_out.subset(slice(start, start + batch_size))
            total += float(-g.log_prob(part).data.astype(np.float64).sum())
    return total / held_out.size


def nll_div_of(samples) -> float:
    if (samples.lengths == 0).all():
        return UNDEFINED
    return float(-samples.sentence_log_prob().mean())


def nll_div(g, n_samples: int, rng: np.random.Generator) -> float:
    """Mean sentence NLL of ``n_samples`` fresh samples under the generator itself."""
    if n_samples < 1:
        raise ContractError("nll_div needs n_samples >= 1")
    return nll_div_of(g.sample(n_samples, rng))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def ngrams(tokens: Sentence, n: int) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def _closest_length(c: int, lengths: Counter) -> int:
    return min((abs(r - c), r) for r, k in lengths.items() if k > 0)[1]


def _bleu_from_counts(cand: Sentence, cand_counts: list[Counter], clip: list, ref_len: int, n: int) -> float:
    c = len(cand)
    log_p = 0.0
    for k in range(1, n + 1):
        counts = cand_counts[k - 1]
        denom = max(1, sum(counts.values()))
        clipped = sum(min(cnt, clip[k - 1](gram)) for gram, cnt in counts.items())
        log_p += math.log((clipped if clipped > 0 else SMOOTHING) / denom) / n
    bp = 1.0 if c >= ref_len else math.exp(1.0 - ref_len / c)
    return bp * math.exp(log_p)


class BleuScorer:
    """Multi-reference BLEU with reference statistics precomputed once."""

    def __init__(self, references: Sequence[Sentence], max_n: int = 5):
        refs = [tuple(r) for r in references if len(r) > 0]
        if not refs:
            raise ContractError("BLEU needs a non-empty reference set")
        self.max_n = max_n
        self.lengths = Counter(len(r) for r in refs)
        self.max_counts: list[dict] = []
        for k in range(1, max_n + 1):
            best: dict = {}
            for r in refs:
                for gram, cnt in ngrams(r, k).items():
                    if cnt > best.get(gram, 0):
                        best[gram] = cnt
            self.max_counts.append(best)

    def sentence(self, cand: Sentence, n: int) -> float:
        if n > self.max_n:
            raise ContractError(f"scorer built for orders up to {self.max_n}")
        cand = tuple(cand)
        counts = [ngrams(cand, k) for k in range(1, n + 1)]
        clip = [lambda g, m=m: m.get(g, 0) for m in self.max_counts]
        return _bleu_from_counts(cand, counts, clip, _closest_length(len(cand), self.lengths), n)

    def corpus_mean(self, candidates: Sequence[Sentence], n: int) -> float:
        scores = [self.sentence(c, n) for c in candidates if len(c) > 0]
        return math.fsum(scores) / len(scores) if scores else UNDEFINED


def bleu_n(candidates: Sequence[Sentence], references: Sequence[Sentence], n: int) -> float:
    if n < 1:
        raise ContractError("BLEU order must be >= 1")
    return BleuScorer(references, n).corpus_mean(candidates, n)


class SelfBleuScorer:
    """BLEU of every non-empty sample against all the other non-empty samples.

    For each n-gram the two largest per-sample counts are kept, so the clip
    count "over everyone but me" is available without an O(N^2) pass.
    """

    def __init__(self, samples: Sequence[Sentence], max_n: int = 4):
        self.samples = [tuple(s) for s in samples if len(s) > 0]
        self.max_n = max_n
        self.lengths = Counter(len(s) for s in self.samples)
        self.counts = [[ngrams(s, k) for k in range(1, max_n + 1)] for s in self.samples]
        self.top: list[dict] = []
        for k in range(max_n):
            top: dict = {}
            for owner, per_sample in enumerate(self.counts):
                for gram, cnt in per_sample[k].items():
                    first, first_owner, second = top.get(gram, (0, -1, 0))
                    if cnt > first:
                        top[gram] = (cnt, owner, first)
                    elif cnt > second:
                        top[gram] = (first, first_owner, cnt)
            self.top.append(top)

    def _clip(self, k: int, owner: int):
        top = self.top[k]

        def clip(gram):
            first, first_owner, second = top[gram]
            return second if first_owner == owner else first
        return clip

    def score(self, n: int) -> float:
        if len(self.samples) < 2:
            return UNDEFINED
        scores = []
        for i, s in enumerate(self.samples):
            self.lengths[len(s)] -= 1
            ref_len = _closest_length(len(s), self.lengths)
            self.lengths[len(s)] += 1
            clips = [self._clip(k, i) for k in range(n)]
            scores.append(_bleu_from_counts(s, self.counts[i][:n], clips, ref_len, n))
        return math.fsum(scores) / len(scores)


def self_bleu_n(samples: Sequence[Sentence], n: int) -> float:
    if n < 1:
        raise ContractError("BLEU order must be >= 1")
    return SelfBleuScorer(samples, n).score(n)


# ---------------------------------------------------------------------------
# collapse probes
# ---------------------------------------------------------------------------

def distinct_n(samples: Sequence[Sentence], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across non-empty samples."""
    total = 0
    unique: set = set()
    for s in samples:
        grams = ngrams(s, n)
        total += sum(grams.values())
        unique.update(grams)
    return len(unique) / total if total else 0.0


@dataclass
class CollapseReport:
    distinct_1: float
    distinct_2: float
    empty_fraction: float
    self_bleu_2: float
    flagged: bool


EMPTY_LIMIT = 0.5
SELF_BLEU_LIMIT = 0.95


def collapse_report(samples: Sequence[Sentence], self_bleu_2: float | None = None) -> CollapseReport:
    if len(samples) == 0:
        raise ContractError("collapse_report needs at least one sample")
    empty = sum(1 for s in samples if len(s) == 0) / len(samples)
    sb2 = self_bleu_n(samples, 2) if self_bleu_2 is None else self_bleu_2
    flagged = empty > EMPTY_LIMIT or (not math.isnan(sb2) and sb2 > SELF_BLEU_LIMIT)
    return CollapseReport(distinct_n(samples, 1), distinct_n(samples, 2), empty, sb2, flagged)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    phase: str
    iteration: int
    nll_gen: float
    nll_div: float
    bleu: dict[int, float] = field(default_factory=dict)
    self_bleu: dict[int, float] = field(default_factory=dict)
    distinct_1: float = 0.0
    distinct_2: float = 0.0
    empty_fraction: float = 0.0
    flagged: bool = False

    def values(self) -> dict[str, float]:
        out = {"nll_gen": self.nll_gen, "nll_div": self.nll_div}
        out.update({f"bleu{n}": self.bleu.get(n, UNDEFINED) for n in BLEU_ORDERS})
        out.update({f"sbleu{n}": self.self_bleu.get(n, UNDEFINED) for n in SELF_BLEU_ORDERS})
        out.update(distinct1=self.distinct_1, distinct2=self.distinct_2, empty_fraction=self.empty_fraction)
        return out

    def csv_row(self) -> list[str]:
        return [self.phase, str(self.iteration)] + [format_value(v) for v in self.values().values()]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "MetricsRecord":
        f = {k: float(v) for k, v in row.items() if k not in ("phase", "iteration")}
        return cls(row["phase"], int(row["iteration"]), f["nll_gen"], f["nll_div"],
                   {n: f[f"bleu{n}"] for n in BLEU_ORDERS}, {n: f[f"sbleu{n}"] for n in SELF_BLEU_ORDERS},
                   f["distinct1"], f["distinct2"], f["empty_fraction"])


def format_value(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def evaluate_generator(g, held_out: SequenceBatch, bleu: BleuScorer, n_samples: int,
                       rng: np.random.Generator, phase: str, iteration: int):
    """One full metrics snapshot. Returns the record and the samples it was computed from."""
    samples = g.sample(n_samples, rng)
    sents = samples.tokens.to_lists()
    self_bleu = SelfBleuScorer(sents, max(SELF_BLEU_ORDERS))
    sb = {n: self_bleu.score(n) for n in SELF_BLEU_ORDERS}
    report = collapse_report(sents, self_bleu_2=sb[2])
    record = MetricsRecord(
        phase=phase,
        iteration=iteration,
        nll_gen=nll_gen(g, held_out),
        nll_div=nll_div_of(samples),
        bleu={n: bleu.corpus_mean(sents, n) for n in BLEU_ORDERS},
        self_bleu=sb,
        distinct_1=report.distinct_1,
        distinct_2=report.distinct_2,
        empty_fraction=report.empty_fraction,
        flagged=report.flagged,
    )
    return record, samples
