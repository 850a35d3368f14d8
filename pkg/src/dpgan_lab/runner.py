"""Pretraining and adversarial loops, checkpoint plumbing, and the canned experiments.

A run directory holds::

    config.ini            resolved configuration (seed included)
    metrics.csv           one row per evaluation, both phases
    collapse.jsonl        collapse probes for the same evaluations
    samples/<phase>-<iteration>.txt
    checkpoints/*.ckpt
"""
from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .adversary import (Discriminator, EMABaseline, compute_rewards, policy_gradient_loss,
                        train_discriminator_step)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (BatchStream, Oracle, OracleSpec, SequenceBatch, Vocabulary, build_vocab, encode_corpus,
                   load_embeddings, random_embedding_file, read_corpus, synthetic_captions)
from .errors import ConfigError, ContractError, NonFiniteError, TrainingAborted
from .generators import Generator, Variant
from .metrics import CSV_HEADER, BleuScorer, MetricsRecord, evaluate_generator
from .optim import Adam

PHASES = ("pretrain", "adversarial")
EMPTY = "<empty>"


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    vocab: Vocabulary
    train: SequenceBatch
    held_out: SequenceBatch
    embedding: np.ndarray | None = None
    coverage: float | None = None

    def bleu_scorer(self, n_refs: int) -> BleuScorer:
        return BleuScorer(self.held_out.subset(slice(0, n_refs)).to_lists(), max_n=5)


def prepare_data(cfg: RunConfig) -> Dataset:
    """Build vocabulary and train/held-out splits; deterministic in ``cfg.data_seed``."""
    if cfg.source == "oracle":
        vocab = Vocabulary.synthetic(cfg.vocab_size)
        oracle = Oracle(OracleSpec(cfg.data_seed, cfg.vocab_size, cfg.max_len))
        corpus = oracle.generate(cfg.n_train + cfg.n_heldout)
        held_out = corpus.subset(slice(0, cfg.n_heldout))
        train = corpus.subset(slice(cfg.n_heldout, None))
    else:
        path = Path(cfg.corpus_path)
        if not path.is_file():
            raise ConfigError(f"corpus file not found: {path}")
        sentences = [s for s in read_corpus(path) if s]
        if len(sentences) <= cfg.n_heldout:
            raise ConfigError(f"corpus has {len(sentences)} sentences; need more than n_heldout={cfg.n_heldout}")
        order = np.random.default_rng([cfg.data_seed, 21]).permutation(len(sentences))[:cfg.max_sentences]
        picked = [sentences[i] for i in order]
        held_sents = picked[:cfg.n_heldout]
        train_sents = picked[cfg.n_heldout:cfg.n_heldout + cfg.n_train]
        vocab = build_vocab(train_sents, max_size=cfg.vocab_size)
        train = encode_corpus(vocab, train_sents, cfg.max_len)
        held_out = encode_corpus(vocab, held_sents, cfg.max_len)
    embedding = coverage = None
    if cfg.embedding_path:
        path = Path(cfg.embedding_path)
        if not path.is_file():
            raise ConfigError(f"embedding file not found: {path}")
        matrix, coverage = load_embeddings(path, vocab, cfg.d_model, np.random.default_rng([cfg.seed, 12]))
        embedding = matrix.data
    return Dataset(vocab, train, held_out, embedding, coverage)


def build_generator(cfg: RunConfig, data: Dataset) -> Generator:
    return Generator(cfg.variant, cfg.dims(data.vocab.size), np.random.default_rng([cfg.seed, 1]),
                     dropout=cfg.dropout, n_reference_sources=cfg.n_reference_sources, embedding=data.embedding)


def eval_rng(seed: int, phase: str, iteration: int) -> np.random.Generator:
    """Evaluation draws depend only on (seed, phase, iteration), never on training history."""
    return np.random.default_rng([seed, 100, PHASES.index(phase), iteration])


# ---------------------------------------------------------------------------
# run directory bookkeeping
# ---------------------------------------------------------------------------

def _nullable(v: float):
    return None if isinstance(v, float) and math.isnan(v) else v


class RunLog:
    """Incremental writer for metrics.csv and collapse.jsonl.

    ``keep`` trims both files to the rows that satisfy it (used on resume so
    the metric stream carries on exactly where the checkpoint left it).
    """

    def __init__(self, run_dir: Path, keep=None):
        self.csv_path = run_dir / "metrics.csv"
        self.collapse_path = run_dir / "collapse.jsonl"
        rows = []
        if keep is not None and self.csv_path.exists():
            with open(self.csv_path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if keep(r["phase"], int(r["iteration"]))]
        records = [MetricsRecord.from_row(r) for r in rows]
        with open(self.csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for rec in records:
                w.writerow(rec.csv_row())
        kept_flags = {}
        if keep is not None and self.collapse_path.exists():
            for line in self.collapse_path.read_text().splitlines():
                entry = json.loads(line)
                kept_flags[(entry["phase"], entry["iteration"])] = line
        with open(self.collapse_path, "w") as fh:
            for rec in records:
                line = kept_flags.get((rec.phase, rec.iteration))
                fh.write((line or self._collapse_line(rec)) + "\n")

    @staticmethod
    def _collapse_line(rec: MetricsRecord) -> str:
        return json.dumps({"phase": rec.phase, "iteration": rec.iteration,
                           "self_bleu_2": _nullable(rec.self_bleu.get(2, math.nan)),
                           "empty_fraction": rec.empty_fraction, "distinct_1": rec.distinct_1,
                           "distinct_2": rec.distinct_2, "flagged": rec.flagged}, sort_keys=True)

    def append(self, rec: MetricsRecord) -> None:
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.csv_row())
        with open(self.collapse_path, "a") as fh:
            fh.write(self._collapse_line(rec) + "\n")


def write_samples(run_dir: Path, phase: str, iteration: int, vocab: Vocabulary, samples) -> Path:
    out = run_dir / "samples" / f"{phase}-{iteration:04d}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [vocab.decode(s) or EMPTY for s in samples.tokens.to_lists()]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def _should_eval(it: int, total: int, every: int) -> bool:
    return it == 1 or it % every == 0 or it == total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in arrays.items()}


def _strip(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def generator_arrays(g: Generator) -> dict[str, np.ndarray]:
    out = _prefixed("gen", {k: p.data for k, p in g.parameters().items()})
    out.update(_prefixed("gen_buf", g.buffers()))
    return out


def restore_generator(g: Generator, arrays: dict[str, np.ndarray]) -> None:
    g.load_parameters(_strip("gen", arrays))
    g.load_buffers(_strip("gen_buf", arrays))


def _manifest(cfg: RunConfig, data: Dataset, phase: str, iteration: int, state: dict) -> dict:
    return {"phase": phase, "iteration": iteration, "seed": cfg.seed, "variant": cfg.variant,
            "config": cfg.to_dict(), "dims": cfg.dims(data.vocab.size).to_dict(),
            "vocab": data.vocab.words, "state": state}


def generator_from_checkpoint(path: str | Path) -> tuple[Generator, Vocabulary, dict]:
    """Rebuild a generator (in eval mode) and its vocabulary from any checkpoint."""
    manifest, arrays = load_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocab"])
    g = Generator(cfg.variant, cfg.dims(vocab.size), np.random.default_rng(0), dropout=cfg.dropout,
                  n_reference_sources=cfg.n_reference_sources)
    restore_generator(g, arrays)
    g.eval()
    return g, vocab, manifest


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _checkpoint_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "checkpoints"


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.ini")
    return run_dir


def run_pretrain(cfg: RunConfig, resume: str | Path | None = None) -> Iterator[MetricsRecord]:
    """Teacher-forced MLE for ``cfg.pretrain_iters`` iterations of ``batches_per_iter`` batches.

    Yields a record at iteration 0 (fresh runs only), 1, every ``eval_every``
    and the last. Writes ``checkpoints/pretrain-final.ckpt`` at the end.
    """
    run_dir = _prepare_run_dir(cfg)
    data = prepare_data(cfg)
    g = build_generator(cfg, data)
    opt = Adam(g.parameters(), cfg.mle_lr, warmup_steps=cfg.warmup_steps)
    stream = BatchStream(data.train, cfg.batch_size, np.random.default_rng([cfg.seed, 2]))
    step_rng = np.random.default_rng([cfg.seed, 3])
    bleu = data.bleu_scorer(cfg.n_bleu_refs)
    start = 0
    if resume is not None:
        manifest, arrays = load_checkpoint(resume)
        _check_compatible(cfg, manifest)
        if manifest["phase"] != "pretrain":
            raise ContractError("resume checkpoint is not from the pretraining phase")
        restore_generator(g, arrays)
        state = manifest["state"]
        opt.load_state(_strip("opt_g", arrays), state["opt_t"])
        stream.load_state(state["stream"])
        _set_rng(step_rng, state["step_rng"])
        start = manifest["iteration"]
        log = RunLog(run_dir, keep=lambda phase, it: phase == "pretrain" and it <= start)
    else:
        log = RunLog(run_dir)

    def save(name: str, iteration: int, **extra) -> Path:
        state = {"opt_t": opt.t, "stream": stream.state(), "step_rng": _rng_state(step_rng), **extra}
        arrays = generator_arrays(g)
        arrays.update(_prefixed("opt_g", opt.state_arrays()))
        return save_checkpoint(_checkpoint_dir(cfg) / name, _manifest(cfg, data, "pretrain", iteration, state),
                               arrays)

    def evaluate(it: int) -> MetricsRecord:
        g.eval()
        rec, samples = evaluate_generator(g, data.held_out, bleu, cfg.n_eval_samples,
                                          eval_rng(cfg.seed, "pretrain", it), "pretrain", it)
        log.append(rec)
        write_samples(run_dir, "pretrain", it, data.vocab, samples)
        return rec

    if start == 0:
        yield evaluate(0)
    for it in range(start + 1, cfg.pretrain_iters + 1):
        g.train(step_rng)
        try:
            with T.nan_guard(cfg.nan_guard):
                for _ in range(cfg.batches_per_iter):
                    loss = g.mle_loss(stream.next(), step_rng)
                    if not math.isfinite(loss.item()):
                        raise NonFiniteError("mle_loss", f"value={loss.item()}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
        except NonFiniteError as exc:
            path = save("diagnostic.ckpt", it, aborted=str(exc))
            raise TrainingAborted(exc.op, path, f"iteration {it}; diagnostic checkpoint at {path}") from exc
        if _should_eval(it, cfg.pretrain_iters, cfg.eval_every):
            yield evaluate(it)
        if it % cfg.checkpoint_every == 0:
            save(f"pretrain-{it:04d}.ckpt", it)
    save("pretrain-final.ckpt", max(start, cfg.pretrain_iters))


def _check_compatible(cfg: RunConfig, manifest: dict) -> None:
    if manifest["variant"] != cfg.variant:
        raise ContractError(f"checkpoint variant '{manifest['variant']}' does not match config '{cfg.variant}'")
    dims = cfg.dims(manifest["dims"]["vocab_size"]).to_dict()
    if dims != manifest["dims"]:
        raise ContractError(f"checkpoint dims {manifest['dims']} do not match config {dims}")


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------

def run_adversarial(cfg: RunConfig, checkpoint: str | Path) -> Iterator[MetricsRecord]:
    """Policy-gradient generator updates against an LSTM language-model discriminator.

    Each iteration runs ``batches_per_iter`` rounds of ``g_steps`` generator
    updates followed by ``d_steps`` discriminator updates.

    ``checkpoint`` is either a pretraining checkpoint (fresh adversarial phase)
    or an adversarial one (resume). Writes ``checkpoints/adversarial-final.ckpt``.
    """
    manifest, arrays = load_checkpoint(checkpoint)
    _check_compatible(cfg, manifest)
    run_dir = _prepare_run_dir(cfg)
    data = prepare_data(cfg)
    if data.vocab.words != manifest["vocab"]:
        raise ContractError("checkpoint vocabulary differs from the configured data")
    g = build_generator(cfg, data)
    restore_generator(g, arrays)
    d = Discriminator(data.vocab.size, cfg.d_model, cfg.max_len, np.random.default_rng([cfg.seed, 4]))
    opt_g = Adam(g.parameters(), cfg.lr_adv_g, warmup_steps=cfg.warmup_steps)
    opt_d = Adam(d.parameters(), cfg.lr_d)
    baseline = EMABaseline(cfg.baseline_decay)
    stream = BatchStream(data.train, cfg.batch_size, np.random.default_rng([cfg.seed, 5]))
    step_rng = np.random.default_rng([cfg.seed, 6])
    bleu = data.bleu_scorer(cfg.n_bleu_refs)

    start = 0
    if manifest["phase"] == "adversarial":
        state = manifest["state"]
        d.load_parameters(_strip("disc", arrays))
        opt_g.load_state(_strip("opt_g", arrays), state["opt_g_t"])
        opt_d.load_state(_strip("opt_d", arrays), state["opt_d_t"])
        baseline.value = state["baseline"]
        stream.load_state(state["stream"])
        _set_rng(step_rng, state["step_rng"])
        start = manifest["iteration"]
        log = RunLog(run_dir, keep=lambda phase, it: phase == "pretrain" or it <= start)
    else:
        log = RunLog(run_dir, keep=lambda phase, it: phase == "pretrain")

    def save(name: str, iteration: int, **extra) -> Path:
        state = {"opt_g_t": opt_g.t, "opt_d_t": opt_d.t, "baseline": baseline.value,
                 "stream": stream.state(), "step_rng": _rng_state(step_rng), **extra}
        out = generator_arrays(g)
        out.update(_prefixed("disc", {k: p.data for k, p in d.parameters().items()}))
        out.update(_prefixed("opt_g", opt_g.state_arrays()))
        out.update(_prefixed("opt_d", opt_d.state_arrays()))
        return save_checkpoint(_checkpoint_dir(cfg) / name, _manifest(cfg, data, "adversarial", iteration, state),
                               out)

    def evaluate(it: int) -> MetricsRecord:
        g.eval()
        rec, samples = evaluate_generator(g, data.held_out, bleu, cfg.n_eval_samples,
                                          eval_rng(cfg.seed, "adversarial", it), "adversarial", it)
        log.append(rec)
        write_samples(run_dir, "adversarial", it, data.vocab, samples)
        return rec

    def d_steps(n: int) -> None:
        # one fresh fake batch per round, paired with a new real batch each step
        fake = g.sample(cfg.batch_size, step_rng).tokens
        for _ in range(n):
            train_discriminator_step(d, stream.next(), fake, opt_d, cfg.reward_floor)

    try:
        with T.nan_guard(cfg.nan_guard):
            if start == 0:
                d.train()
                if cfg.d_pretrain_steps:
                    d_steps(cfg.d_pretrain_steps)
    except NonFiniteError as exc:
        path = save("diagnostic.ckpt", 0, aborted=str(exc))
        raise TrainingAborted(exc.op, path, f"discriminator warm-up; diagnostic checkpoint at {path}") from exc
    if start == 0:
        yield evaluate(0)
    for it in range(start + 1, cfg.adv_iters + 1):
        g.train(step_rng)
        d.train()
        try:
            with T.nan_guard(cfg.nan_guard):
                for _ in range(cfg.batches_per_iter):
                    for _ in range(cfg.g_steps):
                        samples = g.sample(cfg.batch_size, step_rng)
                        rewards = compute_rewards(d, samples, cfg.reward_mix, baseline, cfg.reward_floor,
                                                  cfg.reward_normalize)
                        loss = policy_gradient_loss(g.rescore(samples), rewards)
                        opt_g.zero_grad()
                        if loss.requires_grad:
                            loss.backward()
                            opt_g.step()
                    if cfg.d_steps:
                        d_steps(cfg.d_steps)
        except NonFiniteError as exc:
            path = save("diagnostic.ckpt", it, aborted=str(exc))
            raise TrainingAborted(exc.op, path, f"iteration {it}; diagnostic checkpoint at {path}") from exc
        if _should_eval(it, cfg.adv_iters, cfg.eval_every):
            yield evaluate(it)
        if it % cfg.checkpoint_every == 0:
            save(f"adversarial-{it:04d}.ckpt", it)
    save("adversarial-final.ckpt", max(start, cfg.adv_iters))


def final_checkpoint(cfg: RunConfig, phase: str) -> Path:
    return _checkpoint_dir(cfg) / f"{phase}-final.ckpt"


def run_full(cfg: RunConfig) -> list[MetricsRecord]:
    """Both phases back to back."""
    records = list(run_pretrain(cfg))
    records += list(run_adversarial(cfg, final_checkpoint(cfg, "pretrain")))
    return records


# ---------------------------------------------------------------------------
# canned experiments
# ---------------------------------------------------------------------------

EXPERIMENT_VARIANTS = {1: Variant.ENCODER_ONLY, 2: Variant.ENC_DEC_EMPTY, 3: Variant.ENC_DEC_SHIFTED}
SCALES = ("desk", "paper")
DESK_CAPTIONS = 3000


def experiment_config(exp_id: int, scale: str, out_dir: str | Path, seed: int = 0,
                      corpus: str | Path | None = None, embeddings: str | Path | None = None) -> RunConfig:
    """Base config (Transformer variant) for one experiment; the LSTM twin differs only in variant/lr."""
    if exp_id not in EXPERIMENT_VARIANTS:
        raise ConfigError(f"experiment id must be 1, 2 or 3, got {exp_id}")
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got '{scale}'")
    out_dir = Path(out_dir)
    desk = scale == "desk"
    base = dict(variant=EXPERIMENT_VARIANTS[exp_id].value, seed=seed, output_dir=str(out_dir),
                pretrain_iters=50 if desk else 120, adv_iters=50 if desk else 120,
                vocab_size=100 if desk else 5000)
    if desk:
        base.update(n_train=2000, n_heldout=500, n_eval_samples=128, n_bleu_refs=500, batches_per_iter=8)
    else:
        base.update(n_train=10000, n_heldout=2000, n_eval_samples=500, n_bleu_refs=2000, batches_per_iter=16)
    if exp_id == 1:
        return RunConfig(source="oracle", **base)

    data_dir = out_dir / "data"
    if corpus is None:
        if not desk:
            raise ConfigError("paper scale needs a caption corpus (--corpus)")
        data_dir.mkdir(parents=True, exist_ok=True)
        corpus = data_dir / "captions.txt"
        corpus.write_text("\n".join(synthetic_captions(DESK_CAPTIONS, seed)) + "\n", encoding="utf-8")
    elif not Path(corpus).is_file():
        raise ConfigError(f"corpus file not found: {corpus}")
    base.update(source="corpus", corpus_path=str(corpus), max_sentences=10000)
    if exp_id == 2:
        if embeddings is None:
            if not desk:
                raise ConfigError("paper scale experiment 2 needs an embedding file (--embeddings)")
            embeddings = data_dir / "embeddings.txt"
            vocab = build_vocab(read_corpus(corpus), max_size=10 ** 6)
            random_embedding_file(embeddings, vocab, base.get("d_model", 32), seed)
        elif not Path(embeddings).is_file():
            raise ConfigError(f"embedding file not found: {embeddings}")
        base.update(embedding_path=str(embeddings))
    return RunConfig(**base)


@dataclass
class ExperimentResult:
    out_dir: Path
    runs: dict[str, Path]
    records: dict[str, list[MetricsRecord]]


def run_experiment(exp_id: int, scale: str, out_dir: str | Path, seed: int = 0,
                   corpus: str | Path | None = None, embeddings: str | Path | None = None,
                   **overrides) -> ExperimentResult:
    """Transformer variant and LSTM baseline under one budget, then reports and paired curves."""
    from .report import emit_report, paired_curves, sample_tables

    out_dir = Path(out_dir)
    base = experiment_config(exp_id, scale, out_dir, seed, corpus, embeddings)
    if overrides:
        base = replace(base, **overrides)
    runs, records = {}, {}
    for variant in (base.variant_tag, Variant.LSTM):
        cfg = replace(base, variant=variant.value, output_dir=str(out_dir / variant.value))
        records[variant.value] = run_full(cfg)
        runs[variant.value] = Path(cfg.output_dir)
        emit_report(cfg.output_dir)
    paired_curves(runs, out_dir / "curves", seed)
    sample_tables(runs, out_dir / "samples.txt", seed)
    return ExperimentResult(out_dir, runs, records)


def shuffled_pick(lines: list[str], k: int, seed: int) -> list[str]:
    """Deterministic pick of ``k`` lines (all of them when fewer)."""
    if len(lines) <= k:
        return list(lines)
    return random.Random(seed).sample(lines, k)
