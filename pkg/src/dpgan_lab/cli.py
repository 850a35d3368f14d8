"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Oracle, OracleSpec, Vocabulary, encode_corpus, read_corpus
from .errors import ConfigError, ContractError, FormatError, NonFiniteError, TrainingAborted
from .metrics import BleuScorer, evaluate_generator
from .report import emit_report
from .runner import EMPTY, generator_from_checkpoint, run_adversarial, run_experiment, run_pretrain

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _print_record(rec) -> None:
    vals = " ".join(f"{k}={v:.4f}" for k, v in rec.values().items())
    print(f"{rec.phase} iter={rec.iteration} {vals}{' COLLAPSE' if rec.flagged else ''}", flush=True)


def cmd_pretrain(args) -> int:
    cfg = RunConfig.load(args.config)
    for rec in run_pretrain(cfg, resume=args.resume):
        _print_record(rec)
    return EXIT_OK


def cmd_adversarial(args) -> int:
    cfg = RunConfig.load(args.config)
    if not Path(args.from_ckpt).is_file():
        raise ConfigError(f"checkpoint not found: {args.from_ckpt}")
    for rec in run_adversarial(cfg, args.from_ckpt):
        _print_record(rec)
    return EXIT_OK


def cmd_experiment(args) -> int:
    out = args.out or f"runs/exp{args.id}-{args.scale}-seed{args.seed}"
    result = run_experiment(args.id, args.scale, out, seed=args.seed, corpus=args.corpus,
                            embeddings=args.embeddings)
    for name, recs in result.records.items():
        print(f"== {name} ==")
        for rec in recs:
            _print_record(rec)
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def _load_text(path: str, vocab: Vocabulary, max_len: int):
    if not Path(path).is_file():
        raise ConfigError(f"data file not found: {path}")
    sents = [s for s in read_corpus(path) if s]
    if not sents:
        raise ConfigError(f"data file {path} has no sentences")
    return encode_corpus(vocab, sents, max_len)


def _require_ckpt(path: str) -> None:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")


def cmd_evaluate(args) -> int:
    _require_ckpt(args.ckpt)
    g, vocab, manifest = generator_from_checkpoint(args.ckpt)
    data = _load_text(args.data, vocab, g.dims.max_len)
    rng = np.random.default_rng(args.seed)
    rec, _ = evaluate_generator(g, data, BleuScorer(data.to_lists(), 5), args.n_samples, rng,
                                manifest["phase"], manifest["iteration"])
    print(json.dumps({"seed": args.seed, "checkpoint_seed": manifest["seed"], **rec.values(),
                      "flagged": rec.flagged}, indent=2, default=str))
    return EXIT_OK


def cmd_sample(args) -> int:
    _require_ckpt(args.ckpt)
    g, vocab, _ = generator_from_checkpoint(args.ckpt)
    out = g.sample(args.n, np.random.default_rng(args.seed), greedy=args.greedy)
    for row in out.tokens.to_lists():
        print(vocab.decode(row) or EMPTY)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    spec = OracleSpec(seed=args.seed, vocab_size=args.vocab, seq_len=args.seq_len)
    batch = Oracle(spec).generate(args.n)
    vocab = Vocabulary.synthetic(args.vocab)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", encoding="utf-8") as fh:
        for row in batch.to_lists():
            fh.write(vocab.decode(row) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    print(emit_report(args.run))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpgan-lab", description="Text GAN lab: LSTM vs Transformer generators.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="MLE pretraining from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="pretraining checkpoint to continue from")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adversarial", help="adversarial training from a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--from", dest="from_ckpt", required=True)
    s.set_defaults(func=cmd_adversarial)

    s = sub.add_parser("experiment", help="canned experiment: Transformer variant plus LSTM baseline")
    s.add_argument("--id", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--scale", choices=("desk", "paper"), required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corpus", help="caption corpus, one sentence per line (experiments 2 and 3)")
    s.add_argument("--embeddings", help="word-vector text file (experiment 2)")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("evaluate", help="metrics of a checkpoint against a text file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--n-samples", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sample", help="decode samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("-n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--greedy", action="store_true", help="argmax instead of sampling (diagnostic)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("synth-data", help="write an oracle corpus, one sentence of ids per line")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--vocab", type=int, required=True)
    s.add_argument("-n", type=int, required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seq-len", type=int, default=20)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("report", help="regenerate charts and sample tables for a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
