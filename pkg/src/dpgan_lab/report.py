"""Static reports from a run directory: metric charts (SVG) and decoded sample tables."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .config import RunConfig
from .errors import ContractError
from .generators import Variant
from .metrics import CSV_HEADER
from .runner import EMPTY, PHASES, shuffled_pick

METRICS = CSV_HEADER[2:]
SAMPLES_PER_PHASE = 10

# fixed element ids and no timestamp keep SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "dpgan-lab"
_SVG_META = {"Date": None}


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.is_file():
        raise ContractError(f"no metrics file in {run_dir}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def _run_seed(run_dir: Path) -> int:
    try:
        return RunConfig.load(run_dir / "config.ini").seed
    except Exception:
        return 0


def _series(rows: list[dict], metric: str) -> tuple[list[int], list[float], int]:
    """Pretraining and adversarial rows on one axis; returns the phase boundary too."""
    pre = [int(r["iteration"]) for r in rows if r["phase"] == "pretrain"]
    offset = max(pre) if pre else 0
    xs, ys = [], []
    for r in rows:
        x = int(r["iteration"]) + (offset if r["phase"] == "adversarial" else 0)
        xs.append(x)
        ys.append(float(r[metric]))
    return xs, ys, offset


def _chart(path: Path, title: str, lines: list[tuple[str, list[int], list[float]]], boundary: int | None) -> None:
    fig = Figure(figsize=(6, 3.6))
    ax = fig.add_subplot()
    for label, xs, ys in lines:
        ax.plot(xs, ys, marker="o", markersize=3, label=label)
        if all(math.isnan(y) for y in ys):
            ax.text(0.5, 0.5, "all values undefined (nan)", transform=ax.transAxes, ha="center")
    if boundary:
        ax.axvline(boundary, color="grey", linestyle="--", linewidth=1)
    ax.set_xlabel("iteration (pretraining, then adversarial)")
    ax.set_title(title, fontsize=10)
    if len(lines) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)


def _sample_block(run_dir: Path, seed: int) -> list[str]:
    out = []
    for phase in PHASES:
        files = sorted((run_dir / "samples").glob(f"{phase}-*.txt"))
        if not files:
            continue
        latest = files[-1]
        lines = latest.read_text(encoding="utf-8").splitlines()
        picked = shuffled_pick([line or EMPTY for line in lines], SAMPLES_PER_PHASE, seed)
        out.append(f"[{phase}, iteration {int(latest.stem.split('-')[1])}]")
        out.extend(f"{i + 1:2d}. {s}" for i, s in enumerate(picked))
        out.append("")
    return out


def emit_report(run_dir: str | Path) -> Path:
    """Write ``report/`` with one SVG per metric plus ``samples.txt``; returns the report directory."""
    run_dir = Path(run_dir)
    rows = read_metrics(run_dir)
    seed = _run_seed(run_dir)
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    for metric in METRICS:
        xs, ys, boundary = _series(rows, metric)
        _chart(out / f"{metric}.svg", f"{metric} (seed {seed})", [(metric, xs, ys)], boundary)
    lines = [f"# decoded samples, seed {seed}"] + _sample_block(run_dir, seed)
    (out / "samples.txt").write_text("\n".join(lines), encoding="utf-8")
    return out


def _label(name: str) -> str:
    v = Variant(name)
    return f"{v.label} ({v.value})"


def paired_curves(runs: dict[str, Path], out_dir: str | Path, seed: int) -> Path:
    """One SVG per metric with every run of an experiment overlaid."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {name: read_metrics(path) for name, path in runs.items()}
    for metric in METRICS:
        lines, boundary = [], None
        for name, rows in tables.items():
            xs, ys, boundary = _series(rows, metric)
            lines.append((_label(name), xs, ys))
        _chart(out_dir / f"{metric}.svg", f"{metric} (seed {seed})", lines, boundary)
    return out_dir


def sample_tables(runs: dict[str, Path], path: str | Path, seed: int) -> Path:
    lines = [f"# decoded samples, seed {seed}"]
    for name, run_dir in runs.items():
        lines.append(f"== {_label(name)} ==")
        lines.extend(_sample_block(Path(run_dir), seed))
    Path(path).write_text("\n".join(lines), encoding="utf-8")
    return Path(path)
