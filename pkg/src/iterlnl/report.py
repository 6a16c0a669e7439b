"""CSV and figure emission for adaptation runs.

Every CSV starts with a ``# seed=..., config-hash=...`` comment line followed
by a header row. Figures are PNGs written next to the CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import DatasetSplit
from .errors import DataError
from .iterative import evaluate, evaluate_labels, read_trace
from .model import load_checkpoint

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-9
NON_HASHED_KEYS = {"run_dir", "name", "config", "out", "out_dir"}


def config_hash(settings: dict) -> str:
    """Stable short hash of the effective settings, ignoring output locations."""
    items = sorted((k, str(v)) for k, v in settings.items() if k not in NON_HASHED_KEYS)
    text = "\n".join(f"{k}={v}" for k, v in items)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def provenance_line(seed, settings: dict) -> str:
    return f"seed={seed}, config-hash={config_hash(settings)}"


def _open_csv(path, provenance):
    fh = open(path, "w", newline="", encoding="utf-8")
    fh.write(f"# {provenance}\n")
    return fh, csv.writer(fh)


def write_transition_csv(matrix, path, provenance: str):
    """Row-stochastic matrix; rows without support are written as empty cells."""
    matrix = np.asarray(matrix)
    for r, row in enumerate(matrix):
        if np.all(np.isnan(row)):
            continue
        if abs(row.sum() - 1.0) > ROW_SUM_TOL:
            raise DataError(f"transition row {r} sums to {row.sum()!r}")
    fh, w = _open_csv(path, provenance)
    with fh:
        w.writerow(["true_class"] + [f"label_{c}" for c in range(matrix.shape[1])])
        for r, row in enumerate(matrix):
            w.writerow([r] + ["" if np.isnan(v) else repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return np.array([[float(v) if v else np.nan for v in row[1:]] for row in rows[1:]])


def write_rows_csv(path, header, rows, provenance: str):
    fh, w = _open_csv(path, provenance)
    with fh:
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v)
                        for v in row])


def write_ablation_csv(path, results: dict, provenance: str):
    """``results`` maps variant name to an :class:`~iterlnl.iterative.Evaluation`."""
    k = len(next(iter(results.values())).per_class)
    rows = [[name, *[float(a) for a in ev.per_class], float(ev.accuracy)] for name, ev in results.items()]
    write_rows_csv(path, ["variant"] + [f"class_{c}" for c in range(k)] + ["overall"], rows, provenance)


def format_table(results: dict) -> str:
    """Plain-text per-class accuracy table in percent."""
    k = len(next(iter(results.values())).per_class)
    width = max(len(n) for n in results) + 2
    head = "variant".ljust(width) + "".join(f"{c:>7}" for c in range(k)) + "    avg"
    lines = [head]
    for name, ev in results.items():
        cells = "".join(f"{100 * a:7.1f}" for a in ev.per_class)
        lines.append(name.ljust(width) + cells + f"{100 * ev.accuracy:7.1f}")
    return "\n".join(lines)


# -- figures ---------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "font.size": 9,
        "axes.labelsize": 9,
        "axes.titlesize": 10,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "legend.fontsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    })
    return plt


def plot_transition(matrix, path, title=""):
    plt = _pyplot()
    matrix = np.asarray(matrix)
    k = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(0.45 * k + 1.8, 0.45 * k + 1.4))
    im = ax.imshow(np.nan_to_num(matrix), cmap="Blues", vmin=0.0, vmax=1.0)
    if k <= 15:
        for r in range(k):
            for c in range(k):
                v = matrix[r, c]
                if not np.isnan(v):
                    ax.text(c, r, f"{v:.2f}", ha="center", va="center", fontsize=6,
                            color="white" if v > 0.6 else "black")
    ax.set_xlabel("assigned label")
    ax.set_ylabel("true class")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(steps, series: dict, path, ylabel):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(3.6, 2.6))
    for name, values in series.items():
        pts = [(m, v) for m, v in zip(steps, values) if v is not None]
        if pts:
            ax.plot(*zip(*pts), marker="o", label=name)
    ax.set_xlabel("iterative step m")
    ax.set_ylabel(ylabel)
    ax.set_xticks(list(steps))
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- run report ------------------------------------------------------------

@dataclass
class ReportResult:
    written: list = field(default_factory=list)
    notices: list = field(default_factory=list)


def _read_labels_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


def _first_comment(path) -> Optional[str]:
    with open(path, encoding="utf-8") as fh:
        line = fh.readline()
    return line[1:].strip() if line.startswith("#") else None


def build_report(run_dir, eval_split: Optional[DatasetSplit] = None, out_dir=None,
                 figures: bool = True) -> ReportResult:
    """Emit per-step transition matrices and the noise-rate / accuracy curves.

    Transition matrices describe the noisy labels each step trained on and
    need ``eval_split`` ground truth. Without it, accuracy outputs fall back
    to values stored in the trace, or are skipped with a notice.
    """
    run_dir = Path(run_dir)
    trace_path = run_dir / "trace.csv"
    if not trace_path.exists():
        raise DataError(f"missing artifacts in {run_dir}: trace.csv")
    records = read_trace(trace_path)
    if not records:
        raise DataError(f"{trace_path} lists no steps")
    provenance = _first_comment(trace_path) or "seed=?, config-hash=?"
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    result = ReportResult()
    steps = [r.m for r in records]

    path = out / "epsilon_curve.csv"
    write_rows_csv(path, ["m", "epsilon_est"], [[r.m, r.epsilon_est] for r in records], provenance)
    result.written.append(path)

    truth = None
    if eval_split is not None:
        truth = eval_split.evaluation_labels()
        missing = [f"step_{r.m}/labels.csv" for r in records if not (run_dir / f"step_{r.m}" / "labels.csv").exists()]
        missing += [r.checkpoint for r in records if r.checkpoint and not (run_dir / r.checkpoint).exists()]
        if missing:
            raise DataError(f"missing artifacts in {run_dir}: {', '.join(missing)}")

    label_acc = [r.label_acc for r in records]
    model_acc = [r.model_acc for r in records]
    if truth is not None:
        for i, r in enumerate(records):
            labels = _read_labels_csv(run_dir / f"step_{r.m}" / "labels.csv")
            if labels.shape != truth.shape:
                raise DataError(f"step_{r.m}/labels.csv has {labels.size} rows, eval split has {truth.size}")
            ev = evaluate_labels(labels, truth, eval_split.k)
            label_acc[i] = ev.accuracy
            path = out / f"transition_step_{r.m}.csv"
            write_transition_csv(ev.transition, path, provenance)
            result.written.append(path)
            if figures:
                png = path.with_suffix(".png")
                plot_transition(ev.transition, png, f"noisy labels, step {r.m}")
                result.written.append(png)
            if r.checkpoint:
                model_acc[i] = evaluate(load_checkpoint(run_dir / r.checkpoint), eval_split).accuracy
    else:
        result.notices.append("no evaluation labels: transition matrices skipped")

    if any(v is not None for v in label_acc + model_acc):
        path = out / "accuracy_curve.csv"
        write_rows_csv(path, ["m", "label_acc", "model_acc"],
                       [[m, a, b] for m, a, b in zip(steps, label_acc, model_acc)], provenance)
        result.written.append(path)
        if figures:
            png = path.with_suffix(".png")
            plot_curves(steps, {"noisy labels": label_acc, "model F": model_acc}, png, "target accuracy")
            result.written.append(png)
    else:
        result.notices.append("no evaluation labels: accuracy curve skipped")

    if figures:
        png = out / "epsilon_curve.png"
        plot_curves(steps, {"estimated": [r.epsilon_est for r in records],
                            "1 - label acc": [None if a is None else 1.0 - a for a in label_acc]},
                    png, "noise rate")
        result.written.append(png)
    return result
