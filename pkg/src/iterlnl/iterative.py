"""Alternate noisy labeling and LNL, resealing each trained model as the next black box."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .blackbox import BlackBoxHandle, wrap_as_blackbox
from .datagen import DatasetSplit
from .errors import ConfigError, DataError
from .lnl import LnlConfig, RunMetrics, empirical_noise_rate, run_lnl
from .model import ClassifierModel, predict_labels, save_checkpoint

log = logging.getLogger(__name__)

REINIT_POLICIES = ("random", "warm")


@dataclass
class IterConfig:
    steps: int = 5
    lnl: LnlConfig = field(default_factory=LnlConfig)
    reinit: str = "random"
    tolerance: float = 0.01
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ConfigError(f"need at least one iterative step, got {self.steps}")
        if self.reinit not in REINIT_POLICIES:
            raise ConfigError(f"reinit must be one of {REINIT_POLICIES}, got {self.reinit!r}")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")
        self.lnl.validate()

    def step_seed(self, m: int) -> int:
        return self.seed ^ m


@dataclass
class StepRecord:
    m: int
    epsilon_est: float
    label_acc: Optional[float] = None
    model_acc: Optional[float] = None
    checkpoint: Optional[str] = None
    metrics: Optional[RunMetrics] = field(default=None, repr=False, compare=False)


TRACE_COLUMNS = ["m", "epsilon_est", "label_acc", "model_acc", "checkpoint"]


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_trace(records, path, provenance: str = ""):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.m, _fmt(r.epsilon_est), _fmt(r.label_acc), _fmt(r.model_acc),
                        r.checkpoint or ""])


def read_trace(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        num = lambda s: float(s) if s else None  # noqa: E731
        return [StepRecord(int(r["m"]), float(r["epsilon_est"]), num(r["label_acc"]),
                           num(r["model_acc"]), r["checkpoint"] or None) for r in rows]


def run_iterlnl(source_handle: BlackBoxHandle, target: DatasetSplit, config: IterConfig,
                run_dir: Union[str, Path, None] = None, provenance: str = ""):
    """Run the iterative loop; returns ``(final model, list of StepRecord)``.

    Step 1 labels come from ``source_handle``; step ``m > 1`` labels come from
    the step ``m - 1`` model sealed with :func:`wrap_as_blackbox`. After each
    step, the loop stops if the estimated noise rate moved by less than
    ``config.tolerance``. When ``run_dir`` is given, each step writes
    ``step_<m>/model.ckpt``, ``labels.csv`` and ``lnl_metrics.csv`` there.
    Accuracies are filled in only when the target carries evaluation labels.
    """
    config.validate()
    truth = target.evaluation_labels() if target.has_evaluation_labels else None
    run_dir = Path(run_dir) if run_dir is not None else None

    handle = source_handle
    model: Optional[ClassifierModel] = None
    records = []
    for m in range(1, config.steps + 1):
        init = model if (config.reinit == "warm" and model is not None) else None
        model, metrics = run_lnl(handle, target, config.lnl, seed=config.step_seed(m), init_model=init)
        record = StepRecord(m, metrics.epsilon, metrics=metrics)
        if truth is not None:
            record.label_acc = 1.0 - empirical_noise_rate(metrics.labeling, truth)
            record.model_acc = float(np.mean(predict_labels(model.forward(target.features)) == truth))
        if run_dir is not None:
            step_dir = run_dir / f"step_{m}"
            step_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, step_dir / "model.ckpt")
            metrics.labeling.to_csv(step_dir / "labels.csv", provenance)
            metrics.to_csv(step_dir / "lnl_metrics.csv", provenance)
            record.checkpoint = f"step_{m}/model.ckpt"
        records.append(record)
        log.info("step %d: eps_est=%.4f label_acc=%s model_acc=%s", m, record.epsilon_est,
                 record.label_acc, record.model_acc)

        if m > 1 and abs(records[-1].epsilon_est - records[-2].epsilon_est) < config.tolerance:
            log.info("noise-rate estimate settled after step %d", m)
            break
        handle = wrap_as_blackbox(model)
    return model, records


@dataclass
class Evaluation:
    accuracy: float
    per_class: np.ndarray
    transition: np.ndarray
    support: np.ndarray


def evaluate(predictor: Union[ClassifierModel, BlackBoxHandle], split: DatasetSplit) -> Evaluation:
    """Overall accuracy, per-class accuracy and the row-stochastic transition matrix.

    Entry ``(r, c)`` of the matrix is the share of true-class-``r`` samples
    predicted as ``c``. Classes with no samples get a NaN row and NaN accuracy.
    """
    if not split.has_evaluation_labels:
        raise DataError("evaluation needs a labeled split")
    truth = split.evaluation_labels()
    if isinstance(predictor, ClassifierModel):
        probs = predictor.forward(split.features)
    else:
        probs = predictor.predict_batch(split.features)
    pred = predict_labels(probs)
    return evaluate_labels(pred, truth, split.k)


def evaluate_labels(pred, truth, k: int) -> Evaluation:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    counts = np.zeros((k, k))
    np.add.at(counts, (truth, pred), 1.0)
    support = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        transition = counts / support[:, None]
    transition[support == 0] = np.nan
    return Evaluation(float(np.mean(pred == truth)), np.diag(transition).copy(), transition, support)
