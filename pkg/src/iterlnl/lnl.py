"""One round of learning with noisy labels from a black box.

Labels come from the black box's argmax, the noise rate is estimated from the
share of confident predictions, and a fresh model is trained on the samples
whose loss falls under a per-class threshold read from rolling loss queues.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blackbox import BlackBoxHandle
from .datagen import DatasetSplit
from .errors import ConfigError, DataError
from .model import (BatchSampler, ClassifierModel, SgdSchedule, cross_entropy_loss,
                    predict_labels, sgd_step)

log = logging.getLogger(__name__)

# floor(R * h) is taken with this slack so that e.g. R = 0.29, h = 100 gives 29, not 28.
RANK_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class NoisyLabeling:
    probs: np.ndarray
    labels: np.ndarray
    max_conf: np.ndarray

    @classmethod
    def from_probs(cls, probs) -> "NoisyLabeling":
        p = np.array(probs, dtype=np.float64)
        labels = predict_labels(p)
        conf = p.max(axis=1) if p.shape[0] else np.zeros(0)
        for arr in (p, labels, conf):
            arr.flags.writeable = False
        return cls(p, labels, conf)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.probs, self.labels, self.max_conf):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_csv(self, path, provenance: str = ""):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            w = csv.writer(fh)
            w.writerow(["index", "label", "max_conf"])
            for i, (y, c) in enumerate(zip(self.labels, self.max_conf)):
                w.writerow([i, int(y), repr(float(c))])


def noisy_labeling(handle: BlackBoxHandle, target: DatasetSplit) -> NoisyLabeling:
    return NoisyLabeling.from_probs(handle.predict_batch(target.features))


def empirical_noise_rate(labeling: NoisyLabeling, hidden_labels) -> float:
    """Fraction of wrong provisional labels. Evaluation only."""
    if hidden_labels is None:
        raise DataError("empirical noise rate needs ground-truth labels")
    y = np.asarray(hidden_labels)
    if y.shape != labeling.labels.shape:
        raise DataError("label count mismatch")
    return float(1.0 - np.mean(labeling.labels == y))


def high_conf_proportion(labeling: NoisyLabeling, gamma: float) -> float:
    """Share of samples whose top probability is strictly above ``gamma``."""
    if labeling.n == 0:
        return 0.0
    return float(np.mean(labeling.max_conf > gamma))


def rescale(rho_prime: float, kappa: float) -> float:
    """S-shaped remap of [0, 1] onto itself; identity at ``kappa == 1``."""
    if rho_prime < 0.5:
        return 0.5 * (2.0 * rho_prime) ** (1.0 / kappa)
    return 1.0 - 0.5 * (2.0 - 2.0 * rho_prime) ** (1.0 / kappa)


@dataclass
class LnlConfig:
    gamma: float = 0.9
    kappa: float = 2.0
    h: int = 100
    nk_fraction: float = 0.5
    iterations: int = 2000
    batch_size: int = 64
    eta0: float = 0.01
    momentum: float = 0.9
    hidden: tuple = (256, 128)
    no_rescale: bool = False
    no_category_sampling: bool = False
    noise_rate_override: Optional[float] = None
    validation_set: Optional[DatasetSplit] = field(default=None, repr=False)
    max_noise_rate: float = 0.95

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.kappa <= 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.h < 1:
            raise ConfigError(f"buffer length h must be >= 1, got {self.h}")
        if not 0.0 < self.nk_fraction <= 1.0:
            raise ConfigError(f"n_k fraction must lie in (0, 1], got {self.nk_fraction}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.noise_rate_override is not None and not 0.0 <= self.noise_rate_override <= 1.0:
            raise ConfigError("noise rate override must lie in [0, 1]")
        if not 0.0 <= self.max_noise_rate < 1.0:
            raise ConfigError("max_noise_rate must lie in [0, 1)")

    @property
    def n_k(self) -> float:
        return self.nk_fraction * self.iterations


def estimate_noise_rate(labeling: NoisyLabeling, config: LnlConfig,
                        handle: Optional[BlackBoxHandle] = None) -> float:
    """Label-free noise-rate estimate, or one of the ablation substitutes.

    Precedence: explicit override, then validation accuracy (needs ``handle``
    and ``config.validation_set``), then ``1 - rho'`` without rescaling, then
    the default ``1 - rescale(rho', kappa)``.
    """
    if config.noise_rate_override is not None:
        return float(config.noise_rate_override)
    if config.validation_set is not None:
        val = config.validation_set
        if handle is None:
            raise ConfigError("validation-based estimate needs the black-box handle")
        if not val.has_evaluation_labels:
            raise ConfigError("validation set has no labels")
        alpha = np.mean(predict_labels(handle.predict_batch(val.features)) == val.evaluation_labels())
        return float(1.0 - alpha)
    rho_prime = high_conf_proportion(labeling, config.gamma)
    if config.no_rescale:
        return 1.0 - rho_prime
    return 1.0 - rescale(rho_prime, config.kappa)


def keep_ratio(n: float, n_k: float, eps: float) -> float:
    """Share of a batch kept at iteration ``n``: 1 at the start, ``1 - eps`` from ``n_k`` on."""
    return 1.0 - min(n / n_k * eps, eps)


def keep_rank(R: float, h: int) -> int:
    return max(1, int(math.floor(R * h + RANK_SLACK)))


class CategoryBuffers:
    """Per-class FIFO queues of the last ``h`` losses, initialised to +inf.

    With ``pooled=True`` a single queue serves every class.
    """

    def __init__(self, k: int, h: int = 100, pooled: bool = False):
        if h < 1 or k < 1:
            raise ConfigError("buffers need k >= 1 and h >= 1")
        self.k = k
        self.h = h
        self.pooled = pooled
        self._data = np.full((1 if pooled else k, h), np.inf)
        self._head = np.zeros(self._data.shape[0], dtype=np.int64)

    def _row(self, c: int) -> int:
        return 0 if self.pooled else int(c)

    def push(self, c: int, value: float):
        r = self._row(c)
        self._data[r, self._head[r]] = value
        self._head[r] = (self._head[r] + 1) % self.h

    def push_many(self, classes, values):
        for c, v in zip(classes, values):
            self.push(c, v)

    def queue(self, c: int) -> np.ndarray:
        """Contents of class ``c``'s queue, oldest first."""
        r = self._row(c)
        return np.roll(self._data[r], -self._head[r])

    def threshold(self, c: int, R: float) -> float:
        """Largest of the ``max(1, floor(R*h))`` smallest queue entries (+inf entries count).

        A loss at or below it lies in the lowest ``R`` share of recent losses
        for the class, so about ``R`` of the class's samples are kept.
        """
        kth = keep_rank(R, self.h) - 1
        return float(np.partition(self._data[self._row(c)], kth)[kth])

    def thresholds(self, R: float) -> np.ndarray:
        """Threshold for every class at once."""
        kth = keep_rank(R, self.h) - 1
        per_row = np.partition(self._data, kth, axis=1)[:, kth]
        return np.full(self.k, per_row[0]) if self.pooled else per_row


def selection_threshold(buffers: CategoryBuffers, c: int, R: float) -> float:
    return buffers.threshold(c, R)


def accept_sample(loss: float, buffers: CategoryBuffers, c: int, R: float) -> int:
    return int(loss <= buffers.threshold(c, R))


def accept_batch(losses, labels, buffers: CategoryBuffers, R: float) -> np.ndarray:
    """0/1 mask for a batch, all samples judged against the same buffer state."""
    return (np.asarray(losses) <= buffers.thresholds(R)[np.asarray(labels)]).astype(np.float64)


@dataclass
class RunMetrics:
    epsilon: float
    epsilon_used: float
    rho_prime: float
    k: int
    labeling: NoisyLabeling = field(repr=False)
    rows: list = field(default_factory=list, repr=False)
    warnings: list = field(default_factory=list)

    def record(self, n, R, losses, mask, labels):
        accepted = mask > 0
        counts = np.bincount(labels[accepted], minlength=self.k)
        mean_loss = float(losses[accepted].mean()) if accepted.any() else float("nan")
        self.rows.append((n, R, mean_loss, counts.tolist()))

    def to_csv(self, path, provenance: str = ""):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            w = csv.writer(fh)
            w.writerow(["iteration", "R", "mean_accepted_loss"]
                       + [f"accepted_class_{c}" for c in range(self.k)])
            for n, R, loss, counts in self.rows:
                w.writerow([n, repr(R), repr(loss), *counts])


def run_lnl(handle: BlackBoxHandle, target: DatasetSplit, config: LnlConfig, seed: int = 0,
            init_model: Optional[ClassifierModel] = None):
    """Train a target model on noisy black-box labels with small-loss selection.

    ``init_model`` (copied, not modified) replaces the fresh random init.
    Returns ``(model, RunMetrics)``.
    """
    config.validate()
    if handle.k != target.k:
        raise ConfigError(f"black box has {handle.k} classes, target split has {target.k}")
    labeling = noisy_labeling(handle, target)
    eps = estimate_noise_rate(labeling, config, handle)
    eps_used = min(max(eps, 0.0), config.max_noise_rate)
    metrics = RunMetrics(eps, eps_used, high_conf_proportion(labeling, config.gamma),
                         target.k, labeling)

    present = np.bincount(labeling.labels, minlength=target.k)
    for c in np.flatnonzero(present == 0):
        msg = f"class {c} receives no noisy labels; it gets no training signal"
        metrics.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(2**31))
    if init_model is not None:
        model = init_model.copy()
    else:
        model = ClassifierModel.init([target.d, *config.hidden, target.k], seed=init_seed)
    if config.iterations == 0:
        return model, metrics

    buffers = CategoryBuffers(target.k, config.h, pooled=config.no_category_sampling)
    schedule = SgdSchedule(config.eta0, config.iterations, config.momentum)
    sampler = BatchSampler(target.n, config.batch_size, rng)
    velocity: list = []
    y_all = labeling.labels
    n_k = config.n_k
    for n in range(1, config.iterations + 1):
        idx = sampler.next()
        x, y = target.features[idx], y_all[idx]
        R = keep_ratio(n, n_k, eps_used)
        probs, cache = model.forward_cache(x)
        losses = cross_entropy_loss(probs, y)
        mask = accept_batch(losses, y, buffers, R)
        sgd_step(model, x, y, mask, schedule, n, velocity, cache=cache)
        buffers.push_many(y, losses)
        metrics.record(n, R, losses, mask, y)
    return model, metrics
