"""Feed-forward softmax classifier with hand-written backprop and SGD.

Hidden layers use softplus. Parameters are stored per layer as ``W`` of shape
``(fan_in, fan_out)`` and ``b`` of shape ``(fan_out,)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointError, ConfigError, DataError

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"ILNL"
CHECKPOINT_VERSION = 1


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ClassifierModel:
    def __init__(self, layer_dims: Sequence[int], weights, biases):
        self.layer_dims = [int(v) for v in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError(f"invalid layer_dims {self.layer_dims}")
        if self.layer_dims[-1] < 2:
            raise ConfigError("need at least 2 output classes")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ConfigError(f"layer {i}: expected W{shape}, got W{w.shape} b{b.shape}")

    @classmethod
    def init(cls, layer_dims, seed: int = 0) -> "ClassifierModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases)

    @classmethod
    def zeros(cls, layer_dims) -> "ClassifierModel":
        pairs = list(zip(layer_dims[:-1], layer_dims[1:]))
        return cls(layer_dims, [np.zeros(p) for p in pairs], [np.zeros(p[1]) for p in pairs])

    @property
    def d(self) -> int:
        return self.layer_dims[0]

    @property
    def k(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.layer_dims, [w.copy() for w in self.weights],
                               [b.copy() for b in self.biases])

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ConfigError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos: pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos: pos + b.size].copy()
            pos += b.size

    def _check_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise DataError(f"batch has shape {x.shape}, model expects {self.d} features")
        return x

    def forward_cache(self, x):
        """Forward pass that also returns the activations needed by :meth:`backward`."""
        x = self._check_batch(x)
        acts, pres = [x], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pres.append(z)
            h = _softmax(z) if i == last else _softplus(z)
            acts.append(h)
        return acts[-1], (acts, pres)

    def forward(self, x) -> np.ndarray:
        return self.forward_cache(x)[0]

    def backward(self, cache, labels, mask=None):
        """Gradients of the mean cross-entropy over samples with ``mask == 1``.

        Returns ``None`` when no sample is selected.
        """
        acts, pres = cache
        probs = acts[-1]
        n = probs.shape[0]
        mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
        count = mask.sum()
        if count == 0:
            return None
        delta = probs.copy()
        delta[np.arange(n), labels] -= 1.0
        delta *= (mask / count)[:, None]
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append((acts[i].T @ delta, delta.sum(axis=0)))
            if i > 0:
                delta = (delta @ self.weights[i].T) * _sigmoid(pres[i - 1])
        grads.reverse()
        return grads


def forward(model: ClassifierModel, batch) -> np.ndarray:
    return model.forward(batch)


def cross_entropy_loss(probs, label):
    """``-log(max(p[label], 1e-12))``; vectorised over rows when ``probs`` is 2-D."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(label)], PROB_FLOOR)))
    label = np.asarray(label, dtype=np.int64)
    picked = probs[np.arange(probs.shape[0]), label]
    return -np.log(np.maximum(picked, PROB_FLOOR))


@dataclass(frozen=True)
class SgdSchedule:
    """Annealed rate ``eta0 / (1 + 10 * n / N) ** 0.75``."""

    eta0: float = 0.01
    total_iters: int = 1
    momentum: float = 0.9

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ConfigError("eta0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")

    def rate(self, n: int) -> float:
        zeta = 0.0 if self.total_iters == 0 else min(max(n / self.total_iters, 0.0), 1.0)
        return self.eta0 / (1.0 + 10.0 * zeta) ** 0.75


def sgd_step(model: ClassifierModel, batch, labels, weights_mask, schedule: SgdSchedule,
             n: int, velocity: Optional[list] = None, cache=None) -> np.ndarray:
    """One momentum-SGD update on the masked samples; returns losses for every sample.

    ``velocity`` is the momentum buffer (list of ``[vW, vb]`` pairs) and is
    updated in place; pass the same list on every step of a run. ``None``
    behaves like a fresh zero buffer. ``cache`` reuses an earlier
    :meth:`ClassifierModel.forward_cache` on the same batch and parameters.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(weights_mask, dtype=np.float64)
    if cache is None:
        probs, cache = model.forward_cache(batch)
    else:
        probs = cache[0][-1]
    if mask.shape != (probs.shape[0],) or labels.shape != mask.shape:
        raise DataError("mask and labels must have one entry per batch row")
    losses = cross_entropy_loss(probs, labels)
    grads = model.backward(cache, labels, mask)
    if grads is None:
        return losses
    if velocity is None:
        velocity = []
    if not velocity:
        velocity.extend([np.zeros_like(w), np.zeros_like(b)] for w, b in zip(model.weights, model.biases))
    lr = schedule.rate(n)
    mu = schedule.momentum
    for i, (gw, gb) in enumerate(grads):
        vw, vb = velocity[i]
        vw *= mu
        vw += gw
        vb *= mu
        vb += gb
        model.weights[i] = model.weights[i] - lr * vw
        model.biases[i] = model.biases[i] - lr * vb
    return losses


def grad_check(model: ClassifierModel, batch, labels, step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    Entries where both gradients are below 1e-7 in magnitude are compared on
    an absolute basis, so numerically-zero gradients do not inflate the ratio.
    """
    labels = np.asarray(labels, dtype=np.int64)
    grads = model.backward(model.forward_cache(batch)[1], labels)
    analytic = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    probe = model.copy()
    theta = model.get_flat()
    numeric = np.empty_like(theta)
    for j in range(theta.size):
        saved = theta[j]
        theta[j] = saved + step
        probe.set_flat(theta)
        up = cross_entropy_loss(probe.forward(batch), labels).mean()
        theta[j] = saved - step
        probe.set_flat(theta)
        down = cross_entropy_loss(probe.forward(batch), labels).mean()
        theta[j] = saved
        numeric[j] = (up - down) / (2 * step)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / denom))


class BatchSampler:
    """Index batches over reshuffled epochs; a batch may straddle an epoch boundary."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise ConfigError("sampler needs n >= 1 and batch_size >= 1")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = min(self.batch_size, self.n)
        while need:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(need, self.n - self._pos)
            out.append(self._order[self._pos: self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    eta0: float = 0.01
    momentum: float = 0.9
    hidden: tuple = (256, 128)
    seed: int = 0

    def layer_dims(self, d: int, k: int) -> list:
        return [d, *self.hidden, k]


def train_source(source, config: TrainConfig = None) -> ClassifierModel:
    """Fit a classifier on the labeled source split with plain cross-entropy."""
    config = config or TrainConfig()
    if source.labels is None:
        raise ConfigError("train_source needs a labeled split")
    rng = np.random.default_rng(config.seed)
    model = ClassifierModel.init(config.layer_dims(source.d, source.k), seed=int(rng.integers(2**31)))
    schedule = SgdSchedule(config.eta0, config.iterations, config.momentum)
    sampler = BatchSampler(source.n, config.batch_size, rng)
    velocity: list = []
    for n in range(1, config.iterations + 1):
        idx = sampler.next()
        sgd_step(model, source.features[idx], source.labels[idx], np.ones(idx.size),
                 schedule, n, velocity)
    return model


def predict_labels(probs) -> np.ndarray:
    """Argmax with ties broken toward the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def save_checkpoint(model: ClassifierModel, path):
    dims = model.layer_dims
    header = CHECKPOINT_MAGIC + struct.pack(f"<III{len(dims)}I", CHECKPOINT_VERSION, model.k,
                                            len(dims), *dims)
    Path(path).write_bytes(header + model.get_flat().astype("<f8").tobytes())


def load_checkpoint(path) -> ClassifierModel:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, k, ndims = struct.unpack("<III", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    end = 16 + 4 * ndims
    if ndims < 2 or len(blob) < end:
        raise CheckpointError(f"{path}: truncated header")
    dims = list(struct.unpack(f"<{ndims}I", blob[16:end]))
    if dims[-1] != k:
        raise CheckpointError(f"{path}: K={k} disagrees with layer_dims {dims}")
    model = ClassifierModel.zeros(dims)
    payload = blob[end:]
    if len(payload) != 8 * model.n_params:
        raise CheckpointError(f"{path}: expected {8 * model.n_params} parameter bytes, found {len(payload)}")
    model.set_flat(np.frombuffer(payload, dtype="<f8").astype(np.float64))
    return model
