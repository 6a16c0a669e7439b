"""Source/target domain data: synthetic shifted Gaussian pairs, CSV and IDX loaders.

Target splits keep their ground truth out of ``labels``; it is reachable only
through :meth:`DatasetSplit.evaluation_labels`, which training code never calls.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, ParseError

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Feature matrix with optional training labels and optional hidden evaluation labels."""

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    k: int = 2
    _hidden_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got shape {x.shape}")
        if x.shape[0] < 1:
            raise DataError("a split needs at least one sample")
        if self.k < 2:
            raise DataError(f"category count must be >= 2, got {self.k}")
        object.__setattr__(self, "features", x)
        for name in ("labels", "_hidden_labels"):
            y = getattr(self, name)
            if y is None:
                continue
            y = np.asarray(y, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise DataError(f"{name} length {y.shape} does not match {x.shape[0]} rows")
            if y.size and (y.min() < 0 or y.max() >= self.k):
                raise DataError(f"{name} must lie in [0, {self.k - 1}]")
            object.__setattr__(self, name, y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_evaluation_labels(self) -> bool:
        return self.labels is not None or self._hidden_labels is not None

    def evaluation_labels(self) -> np.ndarray:
        """Ground truth for scoring. Only evaluation code may call this."""
        if self.labels is not None:
            return self.labels
        if self._hidden_labels is not None:
            return self._hidden_labels
        raise DataError("split carries no labels; evaluation needs a labeled split")

    def unlabeled(self) -> "DatasetSplit":
        """Same rows with any labels moved to the evaluation-only slot."""
        hidden = self.labels if self.labels is not None else self._hidden_labels
        return DatasetSplit(self.features, None, self.k, _hidden_labels=hidden)

    def subset(self, index) -> "DatasetSplit":
        index = np.asarray(index)
        pick = lambda y: None if y is None else y[index]  # noqa: E731
        return DatasetSplit(self.features[index], pick(self.labels), self.k,
                            _hidden_labels=pick(self._hidden_labels))


@dataclass(frozen=True)
class ShiftSpec:
    """Parameters of a synthetic domain pair.

    Source cluster means are drawn once from the seed; target means are the
    source means rotated by ``rotation`` radians in the plane of the first two
    axes (about the origin) and then translated. ``translation`` shorter than
    ``d`` is zero-padded.
    """

    k: int = 3
    d: int = 2
    n_source: int = 600
    n_target: int = 600
    translation: Sequence[float] = ()
    rotation: float = 0.0
    spread: Union[float, Sequence[float]] = 0.5
    separation: float = 3.0
    seed: int = 0

    def validate(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("sample counts must be >= 1")
        if len(self.translation) > self.d:
            raise ConfigError(f"translation has {len(self.translation)} entries for d={self.d}")
        if self.rotation != 0.0 and self.d < 2:
            raise ConfigError("rotation needs d >= 2")
        spread = np.atleast_1d(np.asarray(self.spread, dtype=np.float64))
        if spread.size not in (1, self.k) or np.any(spread <= 0):
            raise ConfigError("spread must be positive, scalar or one value per class")
        if self.separation <= 0:
            raise ConfigError("separation must be positive")

    def translation_vector(self) -> np.ndarray:
        t = np.zeros(self.d)
        t[: len(self.translation)] = np.asarray(self.translation, dtype=np.float64)
        return t

    def rotation_matrix(self) -> np.ndarray:
        r = np.eye(self.d)
        if self.rotation:
            c, s = math.cos(self.rotation), math.sin(self.rotation)
            r[:2, :2] = [[c, -s], [s, c]]
        return r


def _draw_clusters(rng, means, spread, n):
    k = means.shape[0]
    labels = rng.permutation(np.arange(n) % k)
    noise = rng.standard_normal((n, means.shape[1]))
    sd = spread if spread.size == 1 else spread[labels][:, None]
    return means[labels] + sd * noise, labels


def make_synthetic_pair(spec: ShiftSpec) -> tuple[DatasetSplit, DatasetSplit]:
    """Labeled source split and an unlabeled target split under a rigid shift.

    The target's ground truth stays attached as evaluation-only labels.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.k, spec.d)) * spec.separation / math.sqrt(2 * spec.d)
    target_means = means @ spec.rotation_matrix().T + spec.translation_vector()
    spread = np.atleast_1d(np.asarray(spec.spread, dtype=np.float64))

    xs, ys = _draw_clusters(rng, means, spread, spec.n_source)
    xt, yt = _draw_clusters(rng, target_means, spread, spec.n_target)
    source = DatasetSplit(xs, ys, spec.k)
    target = DatasetSplit(xt, None, spec.k, _hidden_labels=yt)
    return source, target


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine map fitted on the source split only."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, split: DatasetSplit) -> "Standardizer":
        mean = split.features.mean(axis=0)
        scale = split.features.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def apply(self, split: DatasetSplit) -> DatasetSplit:
        x = (split.features - self.mean) / self.scale
        return DatasetSplit(x, split.labels, split.k, _hidden_labels=split._hidden_labels)


def normalize_pair(source: DatasetSplit, *others: DatasetSplit):
    std = Standardizer.fit(source)
    return (std.apply(source),) + tuple(std.apply(s) for s in others)


def load_csv(path, has_labels: bool, k: Optional[int] = None) -> DatasetSplit:
    """Parse a headerless comma-separated file; the label column is last when present.

    Lines starting with ``#`` are skipped. ``k`` defaults to ``max(label) + 1``
    (at least 2); an explicit ``k`` rejects larger labels.
    """
    path = Path(path)
    rows, labels = [], []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
                if has_labels and width < 2:
                    raise ParseError("need at least one feature column plus a label", path, lineno)
            elif len(cells) != width:
                raise ParseError(f"expected {width} fields, found {len(cells)}", path, lineno)
            try:
                values = [float(c) for c in (cells[:-1] if has_labels else cells)]
            except ValueError:
                raise ParseError(f"non-numeric cell in {line!r}", path, lineno) from None
            if has_labels:
                try:
                    label = int(cells[-1])
                except ValueError:
                    raise ParseError(f"label {cells[-1]!r} is not an integer", path, lineno) from None
                if label < 0 or (k is not None and label >= k):
                    raise ParseError(f"label {label} outside [0, {k if k else 'k'})", path, lineno)
                labels.append(label)
            rows.append(values)
    if not rows:
        raise ParseError("no data rows", path)
    y = np.asarray(labels, dtype=np.int64) if has_labels else None
    if k is None:
        k = max(2, int(y.max()) + 1) if has_labels else 2
    return DatasetSplit(np.asarray(rows, dtype=np.float64), y, k)


def write_csv(split: DatasetSplit, path, include_labels: bool = True):
    """Write a split in the headerless format read by :func:`load_csv`.

    Evaluation-only labels are written when ``include_labels`` is set, so the
    file can be reloaded as a labeled evaluation split.
    """
    x = split.features
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if include_labels:
            y = split.evaluation_labels()
            for row, label in zip(x, y):
                fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")
        else:
            for row in x:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _open_maybe_gz(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, expected_magic):
    with _open_maybe_gz(path) as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ParseError("file too short for an IDX header", path)
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path)
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", blob[4: 4 + 4 * ndim])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(blob) - offset != count:
        raise ParseError(f"payload has {len(blob) - offset} bytes, header promises {count}", path)
    return np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx(images_path, labels_path=None, k: Optional[int] = None) -> DatasetSplit:
    """Load an IDX image file (and optional IDX label file) as flattened grayscale in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    n = images.shape[0]
    x = images.reshape(n, -1).astype(np.float64) / 255.0
    y = None
    if labels_path is not None:
        y = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if y.shape[0] != n:
            raise DataError(f"{n} images but {y.shape[0]} labels")
    if k is None:
        k = max(10, int(y.max()) + 1) if y is not None and y.size else 10
    return DatasetSplit(x, y, k)


# Six clusters rotated by ~172 degrees about the origin in one plane: clusters far
# from the origin move a lot, near ones barely, so source-model noise is strongly
# class-dependent (target accuracy ~63% overall, 26%..97% per class).
ADAPTATION_FIXTURE = ShiftSpec(k=6, d=10, n_source=3000, n_target=3000, rotation=3.0,
                               spread=0.6, separation=4.0, seed=0)


def adaptation_fixture():
    """Normalised ``(source, target)`` pair used by the end-to-end checks."""
    return normalize_pair(*make_synthetic_pair(ADAPTATION_FIXTURE))
