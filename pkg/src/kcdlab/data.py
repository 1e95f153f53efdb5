"""Datasets, split plans, fold partitions, the synthetic generator and CSV I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidInputError,
    InvalidParameterError,
    ParseError,
    SchemaError,
    ShapeError,
)
from .nn import predict


@dataclass
class LabeledDataset:
    """Feature matrix (N x d) with integer labels in ``[0, class_count)``.

    ``label_names`` records the original label of each dense index when the
    data came from a CSV file.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    label_names: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )
        if self.class_count < 1:
            raise InvalidInputError("class_count must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidInputError("label outside [0, class_count)")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count, self.label_names)


# ---------------------------------------------------------------------------
# Split plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSizes:
    train_all: int
    train_known: int
    train_target: int
    reference: int
    validation: int
    test_all: int
    test_known: int
    test_target: int

    def scaled(self, factor):
        """Every role multiplied by ``factor`` (rounded), ratios preserved."""
        return SplitSizes(**{f.name: int(round(getattr(self, f.name) * factor)) for f in fields(self)})

    @property
    def pool_size(self):
        return self.train_all + self.reference + self.validation + self.test_all


# Purchase100 / Texas100 row of the reference split table
TABLE2_TABULAR = SplitSizes(
    train_all=10000,
    train_known=5000,
    train_target=2500,
    reference=10000,
    validation=5000,
    test_all=5000,
    test_known=2500,
    test_target=2500,
)

DESK_SCALE_FACTOR = 0.2


@dataclass(frozen=True)
class SplitPlan:
    """Index sets into one source dataset."""

    train_all: np.ndarray
    train_known: np.ndarray
    train_target: np.ndarray
    reference: np.ndarray
    validation: np.ndarray
    test_all: np.ndarray
    test_known: np.ndarray
    test_target: np.ndarray

    ROLES = (
        "train_all",
        "train_known",
        "train_target",
        "reference",
        "validation",
        "test_all",
        "test_known",
        "test_target",
    )

    def to_dict(self):
        return {role: getattr(self, role).tolist() for role in self.ROLES}

    @classmethod
    def from_dict(cls, doc):
        missing = [r for r in cls.ROLES if r not in doc]
        if missing:
            raise SchemaError("split plan is missing roles", missing[0])
        return cls(**{r: np.asarray(doc[r], dtype=np.int64) for r in cls.ROLES})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def equals(self, other):
        return all(np.array_equal(getattr(self, r), getattr(other, r)) for r in self.ROLES)


def make_split_plan(dataset, sizes, seed):
    """Uniform random disjoint assignment of dataset rows to roles.

    The top-level roles (train, reference, validation, test) are disjoint;
    known/target subsets are disjoint draws inside train and inside test.
    """
    n = len(dataset)
    for role in SplitPlan.ROLES:
        if getattr(sizes, role) < 0:
            raise InvalidParameterError(f"negative size for role {role!r}")
    if sizes.pool_size > n:
        deficient = "test_all"
        used = 0
        for role in ("train_all", "reference", "validation", "test_all"):
            used += getattr(sizes, role)
            if used > n:
                deficient = role
                break
        raise InsufficientDataError(deficient, sizes.pool_size, n)
    for parent, kids in (("train_all", ("train_known", "train_target")), ("test_all", ("test_known", "test_target"))):
        total = sum(getattr(sizes, k) for k in kids)
        if total > getattr(sizes, parent):
            raise InsufficientDataError(kids[-1], total, getattr(sizes, parent))

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    out = {}
    start = 0
    for role in ("train_all", "reference", "validation", "test_all"):
        size = getattr(sizes, role)
        out[role] = np.sort(perm[start : start + size])
        start += size
    for parent, known, target in (
        ("train_all", "train_known", "train_target"),
        ("test_all", "test_known", "test_target"),
    ):
        inner = rng.permutation(out[parent])
        k, t = getattr(sizes, known), getattr(sizes, target)
        out[known] = np.sort(inner[:k])
        out[target] = np.sort(inner[k : k + t])
    return SplitPlan(**out)


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    """``fold_of[j]`` is the fold of ``indices[j]``."""

    n: int
    indices: np.ndarray
    fold_of: np.ndarray

    def members(self, fold):
        return self.indices[self.fold_of == fold]

    def complement(self, fold):
        return self.indices[self.fold_of != fold]

    def positions(self, fold):
        """Positions (into ``indices``) of the rows in ``fold``."""
        return np.flatnonzero(self.fold_of == fold)

    def sizes(self):
        return np.bincount(self.fold_of, minlength=self.n)

    def to_dict(self):
        return {"n": self.n, "indices": self.indices.tolist(), "fold_of": self.fold_of.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(int(doc["n"]), np.asarray(doc["indices"], dtype=np.int64), np.asarray(doc["fold_of"], dtype=np.int64))


def partition_folds(train_indices, n, seed):
    """Seeded shuffle followed by round-robin dealing into ``n`` folds."""
    idx = np.asarray(train_indices, dtype=np.int64)
    if n < 2:
        raise InvalidParameterError(f"need at least 2 folds, got {n}")
    if idx.shape[0] < n:
        raise InvalidParameterError(f"cannot split {idx.shape[0]} samples into {n} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(idx.shape[0])
    fold_of = np.empty(idx.shape[0], dtype=np.int64)
    fold_of[order] = np.arange(idx.shape[0]) % n
    return FoldAssignment(n, idx, fold_of)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Purchase-like clustered binary data: Bernoulli centroids plus bit flips."""

    class_count: int = 20
    feature_dim: int = 100
    samples_per_class: int = 300
    centroid_density: float = 0.5
    flip_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2 or self.feature_dim < 1 or self.samples_per_class < 1:
            raise InvalidParameterError("class_count >= 2, feature_dim >= 1, samples_per_class >= 1 required")
        if not 0.0 < self.centroid_density < 1.0:
            raise InvalidParameterError("centroid_density must lie in (0, 1)")
        if not 0.0 < self.flip_noise < 0.5:
            raise InvalidParameterError("flip_noise must lie in (0, 0.5)")

    def to_dict(self):
        return asdict(self)


def synthetic_centroids(spec):
    rng = np.random.default_rng(spec.seed)
    return (rng.random((spec.class_count, spec.feature_dim)) < spec.centroid_density).astype(np.float64)


def generate_synthetic(spec):
    """Deterministic under ``spec.seed``; rows are grouped by class."""
    rng = np.random.default_rng(spec.seed)
    centroids = (rng.random((spec.class_count, spec.feature_dim)) < spec.centroid_density).astype(np.float64)
    labels = np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    base = centroids[labels]
    flips = rng.random(base.shape) < spec.flip_noise
    features = np.where(flips, 1.0 - base, base)
    return LabeledDataset(features, labels, spec.class_count)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def load_csv(path, label_column="label", delimiter=","):
    """Read a header-first CSV; every non-label column is a real feature.

    Labels map to dense indices in order of first appearance; the original
    values are kept in ``label_names``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("file is empty, expected a header row", line=1) from None
        if label_column not in header:
            raise SchemaError(f"label column {label_column!r} not in header {header}", label_column)
        label_pos = header.index(label_column)
        width = len(header)
        names = {}
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, found {len(row)}", line=line)
            raw_label = row[label_pos]
            if raw_label not in names:
                names[raw_label] = len(names)
            labels.append(names[raw_label])
            values = []
            for j, cell in enumerate(row):
                if j == label_pos:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r} in column {header[j]!r}", line=line) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value {cell!r} in column {header[j]!r}", line=line)
                values.append(v)
            rows.append(values)
    if not rows:
        raise ParseError("no data rows after header", line=2)
    features = np.array(rows, dtype=np.float64)
    return LabeledDataset(features, np.array(labels), len(names), list(names))


def write_csv(dataset, path, label_column="label", delimiter=","):
    """Write ``dataset`` so that :func:`load_csv` reproduces it bit for bit.

    Labels are written as their recorded names when present, else as the
    dense index; rows keep their order so first-appearance mapping holds
    only if label 0 appears first, which callers relying on exact label
    round-trip should ensure.
    """
    names = dataset.label_names or [str(i) for i in range(dataset.class_count)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow([f"x{j}" for j in range(dataset.feature_dim)] + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [names[y]])


# ---------------------------------------------------------------------------
# Accuracy
# ---------------------------------------------------------------------------


def accuracy(model, data):
    """Fraction of rows whose arg-max confidence equals the label (lowest index wins ties)."""
    if len(data) == 0:
        raise InvalidInputError("accuracy of an empty dataset is undefined")
    pred = np.argmax(predict(model, data.features), axis=1)
    return float(np.mean(pred == data.labels))
