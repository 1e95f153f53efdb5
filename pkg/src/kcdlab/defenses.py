"""Defense trainers: unprotected, DMP, knowledge cross-distillation (KCD) and
the two naive DMP variants ("splitting" and "reusing").

Every trainer runs exactly one seeded trial and returns a
:class:`~kcdlab.nn.TrainedModel` whose ``model`` is the protected (student)
model. Best-of-trials selection lives in :mod:`kcdlab.harness`.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FoldAssignment, partition_folds
from .errors import InvalidParameterError, ProtocolViolationError, ShapeError
from .nn import (
    LossKind,
    Objective,
    TrainConfig,
    TrainedModel,
    init_mlp,
    predict,
    save_model,
    train_model,
)

DEFENSES = ("unprotected", "dmp", "kcd", "splitting_dmp", "reusing_dmp")


@dataclass(frozen=True)
class DefenseConfig:
    hidden: tuple = (128, 64)
    alpha: float = 1.0
    teacher_count: int = 5
    distill_loss: LossKind = field(default_factory=LossKind.mse)
    reference_size: int | None = None
    theta: float = 50.0
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    student_cfg: TrainConfig | None = None
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.teacher_count < 2:
            raise InvalidParameterError(f"teacher_count must be >= 2, got {self.teacher_count}")
        if not 0.0 < self.theta <= 100.0:
            raise InvalidParameterError(f"theta must lie in (0, 100], got {self.theta}")
        if self.reference_size is not None and self.reference_size < 1:
            raise InvalidParameterError("reference_size must be >= 1")

    @property
    def student_train_cfg(self):
        return self.student_cfg or self.train_cfg

    def layer_dims(self, data):
        return [data.feature_dim, *self.hidden, data.class_count]

    def with_seed(self, seed):
        return replace(
            self,
            train_cfg=self.train_cfg.with_seed(seed),
            student_cfg=None if self.student_cfg is None else self.student_cfg.with_seed(seed),
        )


@dataclass
class SoftLabeledDataset:
    """Training rows with teacher confidence vectors and the original labels.

    ``provenance[j]`` is the fold (and hence teacher) that produced row j's
    soft label; ``indices`` are the rows' ids in the source dataset.
    """

    features: np.ndarray
    soft_labels: np.ndarray
    hard_labels: np.ndarray
    provenance: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        if self.soft_labels.shape[0] != n or self.hard_labels.shape != (n,) or self.provenance.shape != (n,):
            raise ShapeError("soft-labeled dataset columns have inconsistent lengths")
        if self.hard_labels.size and self.hard_labels.max() >= self.soft_labels.shape[1]:
            raise ShapeError("hard label exceeds class count of the soft labels")

    def __len__(self):
        return self.features.shape[0]

    def save(self, directory):
        """Write ``soft_features.csv`` and ``soft_labels.csv`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "soft_features.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"x{j}" for j in range(self.features.shape[1])])
            for i, row in zip(self.indices, self.features):
                w.writerow([int(i)] + [repr(float(v)) for v in row])
        with (directory / "soft_labels.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "fold", "hard_label"] + [f"p{j}" for j in range(self.soft_labels.shape[1])])
            for i, f, y, row in zip(self.indices, self.provenance, self.hard_labels, self.soft_labels):
                w.writerow([int(i), int(f), int(y)] + [repr(float(v)) for v in row])

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        feats = np.loadtxt(directory / "soft_features.csv", delimiter=",", skiprows=1, ndmin=2)
        labs = np.loadtxt(directory / "soft_labels.csv", delimiter=",", skiprows=1, ndmin=2)
        return cls(
            features=feats[:, 1:],
            soft_labels=labs[:, 3:],
            hard_labels=labs[:, 2].astype(np.int64),
            provenance=labs[:, 1].astype(np.int64),
            indices=labs[:, 0].astype(np.int64),
        )


@dataclass
class DefenseResult:
    """A trained protected model plus the audit trail of how it was made."""

    trained: TrainedModel
    teachers: list = field(default_factory=list)
    folds: FoldAssignment | None = None
    soft_data: SoftLabeledDataset | None = None
    # source-dataset rows the student was fitted on, and rows each teacher saw
    student_rows: np.ndarray | None = None
    teacher_rows: list = field(default_factory=list)

    @property
    def model(self):
        return self.trained.model

    def persist(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_model(self.model, directory / "model.json")
        if self.folds is not None:
            (directory / "folds.json").write_text(json.dumps(self.folds.to_dict()))
        if self.soft_data is not None:
            self.soft_data.save(directory)


def _rows(data, indices):
    """``indices`` of the rows of ``data`` (defaults to 0..N-1)."""
    if indices is None:
        return np.arange(len(data), dtype=np.int64)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (len(data),):
        raise ShapeError("row ids must have one entry per dataset row")
    return idx


def _fit(data, val, dims, objective, cfg, soft=None):
    return train_model(
        init_mlp(dims, cfg.seed),
        objective,
        data.features,
        val.features,
        val.labels,
        cfg,
        train_y=data.labels if objective.uses_hard else None,
        train_soft=soft,
    )


def train_unprotected(train, val, cfg, train_ids=None):
    """Plain cross-entropy training on the private set."""
    trained = _fit(train, val, cfg.layer_dims(train), Objective(0.0), cfg.train_cfg)
    rows = _rows(train, train_ids)
    return DefenseResult(trained, student_rows=rows, teacher_rows=[])


def distill_student(teacher, features, val, cfg, dims):
    """Fit a fresh student on ``(x, teacher(x))`` pairs only."""
    soft = predict(teacher, features)
    objective = Objective(1.0, cfg.distill_loss)
    student_cfg = cfg.student_train_cfg
    return train_model(
        init_mlp(dims, student_cfg.seed),
        objective,
        features,
        val.features,
        val.labels,
        student_cfg,
        train_soft=soft,
    )


def train_dmp(train, reference, val, cfg, train_ids=None, reference_ids=None, teacher=None):
    """Distillation for membership privacy with a disjoint reference pool.

    The teacher is fitted on ``train`` (or given); the first
    ``cfg.reference_size`` reference rows after a seeded shuffle are labeled
    by the teacher and the student learns from those soft labels only.
    """
    t_rows = _rows(train, train_ids)
    r_rows = _rows(reference, reference_ids) if reference_ids is not None else None
    if r_rows is not None and np.intersect1d(t_rows, r_rows).size:
        raise ProtocolViolationError("reference pool overlaps the private training set")
    size = len(reference) if cfg.reference_size is None else cfg.reference_size
    if size > len(reference):
        raise InvalidParameterError(f"reference_size {size} exceeds reference pool of {len(reference)}")
    dims = cfg.layer_dims(train)
    if teacher is None:
        teacher = _fit(train, val, dims, Objective(0.0), cfg.train_cfg).model
    rng = np.random.default_rng(cfg.train_cfg.seed)
    chosen = np.sort(rng.permutation(len(reference))[:size])
    student = distill_student(teacher, reference.features[chosen], val, cfg, dims)
    return DefenseResult(
        student,
        teachers=[teacher],
        student_rows=None if r_rows is None else r_rows[chosen],
        teacher_rows=[t_rows],
    )


def build_soft_labels(teachers, folds, train, train_ids=None):
    """Label every row of fold i with teacher i's confidence vector.

    ``folds.indices`` are positions into ``train`` (or ids matching
    ``train_ids``); each training row appears exactly once in the result.
    """
    if len(teachers) != folds.n:
        raise InvalidParameterError(f"{len(teachers)} teachers for {folds.n} folds")
    ids = _rows(train, train_ids)
    pos_of = {int(i): p for p, i in enumerate(ids)}
    if folds.indices.shape[0] != len(train) or set(folds.indices.tolist()) != set(pos_of):
        raise InvalidParameterError("fold assignment does not cover the training set exactly")
    positions = np.array([pos_of[int(i)] for i in folds.indices], dtype=np.int64)
    soft = np.empty((len(train), train.class_count))
    provenance = np.empty(len(train), dtype=np.int64)
    for fold, teacher in enumerate(teachers):
        sel = positions[folds.fold_of == fold]
        soft[sel] = predict(teacher, train.features[sel])
        provenance[sel] = fold
    return SoftLabeledDataset(train.features, soft, train.labels, provenance, ids)


def _teacher_job(args):
    train, val, dims, cfg, fold_rows = args
    return _fit(train.subset(fold_rows), val, dims, Objective(0.0), cfg).model


def teacher_seed(seed, fold):
    return seed + 1 + fold


def train_kcd(train, val, cfg, train_ids=None):
    """Knowledge cross-distillation.

    Folds D_1..D_n are drawn with the run seed; teacher i learns on every fold
    except D_i and labels D_i; the student minimises
    ``alpha * distill(H(x), y') + (1 - alpha) * CE(H(x), y)`` over the whole
    training set. ``alpha == 0`` skips the teachers and is exactly
    :func:`train_unprotected`.
    """
    if cfg.alpha == 0.0:
        return train_unprotected(train, val, cfg, train_ids)
    ids = _rows(train, train_ids)
    seed = cfg.train_cfg.seed
    folds = partition_folds(np.arange(len(train)), cfg.teacher_count, seed)
    dims = cfg.layer_dims(train)
    jobs = [
        (train, val, dims, cfg.train_cfg.with_seed(teacher_seed(seed, i)), folds.complement(i))
        for i in range(folds.n)
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            teachers = list(pool.map(_teacher_job, jobs))
    else:
        teachers = [_teacher_job(job) for job in jobs]
    soft = build_soft_labels(teachers, folds, train)
    soft.indices = ids
    objective = Objective(cfg.alpha, cfg.distill_loss)
    student_cfg = cfg.student_train_cfg
    trained = train_model(
        init_mlp(dims, student_cfg.seed),
        objective,
        train.features,
        val.features,
        val.labels,
        student_cfg,
        train_y=train.labels,
        train_soft=soft.soft_labels,
    )
    id_folds = FoldAssignment(folds.n, ids[folds.indices], folds.fold_of)
    return DefenseResult(
        trained,
        teachers=teachers,
        folds=id_folds,
        soft_data=soft,
        student_rows=ids,
        teacher_rows=[ids[job[-1]] for job in jobs],
    )


def _theta_count(n, theta):
    return int(math.floor(n * theta / 100.0 + 0.5))


def train_splitting_dmp(train, val, theta, cfg, train_ids=None):
    """Teacher on (100 - theta)% of the private set, student on the rest."""
    if not 0.0 < theta < 100.0:
        raise InvalidParameterError(f"theta must lie in (0, 100) for splitting DMP, got {theta}")
    ids = _rows(train, train_ids)
    k = _theta_count(len(train), theta)
    if k < 1 or k >= len(train):
        raise InvalidParameterError(f"theta={theta} leaves an empty part of {len(train)} rows")
    rng = np.random.default_rng(cfg.train_cfg.seed)
    perm = rng.permutation(len(train))
    ref_pos, teach_pos = np.sort(perm[:k]), np.sort(perm[k:])
    dims = cfg.layer_dims(train)
    teacher = _fit(train.subset(teach_pos), val, dims, Objective(0.0), cfg.train_cfg).model
    student = distill_student(teacher, train.features[ref_pos], val, cfg, dims)
    return DefenseResult(student, teachers=[teacher], student_rows=ids[ref_pos], teacher_rows=[ids[teach_pos]])


def train_reusing_dmp(train, val, theta, cfg, train_ids=None, teacher=None):
    """Teacher on the whole private set; student on a theta% subset of it."""
    if not 0.0 < theta <= 100.0:
        raise InvalidParameterError(f"theta must lie in (0, 100], got {theta}")
    ids = _rows(train, train_ids)
    k = _theta_count(len(train), theta)
    if k < 1:
        raise InvalidParameterError(f"theta={theta} selects no rows out of {len(train)}")
    dims = cfg.layer_dims(train)
    if teacher is None:
        teacher = _fit(train, val, dims, Objective(0.0), cfg.train_cfg).model
    rng = np.random.default_rng(cfg.train_cfg.seed)
    ref_pos = np.sort(rng.permutation(len(train))[:k])
    student = distill_student(teacher, train.features[ref_pos], val, cfg, dims)
    return DefenseResult(student, teachers=[teacher], student_rows=ids[ref_pos], teacher_rows=[ids])


def train_defense(name, train, val, cfg, reference=None, train_ids=None, reference_ids=None):
    """Dispatch by defense name."""
    if name == "unprotected":
        return train_unprotected(train, val, cfg, train_ids)
    if name == "kcd":
        return train_kcd(train, val, cfg, train_ids)
    if name == "dmp":
        if reference is None:
            raise InvalidParameterError("DMP needs a reference dataset")
        return train_dmp(train, reference, val, cfg, train_ids, reference_ids)
    if name == "splitting_dmp":
        return train_splitting_dmp(train, val, cfg.theta, cfg, train_ids)
    if name == "reusing_dmp":
        return train_reusing_dmp(train, val, cfg.theta, cfg, train_ids)
    raise InvalidParameterError(f"unknown defense {name!r}; choose from {DEFENSES}")
