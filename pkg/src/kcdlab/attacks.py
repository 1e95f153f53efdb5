"""Black-box membership inference attacks that read confidence vectors.

Five metric attacks (Top 1, correctness, confidence, entropy, modified
entropy) decide membership by comparing a per-record metric with a threshold
the attacker fits on known members and known non-members. The ML-Leaks
"Adversary 1" attack trains a single classifier on the sorted top-3
confidences.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, InvalidParameterError
from .nn import Objective, TrainConfig, init_mlp, predict, train_model

PROB_EPS = 1e-12

TOP1 = "top1"
CORRECTNESS = "correctness"
CONFIDENCE = "confidence"
ENTROPY = "entropy"
MENTROPY = "mentropy"
LEAKS1 = "leaks1"

METRIC_KINDS = (TOP1, CORRECTNESS, CONFIDENCE, ENTROPY, MENTROPY)
# fixed order, also used to break ties between equally strong attacks
ATTACK_NAMES = (LEAKS1, TOP1, CORRECTNESS, CONFIDENCE, ENTROPY, MENTROPY)

_GE_KINDS = (TOP1, CONFIDENCE)
_LE_KINDS = (ENTROPY, MENTROPY)
_PER_CLASS_KINDS = (CONFIDENCE, ENTROPY, MENTROPY)


def direction(kind):
    """``"ge"`` (member if metric >= tau), ``"le"``, or ``None`` for correctness."""
    if kind in _GE_KINDS:
        return "ge"
    if kind in _LE_KINDS:
        return "le"
    if kind == CORRECTNESS:
        return None
    raise InvalidParameterError(f"unknown metric attack {kind!r}")


@dataclass
class MembershipRecords:
    """Confidence vectors F(x), true labels and membership bits (1 = member).

    Used both for the attacker's prior knowledge and for the target set.
    """

    confidences: np.ndarray
    labels: np.ndarray
    membership: np.ndarray

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.membership = np.asarray(self.membership, dtype=np.int64)
        n = self.confidences.shape[0]
        if self.confidences.ndim != 2 or self.labels.shape != (n,) or self.membership.shape != (n,):
            raise InvalidInputError("confidences, labels and membership must describe the same records")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.confidences.shape[1]):
            raise InvalidInputError("label out of range of the confidence vectors")
        if not np.all(np.isin(self.membership, (0, 1))):
            raise InvalidInputError("membership bits must be 0 or 1")

    @classmethod
    def from_sides(cls, member_conf, member_labels, nonmember_conf, nonmember_labels):
        return cls(
            np.vstack([member_conf, nonmember_conf]),
            np.concatenate([member_labels, nonmember_labels]),
            np.concatenate([np.ones(len(member_labels), np.int64), np.zeros(len(nonmember_labels), np.int64)]),
        )

    def __len__(self):
        return self.labels.shape[0]

    @property
    def class_count(self):
        return self.confidences.shape[1]

    def n_members(self):
        return int(self.membership.sum())

    def n_nonmembers(self):
        return len(self) - self.n_members()

    def subset(self, mask):
        return MembershipRecords(self.confidences[mask], self.labels[mask], self.membership[mask])

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["membership", "label"] + [f"p{j}" for j in range(self.class_count)])
            for m, y, row in zip(self.membership, self.labels, self.confidences):
                w.writerow([int(m), int(y)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, 2:], arr[:, 1].astype(np.int64), arr[:, 0].astype(np.int64))


AttackKnowledge = MembershipRecords


def records_for(model, features, labels, membership):
    """Query ``model`` on ``features`` and package the answers."""
    labels = np.asarray(labels, dtype=np.int64)
    bits = np.full(labels.shape[0], int(membership), dtype=np.int64) if np.isscalar(membership) else membership
    return MembershipRecords(predict(model, features), labels, bits)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metric_values(kind, confidences, labels):
    """Vectorised metric over rows of ``confidences``."""
    p = np.asarray(confidences, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != p.shape[0]:
        raise InvalidInputError("one label per confidence row required")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise InvalidInputError("label out of range")
    rows = np.arange(p.shape[0])
    if kind == TOP1:
        return p.max(axis=1)
    if kind == CORRECTNESS:
        return (np.argmax(p, axis=1) == y).astype(np.float64)
    if kind == CONFIDENCE:
        return p[rows, y]
    pc = np.clip(p, PROB_EPS, 1.0)
    plogp = p * np.log(pc)
    if kind == ENTROPY:
        return -plogp.sum(axis=1)
    if kind == MENTROPY:
        f_true = p[rows, y]
        others = plogp.sum(axis=1) - plogp[rows, y]
        return -(1.0 - f_true) * np.log(pc[rows, y]) - others
    raise InvalidParameterError(f"unknown metric attack {kind!r}")


def metric_value(kind, confidence, true_label):
    """Metric of a single confidence vector."""
    return float(metric_values(kind, confidence, [true_label])[0])


# ---------------------------------------------------------------------------
# Threshold fitting
# ---------------------------------------------------------------------------


@dataclass
class ThresholdTable:
    kind: str
    direction: str | None
    global_tau: float | None = None
    per_class_tau: dict | None = None
    min_class_support: int = 2
    objective: str = "balanced"

    def tau_for(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        if self.per_class_tau is None:
            return np.full(labels.shape[0], self.global_tau, dtype=np.float64)
        return np.array([self.per_class_tau.get(int(y), self.global_tau) for y in labels])

    def to_dict(self):
        return {
            "kind": self.kind,
            "direction": self.direction,
            "global_tau": self.global_tau,
            "per_class_tau": None if self.per_class_tau is None else {str(k): v for k, v in self.per_class_tau.items()},
            "min_class_support": self.min_class_support,
            "objective": self.objective,
        }


def _score(tp, tn, n_mem, n_non, objective):
    # integer-valued so that comparisons between candidates are exact
    if objective == "balanced":
        return tp * n_non + tn * n_mem
    return tp + tn


def threshold_scores(values_mem, values_non, candidates, dirn, objective="balanced"):
    """Known-data score of every candidate threshold (vectorised)."""
    mem = np.sort(values_mem)
    non = np.sort(values_non)
    if dirn == "ge":
        tp = mem.size - np.searchsorted(mem, candidates, side="left")
        tn = np.searchsorted(non, candidates, side="left")
    else:
        tp = np.searchsorted(mem, candidates, side="right")
        tn = non.size - np.searchsorted(non, candidates, side="right")
    return _score(tp.astype(np.int64), tn.astype(np.int64), mem.size, non.size, objective)


def best_threshold(values_mem, values_non, dirn, objective="balanced"):
    """Observed value maximising the score; smallest such value on ties."""
    candidates = np.unique(np.concatenate([values_mem, values_non]))
    scores = threshold_scores(values_mem, values_non, candidates, dirn, objective)
    return float(candidates[int(np.argmax(scores))])


def fit_thresholds(kind, knowledge, min_class_support=2, objective="balanced"):
    """Fit the attacker's threshold(s) on known members and non-members.

    ``objective`` is ``"balanced"`` (mean of true-positive and true-negative
    rates) or ``"accuracy"`` (plain accuracy on the known records). Per-class
    kinds fall back to the global threshold for classes with fewer than
    ``min_class_support`` known records on either side.
    """
    if objective not in ("balanced", "accuracy"):
        raise InvalidParameterError(f"unknown threshold objective {objective!r}")
    dirn = direction(kind)
    if kind == CORRECTNESS:
        return ThresholdTable(kind, None, min_class_support=min_class_support, objective=objective)
    if knowledge.n_members() == 0 or knowledge.n_nonmembers() == 0:
        raise InvalidInputError("attack knowledge needs both members and non-members")
    values = metric_values(kind, knowledge.confidences, knowledge.labels)
    is_mem = knowledge.membership == 1
    global_tau = best_threshold(values[is_mem], values[~is_mem], dirn, objective)
    per_class = None
    if kind in _PER_CLASS_KINDS:
        per_class = {}
        for cls in range(knowledge.class_count):
            in_cls = knowledge.labels == cls
            vm, vn = values[in_cls & is_mem], values[in_cls & ~is_mem]
            if vm.size >= min_class_support and vn.size >= min_class_support:
                per_class[cls] = best_threshold(vm, vn, dirn, objective)
            else:
                per_class[cls] = global_tau
    return ThresholdTable(kind, dirn, global_tau, per_class, min_class_support, objective)


# ---------------------------------------------------------------------------
# Outcomes
# ---------------------------------------------------------------------------


@dataclass
class AttackOutcome:
    name: str
    predicted: np.ndarray
    truth: np.ndarray
    labels: np.ndarray
    per_class: dict = field(default_factory=dict)

    @property
    def n_targets(self):
        return int(self.truth.shape[0])

    @property
    def n_correct(self):
        return int(np.sum(self.predicted == self.truth))

    @property
    def attack_accuracy(self):
        return self.n_correct / self.n_targets


def _outcome(name, predicted, targets):
    predicted = np.asarray(predicted, dtype=np.int64)
    per_class = {}
    for cls in np.unique(targets.labels):
        sel = targets.labels == cls
        per_class[int(cls)] = float(np.mean(predicted[sel] == targets.membership[sel]))
    return AttackOutcome(name, predicted, targets.membership.copy(), targets.labels.copy(), per_class)


def run_metric_attack(kind, table, targets):
    """Apply a fitted threshold table to the target records."""
    if len(targets) == 0:
        raise InvalidInputError("no target records")
    if table.kind != kind:
        raise InvalidParameterError(f"threshold table for {table.kind!r} used with {kind!r}")
    values = metric_values(kind, targets.confidences, targets.labels)
    if kind == CORRECTNESS:
        pred = values == 1.0
    else:
        tau = table.tau_for(targets.labels)
        pred = values >= tau if table.direction == "ge" else values <= tau
    return _outcome(kind, pred.astype(np.int64), targets)


# ---------------------------------------------------------------------------
# ML-Leaks Adversary 1
# ---------------------------------------------------------------------------

NN_ATTACK_CONFIG = TrainConfig(learning_rate=0.05, max_epochs=100, patience_stop=20)


def attack_features(confidences, top_k=3):
    """Top-k confidences per row in descending order, zero padded."""
    p = np.asarray(confidences, dtype=np.float64)
    if p.ndim != 2:
        raise InvalidInputError("confidences must be a 2-D array")
    ordered = -np.sort(-p, axis=1)[:, :top_k]
    if ordered.shape[1] < top_k:
        ordered = np.hstack([ordered, np.zeros((p.shape[0], top_k - ordered.shape[1]))])
    return ordered


def train_nn_attack(knowledge, attack_cfg=NN_ATTACK_CONFIG, hidden=(64, 64), val_fraction=0.2):
    """Single attack classifier (class 1 = member) on sorted top-3 confidences.

    The larger membership side is down-sampled to the smaller one with the
    config's seed; a balanced ``val_fraction`` slice is held out for model
    selection.
    """
    n_mem, n_non = knowledge.n_members(), knowledge.n_nonmembers()
    if n_mem == 0 or n_non == 0:
        raise InvalidInputError("attack knowledge needs both members and non-members")
    rng = np.random.default_rng(attack_cfg.seed)
    k = min(n_mem, n_non)
    mem_idx = rng.permutation(np.flatnonzero(knowledge.membership == 1))[:k]
    non_idx = rng.permutation(np.flatnonzero(knowledge.membership == 0))[:k]
    n_val = int(round(k * val_fraction)) if k > 1 else 0
    n_val = min(max(n_val, 1), k - 1) if k > 1 else 0
    train_idx = np.concatenate([mem_idx[n_val:], non_idx[n_val:]])
    val_idx = np.concatenate([mem_idx[:n_val], non_idx[:n_val]]) if n_val else train_idx
    x = attack_features(knowledge.confidences)
    y = knowledge.membership
    model = init_mlp([x.shape[1], *hidden, 2], attack_cfg.seed)
    trained = train_model(model, Objective(0.0), x[train_idx], x[val_idx], y[val_idx], attack_cfg, train_y=y[train_idx])
    return trained.model


def run_nn_attack(attack_model, targets):
    if len(targets) == 0:
        raise InvalidInputError("no target records")
    x = attack_features(targets.confidences)
    if attack_model.input_dim != x.shape[1] or attack_model.class_count != 2:
        raise InvalidInputError(
            f"attack model expects {attack_model.input_dim} features and 2 classes; "
            f"encoding has {x.shape[1]}"
        )
    pred = np.argmax(predict(attack_model, x), axis=1)
    return _outcome(LEAKS1, pred, targets)


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def run_attack_suite(knowledge, targets, attacks=ATTACK_NAMES, attack_cfg=NN_ATTACK_CONFIG, min_class_support=2, objective="balanced"):
    """Fit on ``knowledge``, evaluate on ``targets``; returns ``{name: AttackOutcome}``."""
    outcomes = {}
    for name in ATTACK_NAMES:
        if name not in attacks:
            continue
        if name == LEAKS1:
            outcomes[name] = run_nn_attack(train_nn_attack(knowledge, attack_cfg), targets)
        else:
            table = fit_thresholds(name, knowledge, min_class_support, objective)
            outcomes[name] = run_metric_attack(name, table, targets)
    unknown = set(attacks) - set(ATTACK_NAMES)
    if unknown:
        raise InvalidParameterError(f"unknown attacks {sorted(unknown)}")
    return outcomes


def best_bb_attack(outcomes):
    """Strongest attack as ``(name, accuracy)``; ties resolved by ``ATTACK_NAMES`` order.

    ``outcomes`` maps attack names to :class:`AttackOutcome` or plain accuracies.
    """
    if not outcomes:
        raise InvalidInputError("no attack outcomes")
    acc = {k: (v.attack_accuracy if isinstance(v, AttackOutcome) else float(v)) for k, v in outcomes.items()}
    order = [n for n in ATTACK_NAMES if n in acc] + sorted(n for n in acc if n not in ATTACK_NAMES)
    best = order[0]
    for name in order[1:]:
        if acc[name] > acc[best]:
            best = name
    return best, acc[best]


OUTCOME_COLUMNS = ("attack_name", "attack_accuracy", "n_targets", "per_class_json")


def write_outcomes_csv(outcomes, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OUTCOME_COLUMNS)
        for name in [n for n in ATTACK_NAMES if n in outcomes]:
            o = outcomes[name]
            w.writerow([name, repr(o.attack_accuracy), o.n_targets, json.dumps(o.per_class, sort_keys=True)])
