"""Feed-forward Tanh networks trained with plain numpy.

Dense layers with Tanh on every hidden layer and a softmax head. Gradients
are computed analytically; the optimizer is mini-batch SGD with momentum,
L2 weight decay on weights (never biases), a reduce-on-plateau learning
rate schedule and best-validation-accuracy model selection.

All arithmetic is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    InvalidInputError,
    InvalidParameterError,
    SchemaError,
    ShapeError,
    TrainingDivergedError,
)

PROB_EPS = 1e-12
MODEL_FORMAT_VERSION = 1


def softmax(logits, temperature=1.0):
    """Temperature softmax over the last axis.

    Works on a single logit vector or on a batch (one row per sample).
    """
    z = np.asarray(logits, dtype=np.float64)
    if temperature <= 0 or not math.isfinite(temperature):
        raise InvalidInputError(f"temperature must be finite and > 0, got {temperature}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax received non-finite logits")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _clamp(p):
    return np.clip(p, PROB_EPS, 1.0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossKind:
    """One of ``cross_entropy``, ``mse`` or ``kl`` (KL with temperature)."""

    name: str
    temperature: float = 1.0

    _NAMES = ("cross_entropy", "mse", "kl")

    def __post_init__(self):
        if self.name not in self._NAMES:
            raise InvalidParameterError(f"unknown loss kind {self.name!r}")
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise InvalidParameterError(f"temperature must be > 0, got {self.temperature}")

    @classmethod
    def cross_entropy(cls):
        return cls("cross_entropy")

    @classmethod
    def mse(cls):
        return cls("mse")

    @classmethod
    def kl(cls, temperature=1.0):
        return cls("kl", float(temperature))

    @property
    def label(self):
        if self.name == "kl":
            return f"kl_T{self.temperature:g}"
        return {"cross_entropy": "ce", "mse": "mse"}[self.name]

    @classmethod
    def parse(cls, text):
        """Inverse of :attr:`label` (also accepts ``kl`` meaning T=1)."""
        text = text.strip().lower()
        if text in ("ce", "cross_entropy"):
            return cls.cross_entropy()
        if text in ("mse", "mse_on_probs"):
            return cls.mse()
        if text == "kl":
            return cls.kl(1.0)
        if text.startswith("kl_t"):
            try:
                return cls.kl(float(text[4:]))
            except ValueError:
                pass
        raise InvalidParameterError(f"cannot parse loss kind {text!r}")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} does not match target shape {b.shape}")
    return a, b


def loss_value(kind, predicted, target):
    """Per-sample loss.

    ``predicted`` holds probabilities for ``cross_entropy`` and ``mse`` and
    student logits for ``kl``. ``target`` is always a probability vector
    (one-hot allowed); for ``kl`` it is read as a teacher distribution whose
    log-probabilities act as teacher logits. Batched inputs (2-D) return one
    loss per row.
    """
    pred, tgt = _check_pair(predicted, target)
    if kind.name == "cross_entropy":
        return -np.sum(tgt * np.log(_clamp(pred)), axis=-1)
    if kind.name == "mse":
        return np.mean((pred - tgt) ** 2, axis=-1)
    t = kind.temperature
    q = softmax(np.log(_clamp(tgt)), t)
    s = softmax(pred, t)
    return t * t * np.sum(q * (np.log(_clamp(q)) - np.log(_clamp(s))), axis=-1)


def loss_from_logits(kind, logits, target):
    """Per-sample loss of a softmax head, evaluated from its logits."""
    if kind.name == "kl":
        return loss_value(kind, logits, target)
    return loss_value(kind, softmax(logits), target)


def loss_gradient(kind, logits, target):
    """Gradient of :func:`loss_from_logits` with respect to the logits."""
    z, tgt = _check_pair(logits, target)
    if kind.name == "cross_entropy":
        # valid for targets summing to one
        return softmax(z) - tgt
    if kind.name == "mse":
        p = softmax(z)
        c = p.shape[-1]
        gp = 2.0 * (p - tgt) / c
        return p * (gp - np.sum(p * gp, axis=-1, keepdims=True))
    t = kind.temperature
    q = softmax(np.log(_clamp(tgt)), t)
    return t * (softmax(z, t) - q)


@dataclass(frozen=True)
class Objective:
    """Per-sample training loss ``alpha * distill(H(x), y') + (1 - alpha) * CE(H(x), y)``.

    ``alpha = 0`` is plain cross-entropy on hard labels; ``alpha = 1`` uses
    the soft labels only. Terms with zero weight are not evaluated at all.
    """

    alpha: float = 0.0
    distill_loss: LossKind = field(default_factory=LossKind.mse)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParameterError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def uses_soft(self):
        return self.alpha > 0.0

    @property
    def uses_hard(self):
        return self.alpha < 1.0


def one_hot(labels, class_count):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], class_count))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def objective_terms(objective, logits, hard_onehot=None, soft=None):
    """Mean soft-label and hard-label losses of a batch and their logit gradients.

    Returns ``(soft_loss, soft_grad, hard_loss, hard_grad)``; a term that the
    objective does not use comes back as ``0.0`` loss and a zero gradient.
    """
    n = logits.shape[0]
    zero = np.zeros_like(logits)
    soft_loss, soft_grad, hard_loss, hard_grad = 0.0, zero, 0.0, zero
    if objective.uses_soft:
        if soft is None:
            raise InvalidInputError("objective needs soft labels but none were given")
        soft_loss = float(np.mean(loss_from_logits(objective.distill_loss, logits, soft)))
        soft_grad = loss_gradient(objective.distill_loss, logits, soft) / n
    if objective.uses_hard:
        if hard_onehot is None:
            raise InvalidInputError("objective needs hard labels but none were given")
        ce = LossKind.cross_entropy()
        hard_loss = float(np.mean(loss_from_logits(ce, logits, hard_onehot)))
        hard_grad = loss_gradient(ce, logits, hard_onehot) / n
    return soft_loss, soft_grad, hard_loss, hard_grad


def objective_loss_and_gradient(objective, logits, hard_onehot=None, soft=None):
    """Mean combined loss of a batch and its gradient w.r.t. the logits."""
    s_loss, s_grad, h_loss, h_grad = objective_terms(objective, logits, hard_onehot, soft)
    a = objective.alpha
    if a == 0.0:
        return h_loss, h_grad
    if a == 1.0:
        return s_loss, s_grad
    return a * s_loss + (1.0 - a) * h_loss, a * s_grad + (1.0 - a) * h_grad


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    """Dense network; ``weights[k]`` has shape ``(dims[k], dims[k+1])``."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias vector per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} are inconsistent")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k} input dim does not match layer {k - 1} output dim")

    @property
    def layer_dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def class_count(self):
        return self.weights[-1].shape[1]

    def copy(self):
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters_equal(self, other):
        if self.layer_dims != other.layer_dims:
            return False
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    def to_dict(self):
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "layer_dims": self.layer_dims,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise SchemaError(
                f"unsupported model format version {doc.get('format_version')!r}", "format_version"
            )
        dims = doc["layer_dims"]
        weights, biases = [], []
        for k, (flat, bias) in enumerate(zip(doc["weights"], doc["biases"])):
            if len(flat) != dims[k] * dims[k + 1]:
                raise SchemaError(f"layer {k} has {len(flat)} weights, expected {dims[k] * dims[k + 1]}", "weights")
            weights.append(np.array(flat, dtype=np.float64).reshape(dims[k], dims[k + 1]))
            biases.append(np.array(bias, dtype=np.float64))
        return cls(weights, biases)


def save_model(model, path):
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path):
    return MlpModel.from_dict(json.loads(Path(path).read_text()))


def init_mlp(layer_dims, seed):
    """Glorot-uniform weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise InvalidParameterError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


def zero_mlp(layer_dims):
    dims = [int(d) for d in layer_dims]
    return MlpModel(
        [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
        [np.zeros(b) for b in dims[1:]],
    )


def _as_inputs(model, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not match model input dim {model.input_dim}")
    return x


def logits(model, inputs):
    h = _as_inputs(model, inputs)
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        # einsum without BLAS gives each row the same result whatever the batch size
        h = np.einsum("ij,jk->ik", h, w) + b
        if k < last:
            h = np.tanh(h)
    return h


def predict(model, inputs, temperature=1.0):
    """Confidence vectors, one row per input row."""
    return softmax(logits(model, inputs), temperature)


def _forward_trace(model, x):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def _backward(model, acts, grad_logits):
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = grad_logits
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k].T) * (1.0 - acts[k] ** 2)
    return gw, gb


def batch_loss_and_gradients(model, inputs, objective, hard_labels=None, soft=None):
    """Mean objective over a batch and its gradients w.r.t. all parameters.

    Returns ``(loss, weight_grads, bias_grads)``. Weight decay is not
    included; the optimizer adds it.
    """
    x = _as_inputs(model, inputs)
    acts = _forward_trace(model, x)
    hard = None if hard_labels is None else one_hot(hard_labels, model.class_count)
    loss, g = objective_loss_and_gradient(objective, acts[-1], hard, soft)
    gw, gb = _backward(model, acts, g)
    return loss, gw, gb


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    max_epochs: int = 150
    patience_scheduler: int = 10
    patience_stop: int = 30
    lr_factor: float = 0.1
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise InvalidParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum <= 1.0:
            raise InvalidParameterError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidParameterError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidParameterError("batch_size and max_epochs must be >= 1")
        if self.patience_scheduler < 0 or self.patience_stop < 1:
            raise InvalidParameterError("invalid patience settings")

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass
class TrainedModel:
    model: MlpModel
    best_val_accuracy: float
    epochs_run: int
    final_lr: float
    best_epoch: int = 0
    history: list = field(default_factory=list)


def _val_metrics(model, x, y):
    z = _forward_trace(model, x)[-1]
    probs = softmax(z)
    loss = float(np.mean(-np.log(_clamp(probs[np.arange(len(y)), y]))))
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, acc


def train_model(
    model_init,
    objective,
    train_x,
    val_x,
    val_y,
    cfg,
    train_y=None,
    train_soft=None,
):
    """Mini-batch SGD on ``objective``; returns the best-validation snapshot.

    Per epoch: seeded shuffle, one pass of momentum SGD, then validation
    cross-entropy and accuracy. The learning rate drops by ``lr_factor`` once
    validation loss has not improved for ``patience_scheduler`` epochs and
    training stops after ``patience_stop`` such epochs. The snapshot with the
    highest validation accuracy is returned (earliest epoch wins ties).

    ``train_y`` (hard labels) is required unless ``objective.alpha == 1``;
    ``train_soft`` (teacher confidence rows) unless ``objective.alpha == 0``.
    """
    model = model_init.copy()
    x = _as_inputs(model, train_x)
    n = x.shape[0]
    vx = _as_inputs(model, val_x)
    vy = np.asarray(val_y, dtype=np.int64)
    if n == 0 or vx.shape[0] == 0:
        raise InvalidInputError("training and validation sets must be non-empty")
    if vy.shape[0] != vx.shape[0]:
        raise ShapeError("validation labels do not match validation inputs")
    c = model.class_count
    hard = None
    if objective.uses_hard:
        if train_y is None:
            raise InvalidInputError("hard labels are required for alpha < 1")
        y = np.asarray(train_y, dtype=np.int64)
        if y.shape[0] != n:
            raise ShapeError("training labels do not match training inputs")
        hard = one_hot(y, c)
    soft = None
    if objective.uses_soft:
        if train_soft is None:
            raise InvalidInputError("soft labels are required for alpha > 0")
        soft = np.asarray(train_soft, dtype=np.float64)
        if soft.shape != (n, c):
            raise ShapeError(f"soft labels have shape {soft.shape}, expected {(n, c)}")

    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    velocity_w = [np.zeros_like(w) for w in model.weights]
    velocity_b = [np.zeros_like(b) for b in model.biases]

    best_snapshot = model.copy()
    best_acc = -1.0
    best_epoch = 0
    best_val_loss = math.inf
    bad_sched = 0
    bad_stop = 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            acts = _forward_trace(model, x[idx])
            if not np.all(np.isfinite(acts[-1])):
                raise TrainingDivergedError(epoch, "non-finite logits")
            loss, g = objective_loss_and_gradient(
                objective,
                acts[-1],
                None if hard is None else hard[idx],
                None if soft is None else soft[idx],
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            gw, gb = _backward(model, acts, g)
            for k in range(len(model.weights)):
                gw[k] += cfg.weight_decay * model.weights[k]
                velocity_w[k] *= cfg.momentum
                velocity_w[k] += gw[k]
                velocity_b[k] *= cfg.momentum
                velocity_b[k] += gb[k]
                model.weights[k] -= lr * velocity_w[k]
                model.biases[k] -= lr * velocity_b[k]

        if not all(np.all(np.isfinite(w)) for w in model.weights + model.biases):
            raise TrainingDivergedError(epoch, "non-finite parameters")
        val_loss, val_acc = _val_metrics(model, vx, vy)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "non-finite validation loss")
        history.append((epoch, lr, val_loss, val_acc))

        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_snapshot = model.copy()

        # relative threshold 1e-4, as in the common plateau scheduler
        if val_loss < best_val_loss * (1.0 - 1e-4):
            best_val_loss = val_loss
            bad_sched = 0
            bad_stop = 0
        else:
            bad_sched += 1
            bad_stop += 1
        if bad_sched >= cfg.patience_scheduler and cfg.patience_scheduler > 0:
            lr = max(lr * cfg.lr_factor, cfg.min_lr) if lr > cfg.min_lr else lr
            bad_sched = 0
        if bad_stop >= cfg.patience_stop:
            break

    return TrainedModel(
        model=best_snapshot,
        best_val_accuracy=best_acc,
        epochs_run=epoch,
        final_lr=lr,
        best_epoch=best_epoch,
        history=history,
    )
