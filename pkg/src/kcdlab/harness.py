"""Experiment orchestration: spec files, best-of-trials runs, sweeps, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attacks import (
    ATTACK_NAMES,
    NN_ATTACK_CONFIG,
    MembershipRecords,
    best_bb_attack,
    run_attack_suite,
)
from .data import (
    DESK_SCALE_FACTOR,
    TABLE2_TABULAR,
    LabeledDataset,
    SplitPlan,
    SplitSizes,
    SyntheticSpec,
    accuracy,
    generate_synthetic,
    load_csv,
    make_split_plan,
)
from .defenses import DEFENSES, DefenseConfig, train_defense
from .errors import InvalidParameterError, KcdLabError, SchemaError
from .nn import LossKind, TrainConfig, predict

log = logging.getLogger(__name__)

SPEC_FORMAT_VERSION = 1
BUNDLED_SPEC = Path(__file__).with_name("specs") / "desk_scale.json"

# ---------------------------------------------------------------------------
# Spec
# ---------------------------------------------------------------------------

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
_DEFENSE_KEYS = ("hidden", "alpha", "teacher_count", "distill_loss", "reference_size", "theta", "workers")
_SYNTH_KEYS = tuple(f.name for f in fields(SyntheticSpec))
_CSV_KEYS = ("path", "label_column", "delimiter")
_SPLIT_ROLES = tuple(f.name for f in fields(SplitSizes))
_TOP_KEYS = (
    "format_version",
    "dataset",
    "split",
    "defense",
    "defense_config",
    "train",
    "student_train",
    "attack_train",
    "attacks",
    "trials",
    "seed",
    "threshold_objective",
    "min_class_support",
    "aggregate",
    "record_timing",
)


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: object = field(default_factory=SyntheticSpec)  # SyntheticSpec or dict(path, label_column, delimiter)
    split: SplitSizes = field(default_factory=lambda: TABLE2_TABULAR.scaled(DESK_SCALE_FACTOR))
    defense: str = "unprotected"
    defense_config: DefenseConfig = field(default_factory=DefenseConfig)
    attack_cfg: TrainConfig = NN_ATTACK_CONFIG
    attacks: tuple = ATTACK_NAMES
    trials: int = 5
    seed: int = 0
    threshold_objective: str = "balanced"
    min_class_support: int = 2
    aggregate: str = "best"
    record_timing: bool = True

    def __post_init__(self):
        if self.trials < 1:
            raise SchemaError("trials must be >= 1", "trials")
        if not self.attacks:
            raise SchemaError("attack selection must be non-empty", "attacks")
        bad = [a for a in self.attacks if a not in ATTACK_NAMES]
        if bad:
            raise SchemaError(f"unknown attacks {bad}; choose from {list(ATTACK_NAMES)}", "attacks")
        if self.defense not in DEFENSES:
            raise SchemaError(f"unknown defense {self.defense!r}; choose from {list(DEFENSES)}", "defense")
        if self.aggregate not in ("best", "mean"):
            raise SchemaError("aggregate must be 'best' or 'mean'", "aggregate")
        if self.threshold_objective not in ("balanced", "accuracy"):
            raise SchemaError("threshold_objective must be 'balanced' or 'accuracy'", "threshold_objective")

    def replace(self, **kw):
        return replace(self, **kw)

    def with_defense(self, **kw):
        return replace(self, defense_config=replace(self.defense_config, **kw))


def _reject_unknown(doc, allowed, where):
    if not isinstance(doc, dict):
        raise SchemaError("expected a JSON object", where or "<root>")
    for key in doc:
        if key not in allowed:
            path = f"{where}.{key}" if where else key
            raise SchemaError(f"unknown field (allowed: {', '.join(allowed)})", path)


def _train_cfg_from(doc, where, base=None):
    base = base or TrainConfig()
    if doc is None:
        return base
    _reject_unknown(doc, _TRAIN_KEYS, where)
    try:
        return replace(base, **doc)
    except (TypeError, KcdLabError) as exc:
        raise SchemaError(str(exc), where) from None


def _train_cfg_to(cfg, base=TrainConfig()):
    return {k: getattr(cfg, k) for k in _TRAIN_KEYS}


def spec_from_dict(doc):
    """Build an :class:`ExperimentSpec`; unknown or malformed fields raise ``SchemaError``."""
    _reject_unknown(doc, _TOP_KEYS, "")
    if doc.get("format_version") != SPEC_FORMAT_VERSION:
        raise SchemaError(f"expected {SPEC_FORMAT_VERSION}, got {doc.get('format_version')!r}", "format_version")
    kw = {}

    ds = doc.get("dataset", {"kind": "synthetic"})
    if not isinstance(ds, dict) or "kind" not in ds:
        raise SchemaError("dataset needs a 'kind' of 'synthetic' or 'csv'", "dataset.kind")
    body = {k: v for k, v in ds.items() if k != "kind"}
    if ds["kind"] == "synthetic":
        _reject_unknown(body, _SYNTH_KEYS, "dataset")
        try:
            kw["dataset"] = SyntheticSpec(**body)
        except (TypeError, KcdLabError) as exc:
            raise SchemaError(str(exc), "dataset") from None
    elif ds["kind"] == "csv":
        _reject_unknown(body, _CSV_KEYS, "dataset")
        if "path" not in body:
            raise SchemaError("csv dataset needs a path", "dataset.path")
        kw["dataset"] = {"path": str(body["path"]), "label_column": body.get("label_column", "label"), "delimiter": body.get("delimiter", ",")}
    else:
        raise SchemaError(f"unknown dataset kind {ds['kind']!r}", "dataset.kind")

    split = doc.get("split", {"scale": DESK_SCALE_FACTOR})
    if isinstance(split, dict) and set(split) == {"scale"}:
        scale = split["scale"]
        if not isinstance(scale, (int, float)) or scale <= 0:
            raise SchemaError("scale must be a positive number", "split.scale")
        kw["split"] = TABLE2_TABULAR.scaled(scale)
    else:
        _reject_unknown(split, _SPLIT_ROLES, "split")
        missing = [r for r in _SPLIT_ROLES if r not in split]
        if missing:
            raise SchemaError("explicit split sizes need every role", f"split.{missing[0]}")
        kw["split"] = SplitSizes(**{r: int(split[r]) for r in _SPLIT_ROLES})

    dc = doc.get("defense_config", {})
    _reject_unknown(dc, _DEFENSE_KEYS, "defense_config")
    dkw = dict(dc)
    if "hidden" in dkw:
        dkw["hidden"] = tuple(int(h) for h in dkw["hidden"])
    if "distill_loss" in dkw:
        try:
            dkw["distill_loss"] = LossKind.parse(str(dkw["distill_loss"]))
        except KcdLabError as exc:
            raise SchemaError(str(exc), "defense_config.distill_loss") from None
    dkw["train_cfg"] = _train_cfg_from(doc.get("train"), "train")
    if doc.get("student_train") is not None:
        dkw["student_cfg"] = _train_cfg_from(doc["student_train"], "student_train", dkw["train_cfg"])
    try:
        kw["defense_config"] = DefenseConfig(**dkw)
    except (TypeError, KcdLabError) as exc:
        raise SchemaError(str(exc), "defense_config") from None

    kw["attack_cfg"] = _train_cfg_from(doc.get("attack_train"), "attack_train", NN_ATTACK_CONFIG)
    for key in ("defense", "trials", "seed", "threshold_objective", "min_class_support", "aggregate", "record_timing"):
        if key in doc:
            kw[key] = doc[key]
    if "attacks" in doc:
        if not isinstance(doc["attacks"], list):
            raise SchemaError("attacks must be a list", "attacks")
        kw["attacks"] = tuple(doc["attacks"])
    for key in ("trials", "seed", "min_class_support"):
        if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
            raise SchemaError("must be an integer", key)
    return ExperimentSpec(**kw)


def spec_to_dict(spec):
    if isinstance(spec.dataset, SyntheticSpec):
        ds = {"kind": "synthetic", **spec.dataset.to_dict()}
    else:
        ds = {"kind": "csv", **spec.dataset}
    dc = spec.defense_config
    doc = {
        "format_version": SPEC_FORMAT_VERSION,
        "dataset": ds,
        "split": asdict(spec.split),
        "defense": spec.defense,
        "defense_config": {
            "hidden": list(dc.hidden),
            "alpha": dc.alpha,
            "teacher_count": dc.teacher_count,
            "distill_loss": dc.distill_loss.label,
            "reference_size": dc.reference_size,
            "theta": dc.theta,
            "workers": dc.workers,
        },
        "train": _train_cfg_to(dc.train_cfg),
        "student_train": None if dc.student_cfg is None else _train_cfg_to(dc.student_cfg),
        "attack_train": _train_cfg_to(spec.attack_cfg),
        "attacks": list(spec.attacks),
        "trials": spec.trials,
        "seed": spec.seed,
        "threshold_objective": spec.threshold_objective,
        "min_class_support": spec.min_class_support,
        "aggregate": spec.aggregate,
        "record_timing": spec.record_timing,
    }
    return doc


def load_spec(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", "<file>") from None
    return spec_from_dict(doc)


def default_spec():
    """The desk-scale regime (bundled as ``specs/desk_scale.json``)."""
    return load_spec(BUNDLED_SPEC)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    dataset: LabeledDataset
    plan: SplitPlan

    def part(self, role):
        return self.dataset.subset(getattr(self.plan, role))


def build_dataset(spec):
    if isinstance(spec.dataset, SyntheticSpec):
        return generate_synthetic(spec.dataset)
    return load_csv(spec.dataset["path"], spec.dataset["label_column"], spec.dataset["delimiter"])


def prepare(spec):
    dataset = build_dataset(spec)
    return Prepared(dataset, make_split_plan(dataset, spec.split, spec.seed))


class StageError(KcdLabError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


CSV_COLUMNS = (
    "defense",
    "alpha",
    "n_teachers",
    "theta",
    "reference_size",
    "loss_kind",
    "seed",
    "train_acc",
    "test_acc",
    "gen_gap",
    "acc_leaks1",
    "acc_top1",
    "acc_correctness",
    "acc_confidence",
    "acc_entropy",
    "acc_mentropy",
    "best_bb",
    "wall_seconds",
)
_ACC_COLUMN = {name: f"acc_{name}" for name in ATTACK_NAMES}


@dataclass
class ReportRow:
    defense: str
    alpha: float | None = None
    n_teachers: int | None = None
    theta: float | None = None
    reference_size: int | None = None
    loss_kind: str | None = None
    seed: int = 0
    train_acc: float | None = None
    test_acc: float | None = None
    gen_gap: float | None = None
    attack_acc: dict = field(default_factory=dict)
    best_bb: float | None = None
    best_bb_name: str | None = None
    wall_seconds: float | None = None
    error: str | None = None

    def to_record(self):
        rec = {
            "defense": self.defense,
            "alpha": self.alpha,
            "n_teachers": self.n_teachers,
            "theta": self.theta,
            "reference_size": self.reference_size,
            "loss_kind": self.loss_kind,
            "seed": self.seed,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "gen_gap": self.gen_gap,
        }
        for name in ATTACK_NAMES:
            rec[_ACC_COLUMN[name]] = self.attack_acc.get(name)
        rec["best_bb"] = self.best_bb
        rec["wall_seconds"] = self.wall_seconds
        return rec

    def to_json_obj(self):
        obj = self.to_record()
        obj["best_bb_name"] = self.best_bb_name
        obj["error"] = self.error
        return obj

    @classmethod
    def from_record(cls, rec):
        def num(key, conv=float):
            v = rec.get(key)
            if v is None or v == "":
                return None
            return conv(v)

        attack_acc = {}
        for name in ATTACK_NAMES:
            v = num(_ACC_COLUMN[name])
            if v is not None:
                attack_acc[name] = v
        return cls(
            defense=rec["defense"],
            alpha=num("alpha"),
            n_teachers=num("n_teachers", int),
            theta=num("theta"),
            reference_size=num("reference_size", int),
            loss_kind=rec.get("loss_kind") or None,
            seed=int(rec.get("seed") or 0),
            train_acc=num("train_acc"),
            test_acc=num("test_acc"),
            gen_gap=num("gen_gap"),
            attack_acc=attack_acc,
            best_bb=num("best_bb"),
            best_bb_name=rec.get("best_bb_name") or None,
            wall_seconds=num("wall_seconds"),
            error=rec.get("error") or None,
        )

    def metrics(self):
        """The outcome fields, without config echo or timing."""
        return (self.train_acc, self.test_acc, self.gen_gap, tuple(sorted(self.attack_acc.items())), self.best_bb, self.best_bb_name)


def config_echo(spec):
    """Knobs relevant to the chosen defense; the rest stay empty."""
    dc = spec.defense_config
    echo = {"alpha": None, "n_teachers": None, "theta": None, "reference_size": None, "loss_kind": None}
    if spec.defense == "kcd":
        echo.update(alpha=dc.alpha, n_teachers=dc.teacher_count, loss_kind=dc.distill_loss.label)
    elif spec.defense == "dmp":
        echo.update(reference_size=dc.reference_size if dc.reference_size is not None else spec.split.reference, loss_kind=dc.distill_loss.label)
    elif spec.defense in ("splitting_dmp", "reusing_dmp"):
        echo.update(theta=dc.theta, loss_kind=dc.distill_loss.label)
    return echo


@dataclass
class ExperimentResult:
    row: ReportRow
    chosen_trial: int
    trial_val_accuracies: list
    defense_result: object
    prepared: Prepared


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tagged
        raise StageError(name, exc) from exc


def train_trials(spec, prepared):
    """Run ``spec.trials`` seeded trainings; seeds are ``spec.seed + t``."""
    train = prepared.part("train_all")
    val = prepared.part("validation")
    reference = prepared.part("reference")
    results = []
    for t in range(spec.trials):
        cfg = spec.defense_config.with_seed(spec.seed + t)
        results.append(
            train_defense(
                spec.defense,
                train,
                val,
                cfg,
                reference=reference,
                train_ids=prepared.plan.train_all,
                reference_ids=prepared.plan.reference,
            )
        )
    return results


def attack_sets(model, prepared):
    """Attacker knowledge (known splits) and balanced targets (target splits)."""
    ds, plan = prepared.dataset, prepared.plan
    knowledge = MembershipRecords.from_sides(
        predict(model, ds.features[plan.train_known]),
        ds.labels[plan.train_known],
        predict(model, ds.features[plan.test_known]),
        ds.labels[plan.test_known],
    )
    targets = MembershipRecords.from_sides(
        predict(model, ds.features[plan.train_target]),
        ds.labels[plan.train_target],
        predict(model, ds.features[plan.test_target]),
        ds.labels[plan.test_target],
    )
    if targets.n_members() != targets.n_nonmembers():
        raise InvalidParameterError(
            f"unbalanced targets: {targets.n_members()} members vs {targets.n_nonmembers()} non-members"
        )
    return knowledge, targets


def evaluate_model(model, spec, prepared):
    """Train/test accuracy plus every selected attack's accuracy."""
    train_acc = accuracy(model, prepared.part("train_all"))
    test_acc = accuracy(model, prepared.part("test_all"))
    knowledge, targets = attack_sets(model, prepared)
    outcomes = run_attack_suite(
        knowledge,
        targets,
        spec.attacks,
        spec.attack_cfg.with_seed(spec.seed),
        spec.min_class_support,
        spec.threshold_objective,
    )
    return train_acc, test_acc, outcomes


def run_experiment_full(spec, prepared=None):
    start = time.perf_counter()
    if prepared is None:
        prepared = _stage("data", prepare, spec)
    results = _stage("train", train_trials, spec, prepared)
    val_accs = [r.trained.best_val_accuracy for r in results]
    chosen = int(np.argmax(val_accs))  # earliest trial wins ties

    if spec.aggregate == "best":
        train_acc, test_acc, outcomes = _stage("attack", evaluate_model, results[chosen].model, spec, prepared)
        attack_acc = {k: o.attack_accuracy for k, o in outcomes.items()}
    else:
        evals = [_stage("attack", evaluate_model, r.model, spec, prepared) for r in results]
        train_acc = float(np.mean([e[0] for e in evals]))
        test_acc = float(np.mean([e[1] for e in evals]))
        attack_acc = {k: float(np.mean([e[2][k].attack_accuracy for e in evals])) for k in evals[0][2]}
    best_name, best_acc = best_bb_attack(attack_acc)
    row = ReportRow(
        defense=spec.defense,
        seed=spec.seed,
        train_acc=train_acc,
        test_acc=test_acc,
        gen_gap=train_acc - test_acc,
        attack_acc=attack_acc,
        best_bb=best_acc,
        best_bb_name=best_name,
        wall_seconds=round(time.perf_counter() - start, 3) if spec.record_timing else None,
        **config_echo(spec),
    )
    return ExperimentResult(row, chosen, val_accs, results[chosen], prepared)


def run_experiment(spec, prepared=None):
    """Best-of-trials training, evaluation and the attack suite; one :class:`ReportRow`."""
    return run_experiment_full(spec, prepared).row


SWEEP_PARAMETERS = {
    "alpha": ("kcd", "alpha"),
    "teacher_count": ("kcd", "teacher_count"),
    "reference_size": ("dmp", "reference_size"),
    "theta_split": ("splitting_dmp", "theta"),
    "theta_reuse": ("reusing_dmp", "theta"),
}


def sweep_point_spec(spec, parameter, value):
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidParameterError(f"unknown sweep parameter {parameter!r}; choose from {list(SWEEP_PARAMETERS)}")
    defense, key = SWEEP_PARAMETERS[parameter]
    if key in ("teacher_count", "reference_size"):
        value = int(value)
    else:
        value = float(value)
    return replace(spec, defense=defense, defense_config=replace(spec.defense_config, **{key: value}))


def _sweep_point(args):
    spec, parameter, value, prepared = args
    try:
        point = sweep_point_spec(spec, parameter, value)
        return run_experiment(point, prepared)
    except Exception as exc:  # noqa: BLE001 - a failed point becomes an error row
        log.warning("sweep point %s=%r failed: %s", parameter, value, exc)
        defense = SWEEP_PARAMETERS.get(parameter, (spec.defense,))[0]
        echo = config_echo(replace(spec, defense=defense))
        if parameter in SWEEP_PARAMETERS:
            echo[{"alpha": "alpha", "teacher_count": "n_teachers", "reference_size": "reference_size"}.get(parameter, "theta")] = value
        return ReportRow(defense=defense, seed=spec.seed, error=f"{type(exc).__name__}: {exc}", **echo)


def sweep(spec, parameter, grid, prepared=None, parallel=1):
    """One experiment per grid value on a shared dataset and split plan."""
    grid = list(grid)
    if not grid:
        raise InvalidParameterError("sweep grid is empty")
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidParameterError(f"unknown sweep parameter {parameter!r}; choose from {list(SWEEP_PARAMETERS)}")
    if prepared is None:
        prepared = _stage("data", prepare, spec)
    jobs = [(spec, parameter, v, prepared) for v in grid]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(job) for job in jobs]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in rows:
        rec = row.to_record()
        w.writerow([_cell(rec[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_to_json_text(rows):
    return json.dumps([r.to_json_obj() for r in rows], indent=2) + "\n"


def rows_from_csv_text(text):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise SchemaError(f"unexpected report columns {reader.fieldnames}", "header")
    return [ReportRow.from_record(rec) for rec in reader]


def rows_from_json_text(text):
    return [ReportRow.from_record(obj) for obj in json.loads(text)]


def emit_report(rows, path, fmt=None):
    """Write rows as CSV (fixed column order) or JSON (array of row objects)."""
    rows = list(rows)
    if not rows:
        raise InvalidParameterError("no rows to report")
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    text = rows_to_json_text(rows) if fmt == "json" else rows_to_csv_text(rows)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def read_report(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return rows_from_json_text(text)
    return rows_from_csv_text(text)


def mean_of(rows, attr):
    vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
    return float(np.mean(vals)) if vals else math.nan
