"""Membership-inference defenses by knowledge distillation, and the attacks that measure them."""

from .attacks import (
    ATTACK_NAMES,
    AttackKnowledge,
    AttackOutcome,
    MembershipRecords,
    ThresholdTable,
    best_bb_attack,
    fit_thresholds,
    metric_value,
    run_metric_attack,
    run_nn_attack,
    train_nn_attack,
)
from .data import (
    FoldAssignment,
    LabeledDataset,
    SplitPlan,
    SplitSizes,
    SyntheticSpec,
    accuracy,
    generate_synthetic,
    load_csv,
    make_split_plan,
    partition_folds,
)
from .defenses import (
    DefenseConfig,
    SoftLabeledDataset,
    build_soft_labels,
    train_dmp,
    train_kcd,
    train_reusing_dmp,
    train_splitting_dmp,
    train_unprotected,
)
from .harness import ExperimentSpec, ReportRow, emit_report, run_experiment, sweep
from .nn import LossKind, MlpModel, Objective, TrainConfig, TrainedModel, predict, softmax, train_model

__version__ = "0.1.0"

__all__ = [
    "ATTACK_NAMES",
    "AttackKnowledge",
    "AttackOutcome",
    "DefenseConfig",
    "ExperimentSpec",
    "FoldAssignment",
    "LabeledDataset",
    "LossKind",
    "MembershipRecords",
    "MlpModel",
    "Objective",
    "ReportRow",
    "SoftLabeledDataset",
    "SplitPlan",
    "SplitSizes",
    "SyntheticSpec",
    "ThresholdTable",
    "TrainConfig",
    "TrainedModel",
    "accuracy",
    "best_bb_attack",
    "build_soft_labels",
    "emit_report",
    "fit_thresholds",
    "generate_synthetic",
    "load_csv",
    "make_split_plan",
    "metric_value",
    "partition_folds",
    "predict",
    "run_experiment",
    "run_metric_attack",
    "run_nn_attack",
    "softmax",
    "sweep",
    "train_dmp",
    "train_kcd",
    "train_model",
    "train_nn_attack",
    "train_reusing_dmp",
    "train_splitting_dmp",
    "train_unprotected",
]
