import pytest

from kcdlab.data import LabeledDataset, SplitSizes, SyntheticSpec
from kcdlab.defenses import DefenseConfig
from kcdlab.harness import ExperimentSpec
from kcdlab.nn import TrainConfig

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        _ACCEPTANCE[number] = (report.outcome, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        outcome, title, detail = _ACCEPTANCE[criterion]
        mark = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{mark}] criterion {criterion:>2}: {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


def random_dataset(rng, n, d, c):
    """Continuous features so every row is unique."""
    return LabeledDataset(rng.normal(size=(n, d)), rng.integers(0, c, size=n), c)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(learning_rate=0.1, max_epochs=15, patience_stop=10, seed=3)


@pytest.fixture
def tiny_spec():
    """A seconds-scale experiment on 4-class synthetic data."""
    return ExperimentSpec(
        dataset=SyntheticSpec(class_count=4, feature_dim=20, samples_per_class=150, flip_noise=0.3, seed=1),
        split=SplitSizes(
            train_all=200,
            train_known=100,
            train_target=50,
            reference=100,
            validation=100,
            test_all=100,
            test_known=50,
            test_target=50,
        ),
        defense="unprotected",
        defense_config=DefenseConfig(
            hidden=(16,),
            teacher_count=3,
            train_cfg=TrainConfig(learning_rate=0.1, max_epochs=12, patience_stop=8),
            student_cfg=TrainConfig(learning_rate=0.5, max_epochs=12, patience_stop=8),
        ),
        attack_cfg=TrainConfig(learning_rate=0.05, max_epochs=10, patience_stop=5),
        trials=2,
        seed=7,
        record_timing=False,
    )
