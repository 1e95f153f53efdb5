import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kcdlab.attacks import (
    ATTACK_NAMES,
    AttackOutcome,
    MembershipRecords,
    attack_features,
    best_bb_attack,
    fit_thresholds,
    metric_value,
    metric_values,
    run_attack_suite,
    run_metric_attack,
    run_nn_attack,
    train_nn_attack,
    write_outcomes_csv,
)
from kcdlab.errors import InvalidInputError, InvalidParameterError
from kcdlab.nn import TrainConfig, zero_mlp

FAST_ATTACK = TrainConfig(learning_rate=0.05, max_epochs=30, patience_stop=10, seed=4)


def naive_metric(kind, f, label):
    """Direct loop evaluation of the metric formulas."""
    clamp = lambda v: min(max(v, 1e-12), 1.0)
    if kind == "top1":
        return max(f)
    if kind == "correctness":
        best = 0
        for i in range(len(f)):
            if f[i] > f[best]:
                best = i
        return 1.0 if best == label else 0.0
    if kind == "confidence":
        return f[label]
    if kind == "entropy":
        return -sum(v * math.log(clamp(v)) for v in f)
    if kind == "mentropy":
        total = -(1 - f[label]) * math.log(clamp(f[label]))
        for i, v in enumerate(f):
            if i != label:
                total -= v * math.log(clamp(v))
        return total
    raise ValueError(kind)


def balanced_accuracy(values_mem, values_non, tau, dirn):
    hit = (lambda v: v >= tau) if dirn == "ge" else (lambda v: v <= tau)
    tpr = Fraction(sum(hit(v) for v in values_mem), len(values_mem))
    tnr = Fraction(sum(not hit(v) for v in values_non), len(values_non))
    return (tpr + tnr) / 2


def knowledge_from_values(kind, mem_values, non_values, c=2):
    """Confidence rows whose metric equals the given values (label 0)."""
    def rows(vals):
        return np.array([[v, 1 - v] for v in vals])

    assert kind == "confidence"
    return MembershipRecords.from_sides(rows(mem_values), np.zeros(len(mem_values), int), rows(non_values), np.zeros(len(non_values), int))


def random_records(rng, n, c, member_frac=0.5, sharpen=1.0):
    conf = rng.dirichlet(np.ones(c) * sharpen, size=n)
    labels = rng.integers(0, c, n)
    member = (rng.random(n) < member_frac).astype(int)
    return MembershipRecords(conf, labels, member)


class TestMetrics:
    def test_uniform_entropy(self):
        assert metric_value("entropy", np.full(10, 0.1), 3) == pytest.approx(math.log(10), abs=1e-12)
        assert metric_value("entropy", np.full(10, 0.1), 3) == pytest.approx(2.302585, abs=1e-6)

    def test_mentropy_one_hot(self):
        assert metric_value("mentropy", [0.0, 1.0, 0.0], 1) == 0.0

    def test_mentropy_half(self):
        assert metric_value("mentropy", [0.5, 0.5], 0) == pytest.approx(0.693147, abs=1e-6)

    def test_mentropy_equals_entropy_at_half(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            rest = rng.dirichlet(np.ones(4)) * 0.5
            f = np.concatenate([[0.5], rest])
            assert metric_value("mentropy", f, 0) == pytest.approx(metric_value("entropy", f, 0), abs=1e-12)

    def test_simple_values(self):
        f = [0.2, 0.7, 0.1]
        assert metric_value("top1", f, 0) == 0.7
        assert metric_value("confidence", f, 0) == 0.2
        assert metric_value("correctness", f, 1) == 1.0
        assert metric_value("correctness", [0.5, 0.5], 1) == 0.0

    @pytest.mark.parametrize("kind", ["top1", "correctness", "confidence", "entropy", "mentropy"])
    def test_naive_oracle(self, kind):
        rng = np.random.default_rng(1 + len(kind))
        conf = rng.dirichlet(np.full(7, 0.3), size=2000)
        labels = rng.integers(0, 7, 2000)
        vals = metric_values(kind, conf, labels)
        for f, y, v in zip(conf, labels, vals):
            assert abs(v - naive_metric(kind, f.tolist(), int(y))) <= 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(InvalidInputError):
            metric_value("confidence", [0.5, 0.5], 2)

    def test_unknown_kind(self):
        with pytest.raises(InvalidParameterError):
            metric_values("loss", [[0.5, 0.5]], [0])


class TestThresholds:
    def test_separable_example(self):
        know = knowledge_from_values("confidence", [0.9, 0.8], [0.3, 0.4])
        table = fit_thresholds("confidence", know)
        assert table.global_tau == 0.8
        assert table.per_class_tau[0] == 0.8
        assert run_metric_attack("confidence", table, know).attack_accuracy == 1.0

    def test_le_direction(self):
        mem = np.array([[0.99, 0.01], [0.95, 0.05]])
        non = np.array([[0.6, 0.4], [0.5, 0.5]])
        know = MembershipRecords.from_sides(mem, [0, 0], non, [0, 0])
        table = fit_thresholds("entropy", know)
        assert table.direction == "le"
        assert table.global_tau == pytest.approx(metric_value("entropy", mem[1], 0))
        assert run_metric_attack("entropy", table, know).attack_accuracy == 1.0

    def test_identical_distributions(self):
        rng = np.random.default_rng(2)
        conf = rng.dirichlet(np.ones(3), size=400)
        know = MembershipRecords.from_sides(conf[:200], np.zeros(200, int), conf[200:], np.zeros(200, int))
        table = fit_thresholds("top1", know)
        vals = metric_values("top1", know.confidences, know.labels)
        mem, non = vals[:200], vals[200:]
        best = max(balanced_accuracy(mem, non, t, "ge") for t in np.unique(vals))
        assert balanced_accuracy(mem, non, table.global_tau, "ge") == best
        assert abs(float(best) - 0.5) <= 0.1

    def test_per_class_fallback(self):
        rng = np.random.default_rng(3)
        conf = rng.dirichlet(np.ones(3), size=60)
        labels = np.array([0] * 25 + [1] * 25 + [2] * 10)
        member = np.array(([1, 0] * 30))
        member[50:] = [1] + [0] * 9  # class 2 has a single member
        know = MembershipRecords(conf, labels, member)
        table = fit_thresholds("confidence", know)
        assert table.per_class_tau[2] == table.global_tau
        table_high = fit_thresholds("confidence", know, min_class_support=20)
        assert all(v == table_high.global_tau for v in table_high.per_class_tau.values())

    def test_top1_global_only(self):
        know = random_records(np.random.default_rng(4), 100, 4)
        assert fit_thresholds("top1", know).per_class_tau is None

    def test_correctness_has_no_thresholds(self):
        table = fit_thresholds("correctness", random_records(np.random.default_rng(5), 20, 3))
        assert table.global_tau is None and table.per_class_tau is None

    def test_ties_choose_smallest(self):
        know = knowledge_from_values("confidence", [0.9], [0.1])
        # candidates 0.1 (tpr 1, tnr 0) and 0.9 (tpr 1, tnr 1): 0.9 is strictly best
        assert fit_thresholds("confidence", know).global_tau == 0.9
        know = knowledge_from_values("confidence", [0.5, 0.5], [0.5, 0.5])
        assert fit_thresholds("confidence", know).global_tau == 0.5

    def test_one_sided_knowledge(self):
        know = MembershipRecords([[0.9, 0.1], [0.8, 0.2]], [0, 0], [1, 1])
        with pytest.raises(InvalidInputError):
            fit_thresholds("confidence", know)

    def test_accuracy_objective(self):
        know = knowledge_from_values("confidence", [0.9, 0.8, 0.7, 0.6], [0.65])
        assert fit_thresholds("confidence", know, objective="accuracy").objective == "accuracy"
        with pytest.raises(InvalidParameterError):
            fit_thresholds("confidence", know, objective="f1")

    @settings(max_examples=60, deadline=None)
    @given(
        st.sampled_from(["top1", "confidence", "entropy", "mentropy"]),
        st.integers(0, 10_000),
        st.integers(2, 40),
        st.integers(2, 40),
    )
    def test_optimal_among_candidates(self, kind, seed, n_mem, n_non):
        rng = np.random.default_rng(seed)
        # coarse grid of probabilities so ties are frequent
        raw = rng.integers(1, 5, size=(n_mem + n_non, 3)).astype(float)
        conf = raw / raw.sum(axis=1, keepdims=True)
        labels = np.zeros(n_mem + n_non, int)
        know = MembershipRecords(conf, labels, np.r_[np.ones(n_mem, int), np.zeros(n_non, int)])
        table = fit_thresholds(kind, know)
        vals = metric_values(kind, conf, labels)
        mem, non = vals[:n_mem].tolist(), vals[n_mem:].tolist()
        scores = {t: balanced_accuracy(mem, non, t, table.direction) for t in sorted(set(vals.tolist()))}
        best = max(scores.values())
        assert scores[table.global_tau] == best
        assert table.global_tau == min(t for t, s in scores.items() if s == best)


class TestMetricAttack:
    def test_all_member_prediction(self):
        know = knowledge_from_values("confidence", [0.2, 0.3], [0.9, 0.8])
        table = fit_thresholds("confidence", know)
        table.global_tau = 0.0
        table.per_class_tau = {0: 0.0}
        assert run_metric_attack("confidence", table, know).attack_accuracy == 0.5

    def test_correctness_identity(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n, c = int(rng.integers(1, 40)), int(rng.integers(2, 6))
            mem_conf, non_conf = rng.dirichlet(np.ones(c), size=n), rng.dirichlet(np.ones(c), size=n)
            mem_y, non_y = rng.integers(0, c, n), rng.integers(0, c, n)
            targets = MembershipRecords.from_sides(mem_conf, mem_y, non_conf, non_y)
            out = run_metric_attack("correctness", fit_thresholds("correctness", targets), targets)
            acc_mem = Fraction(int(np.sum(np.argmax(mem_conf, 1) == mem_y)), n)
            acc_non = Fraction(int(np.sum(np.argmax(non_conf, 1) == non_y)), n)
            assert Fraction(out.n_correct, out.n_targets) == (acc_mem + 1 - acc_non) / 2

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        know = random_records(rng, 200, 4)
        targets = random_records(rng, 100, 4)
        perm = rng.permutation(100)
        for kind in ("top1", "confidence", "entropy", "mentropy", "correctness"):
            table = fit_thresholds(kind, know)
            a = run_metric_attack(kind, table, targets)
            b = run_metric_attack(kind, table, targets.subset(perm))
            assert a.attack_accuracy == b.attack_accuracy
            np.testing.assert_array_equal(a.predicted[perm], b.predicted)

    def test_empty_targets(self):
        know = knowledge_from_values("confidence", [0.9], [0.1])
        with pytest.raises(InvalidInputError):
            run_metric_attack("confidence", fit_thresholds("confidence", know), know.subset(np.zeros(2, bool)))

    def test_kind_mismatch(self):
        know = knowledge_from_values("confidence", [0.9], [0.1])
        with pytest.raises(InvalidParameterError):
            run_metric_attack("entropy", fit_thresholds("confidence", know), know)


def separable_records(rng, n, c=10):
    mem = np.eye(c)[rng.integers(0, c, n)]
    non = np.full((n, c), 1.0 / c)
    return MembershipRecords.from_sides(mem, rng.integers(0, c, n), non, rng.integers(0, c, n))


class TestNnAttack:
    def test_encoding_oracle(self):
        rng = np.random.default_rng(8)
        conf = rng.dirichlet(np.ones(6), size=100)
        feats = attack_features(conf)
        for row, f in zip(conf, feats):
            assert f.tolist() == sorted(row.tolist(), reverse=True)[:3]
        np.testing.assert_array_equal(attack_features([[0.6, 0.4]]), [[0.6, 0.4, 0.0]])

    def test_identical_distributions(self):
        rng = np.random.default_rng(9)
        know = random_records(rng, 2000, 10, sharpen=0.5)
        targets = random_records(rng, 2000, 10, sharpen=0.5)
        targets = targets.subset(np.argsort(targets.membership, kind="stable"))
        n_non = targets.n_nonmembers()
        targets = targets.subset(np.r_[np.arange(min(n_non, targets.n_members())), n_non + np.arange(min(n_non, targets.n_members()))])
        model = train_nn_attack(know, FAST_ATTACK)
        assert abs(run_nn_attack(model, targets).attack_accuracy - 0.5) <= 0.05

    def test_separable(self):
        rng = np.random.default_rng(10)
        model = train_nn_attack(separable_records(rng, 300), FAST_ATTACK)
        assert run_nn_attack(model, separable_records(rng, 200)).attack_accuracy >= 0.95

    def test_deterministic(self):
        know = random_records(np.random.default_rng(11), 300, 5)
        assert train_nn_attack(know, FAST_ATTACK).parameters_equal(train_nn_attack(know, FAST_ATTACK))

    def test_unbalanced_knowledge_downsampled(self):
        rng = np.random.default_rng(12)
        know = separable_records(rng, 200)
        know = know.subset(np.r_[np.arange(200), 200 + np.arange(50)])
        model = train_nn_attack(know, FAST_ATTACK)
        assert run_nn_attack(model, separable_records(rng, 100)).attack_accuracy >= 0.9

    def test_zero_model(self):
        targets = separable_records(np.random.default_rng(13), 30)
        out = run_nn_attack(zero_mlp([3, 64, 64, 2]), targets)
        assert out.attack_accuracy == 0.5 and not out.predicted.any()

    def test_encoding_mismatch(self):
        with pytest.raises(InvalidInputError):
            run_nn_attack(zero_mlp([4, 2]), separable_records(np.random.default_rng(14), 5))


class TestSuite:
    def test_best_bb_examples(self):
        assert best_bb_attack({"top1": 0.55}) == ("top1", 0.55)
        assert best_bb_attack({"top1": 0.55, "entropy": 0.60, "mentropy": 0.58}) == ("entropy", 0.60)

    def test_best_bb_ties_follow_name_order(self):
        assert best_bb_attack({"mentropy": 0.6, "confidence": 0.6, "top1": 0.5}) == ("confidence", 0.6)
        assert best_bb_attack({n: 0.7 for n in ATTACK_NAMES})[0] == "leaks1"

    def test_best_bb_empty(self):
        with pytest.raises(InvalidInputError):
            best_bb_attack({})

    def test_suite_and_csv(self, tmp_path):
        rng = np.random.default_rng(15)
        know, targets = separable_records(rng, 100), separable_records(rng, 50)
        outcomes = run_attack_suite(know, targets, ATTACK_NAMES, FAST_ATTACK)
        assert list(outcomes) == list(ATTACK_NAMES)
        name, acc = best_bb_attack(outcomes)
        assert acc == max(o.attack_accuracy for o in outcomes.values())
        write_outcomes_csv(outcomes, tmp_path / "o.csv")
        lines = (tmp_path / "o.csv").read_text().splitlines()
        assert lines[0] == "attack_name,attack_accuracy,n_targets,per_class_json"
        assert len(lines) == 7 and all(",100," in line for line in lines[1:])

    def test_unknown_attack(self):
        rng = np.random.default_rng(16)
        with pytest.raises(InvalidParameterError):
            run_attack_suite(separable_records(rng, 10), separable_records(rng, 10), ("top1", "hopskipjump"))

    def test_knowledge_csv_round_trip(self, tmp_path):
        know = random_records(np.random.default_rng(17), 25, 4)
        know.to_csv(tmp_path / "k.csv")
        back = MembershipRecords.from_csv(tmp_path / "k.csv")
        np.testing.assert_array_equal(back.confidences, know.confidences)
        np.testing.assert_array_equal(back.labels, know.labels)
        np.testing.assert_array_equal(back.membership, know.membership)

    def test_outcome_accuracy_range(self):
        out = AttackOutcome("top1", np.array([1, 0, 1]), np.array([1, 1, 1]), np.zeros(3, int))
        assert out.attack_accuracy == pytest.approx(2 / 3)
