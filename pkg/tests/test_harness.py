import json
from dataclasses import replace

import numpy as np
import pytest

from kcdlab import harness
from kcdlab.data import write_csv
from kcdlab.defenses import train_unprotected
from kcdlab.errors import InvalidParameterError, SchemaError
from kcdlab.harness import (
    CSV_COLUMNS,
    ReportRow,
    attack_sets,
    default_spec,
    emit_report,
    read_report,
    rows_from_json_text,
    rows_to_csv_text,
    rows_to_json_text,
    run_experiment,
    run_experiment_full,
    spec_from_dict,
    spec_to_dict,
    sweep,
)

GOLDEN_HEADER = (
    "defense,alpha,n_teachers,theta,reference_size,loss_kind,seed,train_acc,test_acc,gen_gap,"
    "acc_leaks1,acc_top1,acc_correctness,acc_confidence,acc_entropy,acc_mentropy,best_bb,wall_seconds"
)


class TestSpec:
    def test_bundled_spec(self):
        spec = default_spec()
        assert spec.trials == 5 and spec.defense_config.hidden == (128, 64)
        assert spec.split.train_all == 2000 and spec.split.pool_size <= 20 * 300

    def test_dict_round_trip(self, tiny_spec):
        assert spec_from_dict(spec_to_dict(tiny_spec)) == tiny_spec

    @pytest.mark.parametrize(
        "path, field",
        [
            (("colour",), "colour"),
            (("defense_config", "temperature"), "defense_config.temperature"),
            (("train", "lr"), "train.lr"),
            (("dataset", "classes"), "dataset.classes"),
        ],
    )
    def test_unknown_field_named(self, path, field):
        doc = spec_to_dict(default_spec())
        target = doc
        for key in path[:-1]:
            target = target[key]
        target[path[-1]] = 1
        with pytest.raises(SchemaError) as info:
            spec_from_dict(doc)
        assert info.value.field == field

    def test_wrong_version(self):
        doc = spec_to_dict(default_spec())
        doc["format_version"] = 2
        with pytest.raises(SchemaError) as info:
            spec_from_dict(doc)
        assert info.value.field == "format_version"

    @pytest.mark.parametrize("key, value", [("trials", 0), ("attacks", []), ("defense", "memguard"), ("attacks", ["nsh"])])
    def test_invalid_values(self, key, value):
        doc = spec_to_dict(default_spec())
        doc[key] = value
        with pytest.raises(SchemaError) as info:
            spec_from_dict(doc)
        assert info.value.field == key

    def test_csv_dataset(self, tmp_path, tiny_spec):
        data = harness.build_dataset(tiny_spec)
        write_csv(data, tmp_path / "d.csv")
        doc = spec_to_dict(tiny_spec)
        doc["dataset"] = {"kind": "csv", "path": str(tmp_path / "d.csv")}
        spec = spec_from_dict(doc)
        np.testing.assert_array_equal(harness.build_dataset(spec).features, data.features)


class TestRunExperiment:
    def test_single_trial_matches_trainer(self, tiny_spec):
        spec = replace(tiny_spec, trials=1)
        res = run_experiment_full(spec)
        direct = train_unprotected(
            res.prepared.part("train_all"), res.prepared.part("validation"), spec.defense_config.with_seed(spec.seed)
        )
        assert res.defense_result.model.parameters_equal(direct.model)

    def test_best_trial_selected(self, tiny_spec):
        res = run_experiment_full(replace(tiny_spec, trials=3))
        accs = res.trial_val_accuracies
        assert res.chosen_trial == accs.index(max(accs))

    def test_targets_balanced(self, tiny_spec):
        res = run_experiment_full(tiny_spec)
        _, targets = attack_sets(res.defense_result.model, res.prepared)
        assert targets.n_members() == targets.n_nonmembers() == 50

    def test_reproducible(self, tiny_spec):
        spec = replace(tiny_spec, defense="kcd")
        assert run_experiment(spec) == run_experiment(spec)

    def test_gap_identity_and_best(self, tiny_spec):
        row = run_experiment(tiny_spec)
        assert row.gen_gap == row.train_acc - row.test_acc
        assert row.best_bb == max(row.attack_acc.values())
        assert row.best_bb_name in row.attack_acc

    def test_mean_aggregate(self, tiny_spec):
        row = run_experiment(replace(tiny_spec, aggregate="mean"))
        assert 0.0 <= row.best_bb <= 1.0 and row.gen_gap == row.train_acc - row.test_acc

    def test_attack_subset(self, tiny_spec):
        row = run_experiment(replace(tiny_spec, attacks=("top1", "correctness")))
        assert set(row.attack_acc) == {"top1", "correctness"}

    def test_stage_error(self, tiny_spec):
        spec = replace(tiny_spec, defense="dmp", defense_config=replace(tiny_spec.defense_config, reference_size=10_000))
        with pytest.raises(harness.StageError) as info:
            run_experiment(spec)
        assert info.value.stage == "train"


class TestSweep:
    def test_alpha_zero_matches_unprotected(self, tiny_spec):
        rows = sweep(tiny_spec, "alpha", [0.0, 1.0])
        base = run_experiment(tiny_spec)
        assert rows[0].metrics() == base.metrics()
        assert [r.alpha for r in rows] == [0.0, 1.0]

    def test_teacher_grid(self, tiny_spec):
        rows = sweep(replace(tiny_spec, trials=1), "teacher_count", [2, 3, 5])
        assert [r.n_teachers for r in rows] == [2, 3, 5]
        assert all(r.error is None for r in rows)

    def test_shared_plan_and_isolation(self, tiny_spec, monkeypatch):
        seen = []
        real = harness.run_experiment

        def spy(spec, prepared=None):
            seen.append((spec, prepared))
            return real(spec, prepared)

        monkeypatch.setattr(harness, "run_experiment", spy)
        rows = sweep(replace(tiny_spec, trials=1), "theta_reuse", [20, 60, 100])
        plans = [p.plan for _, p in seen]
        assert all(p is plans[0] for p in plans)
        echoes = [{k: v for k, v in r.to_record().items() if k in ("alpha", "n_teachers", "reference_size", "loss_kind", "defense")} for r in rows]
        assert all(e == echoes[0] for e in echoes)
        assert [r.theta for r in rows] == [20.0, 60.0, 100.0]
        specs = [spec_to_dict(s) for s, _ in seen]
        for s in specs:
            s["defense_config"]["theta"] = None
        assert all(s == specs[0] for s in specs)

    def test_failed_point_becomes_error_row(self, tiny_spec):
        rows = sweep(replace(tiny_spec, trials=1), "theta_split", [50, 150])
        assert rows[0].error is None and rows[1].error is not None
        assert rows[1].theta == 150 and rows[1].best_bb is None
        text = rows_to_csv_text(rows)
        assert text.splitlines()[2].startswith("splitting_dmp,,,150,,mse,7,,,")

    def test_bad_parameter(self, tiny_spec):
        with pytest.raises(InvalidParameterError):
            sweep(tiny_spec, "temperature", [1])
        with pytest.raises(InvalidParameterError):
            sweep(tiny_spec, "alpha", [])


def sample_rows():
    return [
        ReportRow("unprotected", seed=3, train_acc=1.0, test_acc=0.7, gen_gap=1.0 - 0.7, attack_acc={"top1": 0.61, "leaks1": 0.6}, best_bb=0.61, best_bb_name="top1", wall_seconds=1.5),
        ReportRow("kcd", alpha=0.5, n_teachers=5, loss_kind="kl_T4", seed=3, train_acc=0.8, test_acc=0.75, gen_gap=0.8 - 0.75, attack_acc={n: 0.55 for n in ("leaks1", "top1", "correctness", "confidence", "entropy", "mentropy")}, best_bb=0.55, best_bb_name="leaks1"),
    ]


class TestReports:
    def test_golden_header(self, tmp_path):
        path = emit_report(sample_rows()[:1], tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == GOLDEN_HEADER
        assert ",".join(CSV_COLUMNS) == GOLDEN_HEADER
        assert len(lines) == 2

    def test_json_byte_round_trip(self, tmp_path):
        path = emit_report(sample_rows(), tmp_path / "r.json")
        text = path.read_text()
        assert rows_to_json_text(rows_from_json_text(text)) == text
        assert isinstance(json.loads(text), list)

    def test_csv_round_trip(self, tmp_path):
        rows = sample_rows()
        path = emit_report(rows, tmp_path / "r.csv")
        back = read_report(path)
        assert [r.to_record() for r in back] == [r.to_record() for r in rows]
        assert rows_to_csv_text(back) == path.read_text()

    def test_format_flag_overrides_suffix(self, tmp_path):
        path = emit_report(sample_rows(), tmp_path / "r.txt", "json")
        assert path.read_text().startswith("[")

    def test_empty(self, tmp_path):
        with pytest.raises(InvalidParameterError):
            emit_report([], tmp_path / "r.csv")

    def test_io_error_names_path(self, tmp_path):
        with pytest.raises(OSError) as info:
            emit_report(sample_rows(), tmp_path / "missing" / "r.csv")
        assert "missing" in str(info.value)

    def test_wrong_header_rejected(self):
        with pytest.raises(SchemaError):
            harness.rows_from_csv_text("defense,seed\nkcd,1\n")
