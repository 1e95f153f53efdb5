"""Command-line front end: ``kcdlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .attacks import run_attack_suite, write_outcomes_csv
from .data import SplitPlan, write_csv
from .errors import KcdLabError, SchemaError
from .nn import load_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_IO = 4
EXIT_INVALID = 5
EXIT_RUNTIME = 6

OUTPUT_DIR_ENV = "KCDLAB_OUTPUT_DIR"

EPILOG = f"""\
subcommands:
  gen-data   write the spec's dataset as CSV
  train      train the spec's defense; write model.json, split.json and audit files
  attack     attack a saved model with the black-box suite; write an outcome CSV
  run        one full experiment (best of trials + attacks); write a report
  sweep      one experiment per grid value of a trade-off knob; write a report
  report     merge report files (CSV or JSON) and print or write them

exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  usage error (unknown subcommand or bad arguments)
  {EXIT_SCHEMA}  spec or file schema violation (error names the field)
  {EXIT_IO}  file could not be read or written
  {EXIT_INVALID}  invalid data or parameter values
  {EXIT_RUNTIME}  a training or attack stage failed

On failure a single machine-readable line is written to stderr:
  kcdlab-error: {{"code": <int>, "kind": <str>, "field": <str|null>, "message": <str>}}

Relative output paths resolve against ${OUTPUT_DIR_ENV} when it is set.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error(EXIT_USAGE, "usage", None, message)
        raise SystemExit(EXIT_USAGE)


def _emit_error(code, kind, fld, message):
    line = json.dumps({"code": code, "kind": kind, "field": fld, "message": message})
    print(f"kcdlab-error: {line}", file=sys.stderr)


def _out_path(path):
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _leaf_paths(doc, prefix=()):
    for key, value in doc.items():
        path = prefix + (key,)
        yield path
        if isinstance(value, dict):
            yield from _leaf_paths(value, path)


def apply_overrides(doc, overrides):
    """Apply ``key=value`` overrides to a spec dict.

    Keys are dotted paths (``train.learning_rate``); a bare key is accepted
    when it names exactly one field anywhere in the spec.
    """
    for item in overrides:
        if "=" not in item:
            raise SchemaError(f"override {item!r} is not key=value", item)
        key, raw = item.split("=", 1)
        parts = tuple(key.split("."))
        paths = list(_leaf_paths(doc))
        if parts not in paths:
            matches = [p for p in paths if p[-len(parts):] == parts]
            if len(matches) != 1:
                raise SchemaError("override names no unique spec field" if not matches else f"ambiguous override, matches {['.'.join(m) for m in matches]}", key)
            parts = matches[0]
        target = doc
        for p in parts[:-1]:
            target = target[p]
        target[parts[-1]] = _parse_value(raw)
    return doc


def _spec_doc(args):
    path = Path(args.spec) if args.spec else harness.BUNDLED_SPEC
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON in {path}: {exc}", "<file>") from None
    if not isinstance(doc, dict):
        raise SchemaError("spec must be a JSON object", "<root>")
    # fill absent sections so bare-key overrides can find them
    full = harness.spec_to_dict(harness.spec_from_dict(doc))
    for k, v in full.items():
        if k not in doc or (doc[k] is None and isinstance(v, dict)):
            doc[k] = v
    apply_overrides(doc, args.set or [])
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "defense", None):
        doc["defense"] = args.defense
    if getattr(args, "parallel", None):
        doc["defense_config"]["workers"] = args.parallel
    return doc


def load_cli_spec(args):
    return harness.spec_from_dict(_spec_doc(args))


def cmd_gen_data(args):
    spec = load_cli_spec(args)
    dataset = harness.build_dataset(spec)
    out = _out_path(args.out or "dataset.csv")
    write_csv(dataset, out)
    print(out)


def cmd_train(args):
    spec = load_cli_spec(args)
    prepared = harness.prepare(spec)
    results = harness.train_trials(spec, prepared)
    val = [r.trained.best_val_accuracy for r in results]
    best = max(range(len(results)), key=lambda i: (val[i], -i))
    out = _out_path(Path(args.out or "train_out") / "model.json").parent
    results[best].persist(out)
    prepared.plan.save(out / "split.json")
    summary = {
        "defense": spec.defense,
        "seed": spec.seed,
        "chosen_trial": best,
        "trial_val_accuracies": val,
        "spec": harness.spec_to_dict(spec),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(out / "model.json")


def cmd_attack(args):
    spec = load_cli_spec(args)
    model = load_model(args.model)
    dataset = harness.build_dataset(spec)
    plan = SplitPlan.load(args.split) if args.split else harness.prepare(spec).plan
    prepared = harness.Prepared(dataset, plan)
    knowledge, targets = harness.attack_sets(model, prepared)
    if args.knowledge_dump:
        knowledge.to_csv(_out_path(args.knowledge_dump))
    outcomes = run_attack_suite(
        knowledge,
        targets,
        spec.attacks,
        spec.attack_cfg.with_seed(spec.seed),
        spec.min_class_support,
        spec.threshold_objective,
    )
    out = _out_path(args.out or "attack_outcomes.csv")
    write_outcomes_csv(outcomes, out)
    print(out)


def cmd_run(args):
    spec = load_cli_spec(args)
    row = harness.run_experiment(spec)
    out = harness.emit_report([row], _out_path(args.out or "report.csv"), args.format)
    print(out)


def cmd_sweep(args):
    spec = load_cli_spec(args)
    grid = [_parse_value(v) for v in args.grid.split(",") if v.strip()]
    rows = harness.sweep(spec, args.param, grid, parallel=args.parallel or 1)
    out = harness.emit_report(rows, _out_path(args.out or "sweep.csv"), args.format)
    print(out)


def cmd_report(args):
    rows = []
    for path in args.inputs:
        rows.extend(harness.read_report(path))
    if args.out:
        print(harness.emit_report(rows, _out_path(args.out), args.format))
    else:
        text = harness.rows_to_json_text(rows) if args.format == "json" else harness.rows_to_csv_text(rows)
        sys.stdout.write(text)


def build_parser():
    parser = _Parser(
        prog="kcdlab",
        description="Membership-inference defenses (KCD, DMP) and black-box attacks on tabular data.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", metavar="{gen-data,train,attack,run,sweep,report}", parser_class=_Parser)

    def with_spec(p):
        p.add_argument("--spec", help="experiment spec JSON (default: bundled desk-scale spec)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field (dotted path or unique key)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = with_spec(sub.add_parser("gen-data", help="write the dataset as CSV"))
    p.set_defaults(func=cmd_gen_data)

    p = with_spec(sub.add_parser("train", help="train a defense"))
    p.add_argument("--defense")
    p.add_argument("--parallel", type=int, help="worker processes for KCD teachers")
    p.set_defaults(func=cmd_train)

    p = with_spec(sub.add_parser("attack", help="attack a saved model"))
    p.add_argument("--model", required=True)
    p.add_argument("--split", help="split.json written by train (default: recompute from spec)")
    p.add_argument("--knowledge-dump", help="also write the attacker's knowledge records as CSV")
    p.set_defaults(func=cmd_attack)

    for name, func, helptext in (("run", cmd_run, "run one experiment"), ("sweep", cmd_sweep, "sweep a trade-off knob")):
        p = with_spec(sub.add_parser(name, help=helptext))
        p.add_argument("--defense")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--parallel", type=int)
        if name == "sweep":
            p.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMETERS))
            p.add_argument("--grid", required=True, help="comma-separated values")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge and print report files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        _emit_error(EXIT_USAGE, "usage", None, "a subcommand is required")
        return EXIT_USAGE
    try:
        args.func(args)
    except SchemaError as exc:
        _emit_error(EXIT_SCHEMA, "schema", exc.field, str(exc))
        return EXIT_SCHEMA
    except harness.StageError as exc:
        code = EXIT_IO if isinstance(exc.cause, OSError) else EXIT_SCHEMA if isinstance(exc.cause, SchemaError) else EXIT_RUNTIME
        _emit_error(code, exc.stage, getattr(exc.cause, "field", None), str(exc))
        return code
    except OSError as exc:
        _emit_error(EXIT_IO, "io", getattr(exc, "filename", None), str(exc))
        return EXIT_IO
    except (KcdLabError, ValueError) as exc:
        _emit_error(EXIT_INVALID, "invalid", None, str(exc))
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
