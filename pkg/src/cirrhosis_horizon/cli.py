"""``cirrhosis-horizon`` command line.

Exit codes: 0 success, 2 configuration error, 3 missing stage input,
4 I/O error, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import sys
from pathlib import Path

from ._version import __version__
from .cohort import EmptyCohortError
from .ehr import RecordSetError
from .pipeline import (
    PipelineError,
    format_replicate_table,
    load_run_config,
    run_cohort,
    run_eval,
    run_features,
    run_generate,
    run_replicate,
    run_score,
    run_train,
)
from .synth import ConfigError, default_config

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_IO = 0, 1, 2, 3, 4

# flag dest -> config key; GBDT flags land under "gbdt".
_RUN_FLAGS = {
    "out": "out_dir",
    "data": "data_dir",
    "ccs_map": "ccs_map",
    "charlson_map": "charlson_map",
    "rucc_table": "rucc_table",
    "generator": "generator",
    "window": "window_years",
    "controls_per_case": "controls_per_case",
    "match_tolerance_days": "match_tolerance_days",
    "test_fraction": "test_fraction",
    "labs": "labs",
    "seed": "seed",
    "n_jobs": "n_jobs",
}
_GBDT_FLAGS = (
    ("num_rounds", int),
    ("learning_rate", float),
    ("max_depth", int),
    ("reg_lambda", float),
    ("gamma", float),
    ("min_child_weight", float),
    ("subsample", float),
    ("colsample", float),
    ("early_stopping_rounds", int),
)


def _run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="run config JSON")
    g.add_argument("--out", help="stage output directory")
    g.add_argument("--data", help="record-set CSV directory (default: <out>/data)")
    g.add_argument("--ccs-map")
    g.add_argument("--charlson-map")
    g.add_argument("--rucc-table")
    g.add_argument("--generator", help="generator config JSON")
    g.add_argument("--window", type=int, help="prediction window in years")
    g.add_argument("--controls-per-case", type=int)
    g.add_argument("--match-tolerance-days", type=int)
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--no-stratify", action="store_true", help="split without stratifying by label")
    g.add_argument("--no-cci-hierarchy", action="store_true", help="score Charlson without hierarchy rules")
    g.add_argument("--labs", choices=("mean", "last"), help="lab aggregation for FIB-4/FIB-5")
    g.add_argument("--seed", type=int, help="seed (also settable via CH_SEED)")
    g.add_argument("--n-jobs", type=int, help="threads for split search")
    g.add_argument("--lenient", action="store_true", help="skip and report bad input rows")
    t = p.add_argument_group("model hyperparameters")
    for name, typ in _GBDT_FLAGS:
        t.add_argument("--" + name.replace("_", "-"), type=typ)


def _config_from_args(args):
    overrides = {key: getattr(args, dest) for dest, key in _RUN_FLAGS.items() if getattr(args, dest, None) is not None}
    if getattr(args, "no_stratify", False):
        overrides["stratify"] = False
    if getattr(args, "no_cci_hierarchy", False):
        overrides["cci_hierarchy"] = False
    if getattr(args, "lenient", False):
        overrides["lenient"] = True
    if getattr(args, "windows", None):
        overrides["windows"] = args.windows
    gbdt = {name: getattr(args, name) for name, _ in _GBDT_FLAGS if getattr(args, name, None) is not None}
    if gbdt:
        overrides["gbdt"] = gbdt
    return load_run_config(args.config, overrides)


def _windows(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(w) for w in text.split(",") if w.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cirrhosis-horizon", description="Cirrhosis risk pipeline on EHR extracts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic extract")
    _run_options(p)
    p.add_argument("--dump-config", metavar="PATH", help="write the default generator config and exit")

    for name, text in (
        ("cohort", "build the case/control cohort"),
        ("features", "aggregate observation windows into features"),
        ("train", "fit the boosted model"),
    ):
        _run_options(sub.add_parser(name, help=text))

    p = sub.add_parser("eval", help="ROC/AUC, operating points and cohort table")
    _run_options(p)
    p.add_argument("--benchmark", choices=("fib4", "fib5", "both"), help="serum indices only; no model needed")

    p = sub.add_parser("replicate", help="full pipeline for several windows")
    _run_options(p)
    p.add_argument("--windows", type=_windows, help="e.g. 1,2,3")

    p = sub.add_parser("score", help="FIB-4 or FIB-5 per patient from a labs CSV")
    p.add_argument("kind", choices=("fib4", "fib5"))
    p.add_argument("--input", required=True, help="labs.csv")
    p.add_argument("--patients", help="patients.csv (default: next to --input)")
    p.add_argument("--labs", choices=("mean", "last"), default="mean")
    p.add_argument("--at", type=dt.date.fromisoformat, help="use labs dated on or before this date")
    p.add_argument("--output", help="CSV path (default: stdout)")
    return parser


def _emit_score(rows, dest) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["patient_id", "score", "classification"])
    for pid, score, label in rows:
        w.writerow([pid, "" if score is None else repr(score), label])


def _dispatch(args) -> int:
    if args.command == "score":
        rows = run_score(args.kind, args.input, args.patients, args.labs, args.at)
        if args.output:
            with open(args.output, "w", newline="", encoding="utf-8") as fh:
                _emit_score(rows, fh)
        else:
            _emit_score(rows, sys.stdout)
        return EXIT_OK

    if args.command == "generate" and args.dump_config:
        window = args.window or 1
        Path(args.dump_config).write_text(default_config(window).to_json(), encoding="utf-8")
        return EXIT_OK

    config = _config_from_args(args)
    if args.command == "generate":
        manifest = run_generate(config)
        print(json.dumps(manifest["counts"], sort_keys=True))
    elif args.command == "cohort":
        report = run_cohort(config)
        print(f"cases={report['complete_case_cases']} controls={report['complete_case_controls']}")
    elif args.command == "features":
        schema = run_features(config)
        print(f"rows={schema['n_rows']} columns={len(schema['columns'])} "
              f"window_guard_violations={schema['window_guard']['violations']}")
    elif args.command == "train":
        model = run_train(config)
        print(f"trees={len(model.trees)}")
    elif args.command == "eval":
        metrics = run_eval(config, args.benchmark)
        print(json.dumps({k: v for k, v in metrics.items() if k.startswith("auc_")}, sort_keys=True))
    elif args.command == "replicate":
        summary = run_replicate(config, log=lambda msg: print(msg, file=sys.stderr))
        print(format_replicate_table(summary))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RecordSetError, EmptyCohortError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
