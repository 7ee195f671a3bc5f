"""Stage runners behind the command line.

Each stage reads its inputs from flat files, writes its outputs next to them
and stamps every artifact with the tool version, a hash of the run config and
the seed. Nothing time-dependent is written, so rerunning a stage on
unchanged inputs reproduces its files byte for byte.

Stage directory layout::

    <out>/data/{patients,encounters,diagnoses,labs,vitals,truth}.csv
    <out>/cohort.csv, report.json          cohort
    <out>/features.csv, schema.json        features
    <out>/model.json                       train
    <out>/roc.csv, roc.vega.json,
    <out>/metrics.json,
    <out>/table_characteristics.csv        eval
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ._version import __version__
from .cohort import CASE, CohortAssignment, CohortSpec, build_cohort
from .ehr import TABLES, ClinicalRecordSet, load_record_set, read_table
from .features import FeatureMatrix, FeatureSchema, WindowGuard, assemble_matrix
from .fibrosis import (
    FIB4_CUTOFF,
    FIB4_DIRECTION,
    FIB5_CUTOFF,
    FIB5_DIRECTION,
    REFERENCE_OPERATING_POINTS,
    DomainError,
    classify_cutoff,
    fib4,
    fib4_for_cohort,
    fib5,
    fib5_for_cohort,
    panel_from_records,
)
from .gbdt import GbdtModel, GbdtParams, predict, train
from .stats import characteristics_table, roc_auc, stratified_split
from .synth import ConfigError, default_config, generate, load_config
from .terminology import load_ccs_map, load_charlson_map, load_rucc_table

__all__ = [
    "RunConfig",
    "PipelineError",
    "ConfigFileError",
    "MissingDependencyError",
    "REFERENCE_AUCS",
    "load_run_config",
    "config_hash",
    "provenance",
    "run_generate",
    "run_cohort",
    "run_features",
    "run_train",
    "run_eval",
    "run_replicate",
    "run_score",
    "write_cohort",
    "read_cohort",
    "format_replicate_table",
]

TOOL = "cirrhosis-horizon"
# Published GBDT / FIB-4 test AUCs per window, for side-by-side display only.
REFERENCE_AUCS = {1: (0.81, 0.71), 2: (0.73, 0.63), 3: (0.69, 0.57)}
SYNTHETIC_NOTE = (
    "AUCs on synthetic cohorts depend on the generator's planted signal; "
    "reference values come from the original private cohort."
)


class PipelineError(Exception):
    exit_code = 1


class ConfigFileError(PipelineError):
    exit_code = 2


class MissingDependencyError(PipelineError):
    exit_code = 3

    def __init__(self, path: str | os.PathLike, stage: str):
        self.path = str(path)
        super().__init__(f"missing input {self.path} (produced by the {stage!r} stage)")


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    out_dir: str = "out"
    data_dir: str | None = None
    ccs_map: str | None = None
    charlson_map: str | None = None
    rucc_table: str | None = None
    generator: str | None = None
    window_years: int = 1
    windows: tuple[int, ...] = (1, 2, 3)
    controls_per_case: int = 5
    match_tolerance_days: int = 7
    cci_hierarchy: bool = True
    test_fraction: float = 0.3
    stratify: bool = True
    labs: str = "mean"
    gbdt: dict = field(default_factory=dict)
    seed: int = 7
    lenient: bool = False
    n_jobs: int = 1

    # Keys that cannot change any output.
    _UNHASHED = ("n_jobs", "out_dir", "data_dir")

    def __post_init__(self):
        if self.window_years < 1:
            raise ConfigFileError("window_years must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigFileError("test_fraction must be in (0, 1)")
        if self.labs not in ("mean", "last"):
            raise ConfigFileError("labs must be 'mean' or 'last'")
        if self.n_jobs < 1:
            raise ConfigFileError("n_jobs must be >= 1")
        self.windows = tuple(int(w) for w in self.windows)
        try:
            self.gbdt_params()
            self.cohort_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(str(exc)) from None

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "data"

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def gbdt_params(self) -> GbdtParams:
        return GbdtParams.from_dict({**self.gbdt, "rng_seed": self.seed})

    def cohort_spec(self) -> CohortSpec:
        return CohortSpec(
            window_years=self.window_years,
            controls_per_case=self.controls_per_case,
            match_tolerance_days=self.match_tolerance_days,
            rng_seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["windows"] = list(self.windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigFileError(f"unknown config key(s) {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigFileError(str(exc)) from None

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_run_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                    env: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``CH_SEED``, then explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigFileError(f"{path}: top level must be a JSON object")
    env = os.environ if env is None else env
    if env.get("CH_SEED"):
        try:
            data["seed"] = int(env["CH_SEED"])
        except ValueError:
            raise ConfigFileError(f"CH_SEED must be an integer, got {env['CH_SEED']!r}") from None
    for key, value in (overrides or {}).items():
        if key == "gbdt":
            data["gbdt"] = {**data.get("gbdt", {}), **value}
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def config_hash(config: RunConfig) -> str:
    d = {k: v for k, v in config.to_dict().items() if k not in RunConfig._UNHASHED}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(config: RunConfig) -> dict:
    return {"tool": TOOL, "version": __version__, "config_hash": config_hash(config), "seed": config.seed}


def _stamp(config: RunConfig) -> str:
    p = provenance(config)
    return f"{p['tool']} {p['version']} config_hash={p['config_hash']} seed={p['seed']}"


def _write_json(path: Path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(data, sort_keys=True, indent=1, ensure_ascii=False) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingDependencyError(path, stage)
    return path


def _terminology(config: RunConfig):
    for p in (config.ccs_map, config.charlson_map, config.rucc_table):
        if p is not None and not Path(p).exists():
            raise ConfigFileError(f"terminology file {p} does not exist")
    return load_ccs_map(config.ccs_map), load_charlson_map(config.charlson_map), load_rucc_table(config.rucc_table)


def _load_records(config: RunConfig) -> ClinicalRecordSet:
    for table in TABLES:
        _require(config.data_path / f"{table}.csv", "generate")
    return load_record_set(config.data_path, lenient=config.lenient)


# --------------------------------------------------------------------------
# Cohort file
# --------------------------------------------------------------------------

_COHORT_COLUMNS = (
    "patient_id", "label", "index_date", "prediction_point", "window_years",
    "anchor_case_id", "anchor_prediction_point",
)


def _iso(d: dt.date | None) -> str:
    return d.isoformat() if d else ""


def _date(text: str | None) -> dt.date | None:
    return dt.date.fromisoformat(text) if text else None


def write_cohort(members: Sequence[CohortAssignment], path: str | os.PathLike, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_COHORT_COLUMNS)
        for m in members:
            w.writerow([
                m.patient_id, m.label, _iso(m.index_date), _iso(m.prediction_point), m.window_years,
                m.anchor_case_id or "", _iso(m.anchor_prediction_point),
            ])


def read_cohort(path: str | os.PathLike) -> list[CohortAssignment]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [
            CohortAssignment(
                patient_id=r["patient_id"],
                label=r["label"],
                prediction_point=dt.date.fromisoformat(r["prediction_point"]),
                window_years=int(r["window_years"]),
                index_date=_date(r["index_date"]),
                anchor_case_id=r.get("anchor_case_id") or None,
                anchor_prediction_point=_date(r.get("anchor_prediction_point")),
            )
            for r in reader
        ]


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def run_generate(config: RunConfig) -> dict:
    """Synthetic extract for ``config.window_years`` into the data directory."""
    try:
        gen = load_config(config.generator) if config.generator else default_config(config.window_years)
    except FileNotFoundError:
        raise ConfigFileError(f"generator config {config.generator} does not exist") from None
    except ConfigError as exc:
        raise ConfigFileError(str(exc)) from None
    gen = dataclasses.replace(gen, rng_seed=config.seed)
    _, _, rucc = _terminology(config)
    extract = generate(gen, rucc)
    out = config.data_path
    out.mkdir(parents=True, exist_ok=True)
    extract.write(out, _stamp(config))
    (out / "generator_config.json").write_text(gen.to_json(), encoding="utf-8")
    manifest = {
        "provenance": provenance(config),
        "counts": extract.records.counts(),
        "members": {
            "cases": sum(t.true_label for t in extract.truth),
            "controls": sum(1 - t.true_label for t in extract.truth),
            "panel_incomplete": sum(not t.panel_complete for t in extract.truth),
        },
        "window_years": gen.window_years,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def run_cohort(config: RunConfig) -> dict:
    records = _load_records(config)
    members, report = build_cohort(records, config.cohort_spec())
    out = config.out_path
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(members, out / "cohort.csv", _stamp(config))
    data = {"provenance": provenance(config), "spec": config.cohort_spec().to_dict(), **report.to_dict()}
    _write_json(out / "report.json", data)
    return data


def _schema_path(config: RunConfig) -> Path:
    return config.out_path / "schema.json"


def run_features(config: RunConfig) -> dict:
    cohort_path = _require(config.out_path / "cohort.csv", "cohort")
    records = _load_records(config)
    cohort = read_cohort(cohort_path)
    ccs, charlson, rucc = _terminology(config)
    guard = WindowGuard()
    matrix = assemble_matrix(records, cohort, ccs, charlson, rucc, guard, config.cci_hierarchy)
    matrix.to_csv(config.out_path / "features.csv", _stamp(config))
    schema = {
        **matrix.schema.to_dict(),
        "provenance": provenance(config),
        "window_guard": {"consumed": guard.consumed, "violations": guard.violations},
        "n_rows": matrix.n_rows,
    }
    _write_json(_schema_path(config), schema)
    return schema


def _load_matrix(config: RunConfig) -> tuple[FeatureMatrix, dict]:
    schema_path = _require(_schema_path(config), "features")
    features_path = _require(config.out_path / "features.csv", "features")
    schema_doc = json.loads(schema_path.read_text(encoding="utf-8"))
    return FeatureMatrix.from_csv(features_path, FeatureSchema.from_dict(schema_doc)), schema_doc


def _split(config: RunConfig, matrix: FeatureMatrix):
    return stratified_split(matrix.labels, config.test_fraction, config.seed, config.stratify)


def run_train(config: RunConfig) -> GbdtModel:
    matrix, _ = _load_matrix(config)
    train_idx, test_idx = _split(config, matrix)
    sub = matrix.subset(train_idx)
    model = train(sub, params=config.gbdt_params(), n_jobs=config.n_jobs)
    extra = {
        "provenance": provenance(config),
        "split": {"n_train": len(train_idx), "n_test": len(test_idx), "test_fraction": config.test_fraction,
                  "stratify": config.stratify},
    }
    model.save(config.out_path / "model.json", extra)
    return model


def _operating_point(scores, labels, cutoff: float, direction: str) -> dict:
    elevated = np.array([classify_cutoff(float(s), cutoff, direction) == "elevated" for s in scores])
    y = np.asarray(labels).astype(bool)
    return {
        "cutoff": cutoff,
        "direction": direction,
        "sensitivity": float(np.sum(elevated & y) / max(1, y.sum())),
        "specificity": float(np.sum(~elevated & ~y) / max(1, (~y).sum())),
    }


def _fib_scores_last(config: RunConfig, matrix: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    records = _load_records(config)
    cohort = {m.patient_id: m for m in read_cohort(_require(config.out_path / "cohort.csv", "cohort"))}
    f4, f5 = np.empty(matrix.n_rows), np.empty(matrix.n_rows)
    for i, pid in enumerate(matrix.patient_ids):
        panel = panel_from_records(records, pid, cohort[pid].prediction_point, how="last")
        if panel is None:
            raise DomainError(f"row {pid}: no FIB-4 inputs on or before the prediction point")
        f4[i], f5[i] = fib4(panel), fib5(panel)
    return f4, f5


def _vega_spec() -> dict:
    return {
        "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
        "data": {"url": "roc.csv", "format": {"type": "csv", "parse": {"fpr": "number", "tpr": "number"}}},
        "mark": {"type": "line", "interpolate": "linear"},
        "encoding": {
            "x": {"field": "fpr", "type": "quantitative", "title": "False positive rate"},
            "y": {"field": "tpr", "type": "quantitative", "title": "True positive rate"},
            "color": {"field": "method", "type": "nominal"},
        },
        "width": 360,
        "height": 360,
    }


def run_eval(config: RunConfig, benchmark: str | None = None) -> dict:
    """Test-set ROC/AUC for the model and the serum indices.

    ``benchmark`` ("fib4", "fib5" or "both") skips the model entirely.
    """
    matrix, schema_doc = _load_matrix(config)
    _, test_idx = _split(config, matrix)
    y = matrix.labels[test_idx]
    methods: dict[str, np.ndarray] = {}
    if benchmark is None:
        model = GbdtModel.load(_require(config.out_path / "model.json", "train"))
        methods["gbdt"] = predict(model, matrix.model_input()[test_idx], matrix.feature_names)
    if config.labs == "last":
        f4_all, f5_all = _fib_scores_last(config, matrix)
    else:
        f4_all, f5_all = fib4_for_cohort(matrix), fib5_for_cohort(matrix)
    f4, f5 = f4_all[test_idx], f5_all[test_idx]
    if benchmark in (None, "fib4", "both"):
        methods["fib4"] = f4
    if benchmark in (None, "fib5", "both"):
        # Lower FIB-5 means more fibrosis; rank on the negated score.
        methods["fib5"] = -f5

    out = config.out_path
    rocs = {name: roc_auc(s, y) for name, s in methods.items()}
    with open(out / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {_stamp(config)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "fpr", "tpr"])
        for name, r in rocs.items():
            for fpr, tpr in r.points:
                w.writerow([name, repr(fpr), repr(tpr)])
    _write_json(out / "roc.vega.json", {**_vega_spec(), "usermeta": {"provenance": provenance(config)}})

    metrics = {
        "provenance": provenance(config),
        "window_years": config.window_years,
        "n_test": int(len(test_idx)),
        "n_test_cases": int(y.sum()),
        "labs": config.labs,
        "note": SYNTHETIC_NOTE,
        "window_guard": schema_doc.get("window_guard"),
    }
    for name, r in rocs.items():
        metrics[f"auc_{name}"] = r.auc
    ops = {}
    if "fib4" in methods:
        ops["fib4"] = _operating_point(f4, y, FIB4_CUTOFF, FIB4_DIRECTION)
    if "fib5" in methods:
        ops["fib5"] = _operating_point(f5, y, FIB5_CUTOFF, FIB5_DIRECTION)
    metrics["operating_points"] = ops
    metrics["reference_operating_points"] = REFERENCE_OPERATING_POINTS
    if config.window_years in REFERENCE_AUCS:
        g, f = REFERENCE_AUCS[config.window_years]
        metrics["reference_auc"] = {"gbdt": g, "fib4": f}
    _write_json(out / "metrics.json", metrics)

    table = characteristics_table(matrix)
    table.to_csv(out / "table_characteristics.csv", _stamp(config))
    return metrics


def run_replicate(config: RunConfig, windows: Sequence[int] | None = None, log=None) -> dict:
    """generate -> cohort -> features -> train -> eval for each window."""
    windows = tuple(windows or config.windows)
    base = config.out_path
    rows = []
    for w in windows:
        stage = config.replace(window_years=w, windows=windows, out_dir=str(base / f"window_{w}"), data_dir=None)
        if log:
            log(f"window {w}: generate")
        run_generate(stage)
        if log:
            log(f"window {w}: cohort")
        report = run_cohort(stage)
        if log:
            log(f"window {w}: features")
        run_features(stage)
        if log:
            log(f"window {w}: train")
        run_train(stage)
        if log:
            log(f"window {w}: eval")
        m = run_eval(stage)
        ref = REFERENCE_AUCS.get(w, (math.nan, math.nan))
        rows.append({
            "window_years": w,
            "cases": report["complete_case_cases"],
            "controls": report["complete_case_controls"],
            "auc_gbdt": m["auc_gbdt"],
            "auc_fib4": m["auc_fib4"],
            "auc_fib5": m["auc_fib5"],
            "reference_auc_gbdt": ref[0],
            "reference_auc_fib4": ref[1],
            "window_guard_violations": m["window_guard"]["violations"],
        })
    summary = {"provenance": provenance(config.replace(windows=windows)), "note": SYNTHETIC_NOTE, "rows": rows}
    base.mkdir(parents=True, exist_ok=True)
    _write_json(base / "replicate.json", summary)
    (base / "replicate.txt").write_text(format_replicate_table(summary) + "\n", encoding="utf-8")
    return summary


def format_replicate_table(summary: dict) -> str:
    head = f"{'window':>6}  {'cases':>5}  {'controls':>8}  {'AUC GBDT':>8}  {'AUC FIB-4':>9}  {'ref GBDT':>8}  {'ref FIB-4':>9}"
    lines = [head, "-" * len(head)]
    for r in summary["rows"]:
        lines.append(
            f"{r['window_years']:>5}y  {r['cases']:>5}  {r['controls']:>8}  {r['auc_gbdt']:>8.3f}  "
            f"{r['auc_fib4']:>9.3f}  {r['reference_auc_gbdt']:>8.2f}  {r['reference_auc_fib4']:>9.2f}"
        )
    lines.append("")
    lines.append(summary["note"])
    return "\n".join(lines)


def run_score(kind: str, labs_path: str | os.PathLike, patients_path: str | os.PathLike | None = None,
              how: str = "mean", at: dt.date | None = None) -> list[tuple[str, float | None, str]]:
    """``(patient_id, score, classification)`` for every patient with labs."""
    if kind not in ("fib4", "fib5"):
        raise ConfigFileError(f"unknown score {kind!r}")
    labs_path = Path(labs_path)
    patients_path = Path(patients_path) if patients_path else labs_path.with_name("patients.csv")
    _require(labs_path, "input")
    _require(patients_path, "input")
    patients = read_table(patients_path, "patients")
    labs = read_table(labs_path, "labs")
    records = ClinicalRecordSet(patients, labs=labs)
    fn, cutoff, direction = (fib4, FIB4_CUTOFF, FIB4_DIRECTION) if kind == "fib4" else (fib5, FIB5_CUTOFF, FIB5_DIRECTION)
    out = []
    for pid in sorted(records.labs_by_patient):
        panel = panel_from_records(records, pid, at, how)
        try:
            score = fn(panel) if panel is not None else None
        except DomainError:
            score = None
        if score is None:
            out.append((pid, None, "insufficient_data"))
        else:
            out.append((pid, score, classify_cutoff(score, cutoff, direction)))
    return out
