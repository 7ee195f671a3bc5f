"""Observation-window aggregation into a fixed-order feature matrix.

Every value a member contributes is dated on or before its prediction point.
Aggregation helpers report each event they consume to a :class:`WindowGuard`
so runs can assert that nothing from the prediction window leaked in.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cohort import CASE, CohortAssignment
from .ehr import LAB_NAMES, PANEL_LOINC, VITAL_KINDS, ClinicalRecordSet, DiagnosisEvent
from .terminology import RUCC_LABELS, RUCC_UNKNOWN, CcsMap, CharlsonMap, RuccTable

__all__ = [
    "GENDER_LEVELS",
    "RACE_LEVELS",
    "MARITAL_LEVELS",
    "RUCC_LEVELS",
    "FeatureSchema",
    "FeatureMatrix",
    "WindowGuard",
    "InvalidDemographicsError",
    "mean_in_window",
    "diagnosis_flags",
    "age_at",
    "mean_cci",
    "assemble_matrix",
    "lab_column",
    "vital_column",
]

UNKNOWN = "Unknown"
GENDER_LEVELS = ("Female", "Male", UNKNOWN)
RACE_LEVELS = ("Asian", "Black", "Decline", "Hispanic", "Multiple", "Native American", "White", UNKNOWN)
MARITAL_LEVELS = ("Divorced", "Life Partner", "Married", "Separated", "Single", "Widowed", UNKNOWN)
RUCC_LEVELS = tuple(str(c) for c in RUCC_LABELS) + (RUCC_UNKNOWN,)

AGE_COLUMN = "age_at_prediction"
CCI_COLUMN = "cci_mean"


def lab_column(loinc: str) -> str:
    return f"lab_{loinc}"


def vital_column(kind: str) -> str:
    return f"vital_{kind}"


class InvalidDemographicsError(ValueError):
    pass


@dataclass
class WindowGuard:
    """Counts events consumed by aggregation, and those dated after the cut-off."""

    consumed: int = 0
    violations: int = 0

    def consume(self, date: dt.date, prediction_point: dt.date) -> None:
        self.consumed += 1
        if date > prediction_point:
            self.violations += 1

    def merge(self, other: "WindowGuard") -> None:
        self.consumed += other.consumed
        self.violations += other.violations


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[str, ...]
    groups: dict[str, tuple[int, int]] = field(default_factory=dict)
    ccs_labels: dict[int, str] = field(default_factory=dict)

    @classmethod
    def build(cls, ccs: CcsMap) -> "FeatureSchema":
        cols = [AGE_COLUMN, CCI_COLUMN]
        cols += [vital_column(k) for k in ("BMI", "DBP", "SBP")]
        cols += [lab_column(code) for code in PANEL_LOINC]
        groups = {}
        for name, levels in (
            ("gender", GENDER_LEVELS),
            ("race", RACE_LEVELS),
            ("marital", MARITAL_LEVELS),
            ("rucc", RUCC_LEVELS),
        ):
            start = len(cols)
            cols += [f"{name}_{lvl}" for lvl in levels]
            groups[name] = (start, len(cols))
        start = len(cols)
        cols += [f"ccs_{cid}" for cid in ccs.category_ids]
        groups["ccs"] = (start, len(cols))
        return cls(tuple(cols), groups, {cid: ccs.labels[cid] for cid in ccs.category_ids})

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise KeyError(f"column {name!r} not in schema") from None

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "groups": {k: list(v) for k, v in self.groups.items()},
            "ccs_labels": {str(k): v for k, v in self.ccs_labels.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            tuple(d["columns"]),
            {k: tuple(v) for k, v in d.get("groups", {}).items()},
            {int(k): v for k, v in d.get("ccs_labels", {}).items()},
        )


@dataclass
class FeatureMatrix:
    """Row-aligned feature values; ``mask`` marks missing cells (value 0.0)."""

    patient_ids: tuple[str, ...]
    labels: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    schema: FeatureSchema

    def __post_init__(self):
        n, p = self.values.shape
        if len(self.patient_ids) != n or self.labels.shape != (n,) or self.mask.shape != (n, p):
            raise ValueError("feature matrix rows/labels/mask are misaligned")
        if p != len(self.schema.columns):
            raise ValueError("feature matrix width does not match its schema")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.schema.columns

    def column(self, name: str) -> np.ndarray:
        j = self.schema.index(name)
        out = self.values[:, j].copy()
        out[self.mask[:, j]] = np.nan
        return out

    def model_input(self) -> np.ndarray:
        """Values with NaN in missing cells, the layout the tree engine expects."""
        out = self.values.copy()
        out[self.mask] = np.nan
        return out

    def subset(self, rows: Sequence[int]) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=int)
        return FeatureMatrix(
            tuple(self.patient_ids[i] for i in rows),
            self.labels[rows],
            self.values[rows],
            self.mask[rows],
            self.schema,
        )

    def to_csv(self, path: str | os.PathLike, comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "label", *self.schema.columns])
            for i, pid in enumerate(self.patient_ids):
                cells = ["" if m else repr(float(v)) for v, m in zip(self.values[i], self.mask[i])]
                w.writerow([pid, int(self.labels[i]), *cells])

    @classmethod
    def from_csv(cls, path: str | os.PathLike, schema: FeatureSchema) -> "FeatureMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(line for line in fh if not line.startswith("#"))
            header = next(reader)
            if tuple(header[2:]) != schema.columns:
                raise ValueError(f"{path}: columns do not match the schema")
            ids, labels, vals, mask = [], [], [], []
            for row in reader:
                ids.append(row[0])
                labels.append(int(row[1]))
                mask.append([c == "" for c in row[2:]])
                vals.append([0.0 if c == "" else float(c) for c in row[2:]])
        p = len(schema.columns)
        return cls(
            tuple(ids),
            np.asarray(labels, dtype=np.int64),
            np.asarray(vals, dtype=float).reshape(-1, p),
            np.asarray(mask, dtype=bool).reshape(-1, p),
            schema,
        )


def mean_in_window(
    series: Iterable[tuple[dt.date, float]],
    prediction_point: dt.date,
    guard: WindowGuard | None = None,
) -> float | None:
    """Arithmetic mean of the values dated on or before ``prediction_point``."""
    vals = []
    for date, value in series:
        if date > prediction_point:
            continue
        if guard is not None:
            guard.consume(date, prediction_point)
        vals.append(value)
    if not vals:
        return None
    # Shifted by the first value so that k copies of v average to exactly v.
    ref = vals[0]
    return ref + math.fsum(v - ref for v in vals) / len(vals)


def diagnosis_flags(diagnoses: Iterable[DiagnosisEvent], ccs: CcsMap) -> np.ndarray:
    """Binary presence vector over ``ccs.category_ids`` (ascending)."""
    ids = ccs.category_ids
    pos = {cid: i for i, cid in enumerate(ids)}
    out = np.zeros(len(ids), dtype=float)
    for d in diagnoses:
        cat = ccs.lookup(d.icd_version, d.code)
        if cat is not None:
            out[pos[cat]] = 1.0
    return out


def age_at(prediction_point: dt.date, birth_date: dt.date) -> int:
    """Completed years; Feb 29 birthdays fall on Mar 1 in common years."""
    if birth_date > prediction_point:
        raise InvalidDemographicsError(f"birth date {birth_date} is after {prediction_point}")
    bday = (birth_date.month, birth_date.day)
    if bday == (2, 29) and not _is_leap(prediction_point.year):
        bday = (3, 1)
    years = prediction_point.year - birth_date.year
    if (prediction_point.month, prediction_point.day) < bday:
        years -= 1
    return years


def _is_leap(year: int) -> bool:
    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)


def mean_cci(
    records: ClinicalRecordSet,
    patient_id: str,
    prediction_point: dt.date,
    charlson: CharlsonMap,
    guard: WindowGuard | None = None,
    hierarchy: bool = True,
) -> float:
    """Average per-encounter Charlson index over encounters in the window.

    Diagnoses dated on an encounter's date belong to that encounter. A
    patient with no encounter in the window scores 0.0.
    """
    by_date = defaultdict(list)
    for d in records.diagnoses_by_patient.get(patient_id, ()):
        if d.date <= prediction_point:
            by_date[d.date].append(d)
    scores = []
    for enc in records.encounters_by_patient.get(patient_id, ()):
        if enc.date > prediction_point:
            continue
        dx = by_date.get(enc.date, ())
        if guard is not None:
            guard.consume(enc.date, prediction_point)
            for d in dx:
                guard.consume(d.date, prediction_point)
        scores.append(charlson.score(((d.icd_version, d.code) for d in dx), hierarchy))
    if not scores:
        return 0.0
    return math.fsum(scores) / len(scores)


def _level(value: str | None, levels: Sequence[str]) -> str:
    return value if value in levels else UNKNOWN


def assemble_matrix(
    records: ClinicalRecordSet,
    cohort: Sequence[CohortAssignment],
    ccs: CcsMap,
    charlson: CharlsonMap,
    rucc: RuccTable,
    guard: WindowGuard | None = None,
    cci_hierarchy: bool = True,
) -> FeatureMatrix:
    """One row per cohort member, in cohort order."""
    schema = FeatureSchema.build(ccs)
    n, p = len(cohort), len(schema.columns)
    values = np.zeros((n, p))
    mask = np.zeros((n, p), dtype=bool)
    labels = np.zeros(n, dtype=np.int64)
    col = {name: j for j, name in enumerate(schema.columns)}
    ccs_start, _ = schema.groups["ccs"]

    for i, m in enumerate(cohort):
        pid, pp = m.patient_id, m.prediction_point
        patient = records.patient_index[pid]
        labels[i] = 1 if m.label == CASE else 0
        values[i, col[AGE_COLUMN]] = age_at(pp, patient.birth_date)
        values[i, col[CCI_COLUMN]] = mean_cci(records, pid, pp, charlson, guard, cci_hierarchy)

        labs = defaultdict(list)
        for lab in records.labs_by_patient.get(pid, ()):
            labs[lab.loinc].append((lab.date, lab.value))
        for loinc in PANEL_LOINC:
            mu = mean_in_window(labs.get(loinc, ()), pp, guard)
            j = col[lab_column(loinc)]
            if mu is None:
                mask[i, j] = True
            else:
                values[i, j] = mu
        vitals = defaultdict(list)
        for v in records.vitals_by_patient.get(pid, ()):
            vitals[v.kind].append((v.date, v.value))
        for kind in VITAL_KINDS:
            mu = mean_in_window(vitals.get(kind, ()), pp, guard)
            j = col[vital_column(kind)]
            if mu is None:
                mask[i, j] = True
            else:
                values[i, j] = mu

        values[i, col["gender_" + _level(patient.gender, GENDER_LEVELS)]] = 1.0
        values[i, col["race_" + _level(patient.race, RACE_LEVELS)]] = 1.0
        values[i, col["marital_" + _level(patient.marital_status, MARITAL_LEVELS)]] = 1.0
        hit = rucc.lookup(patient.county_fips)
        values[i, col["rucc_" + (str(hit[0]) if hit else RUCC_UNKNOWN)]] = 1.0

        window_dx = []
        for d in records.diagnoses_by_patient.get(pid, ()):
            if d.date <= pp:
                if guard is not None:
                    guard.consume(d.date, pp)
                window_dx.append(d)
        flags = diagnosis_flags(window_dx, ccs)
        values[i, ccs_start : ccs_start + len(flags)] = flags

    for name in ("gender", "race", "marital", "rucc"):
        a, b = schema.groups[name]
        if not np.all(values[:, a:b].sum(axis=1) == 1.0):
            raise AssertionError(f"one-hot group {name!r} does not sum to 1")
    return FeatureMatrix(tuple(m.patient_id for m in cohort), labels, values, mask, schema)


def lab_name(column: str) -> str:
    """Human label for a feature column, e.g. ``lab_1742-6`` -> ``ALT``."""
    if column.startswith("lab_"):
        return LAB_NAMES.get(column[4:], column)
    if column.startswith("vital_"):
        return column[6:]
    return column
