"""Temporal cohort construction.

Fatty-liver patients are split into cirrhosis cases and never-cirrhosis
controls. Each case gets a prediction point ``window_years`` before its first
cirrhosis code; controls are encounters of never-cirrhosis patients falling
within ``match_tolerance_days`` of a case's prediction point. Finally every
member must have at least one value of each panel lab and vital on or before
its prediction point.
"""

from __future__ import annotations

import datetime as dt
import hashlib
from dataclasses import dataclass, field, asdict
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

from .ehr import (
    PANEL_LOINC,
    VITAL_KINDS,
    ClinicalRecordSet,
    IcdVersion,
    code_matches_pattern,
    normalize_icd,
)

__all__ = [
    "CohortSpec",
    "CohortAssignment",
    "CohortReport",
    "EmptyCohortError",
    "identify_fatty_liver",
    "first_lc_diagnosis",
    "prediction_point",
    "sample_matched_controls",
    "match_controls",
    "complete_case_filter",
    "build_cohort",
    "stable_hash",
    "case_rng",
]

CASE, CONTROL = "case", "control"
_MASK64 = (1 << 64) - 1

Pattern = tuple[IcdVersion, str]


def _patterns(items) -> tuple[Pattern, ...]:
    out = []
    for version, raw in items:
        raw = raw.strip()
        wildcard = raw.endswith("x")
        code = normalize_icd(raw[:-1] if wildcard else raw)
        out.append((IcdVersion(int(version)), code + ("x" if wildcard else "")))
    return tuple(out)


@dataclass(frozen=True)
class CohortSpec:
    fatty_liver_patterns: tuple = ((9, "571.8"), (10, "K76.0"))
    lc_patterns: tuple = ((9, "571.2"), (9, "571.3"), (10, "K74.6x"), (10, "K70.3x"))
    window_years: int = 1
    controls_per_case: int = 5
    match_tolerance_days: int = 7
    rng_seed: int = 0

    def __post_init__(self):
        if self.window_years < 1:
            raise ValueError("window_years must be >= 1")
        if self.controls_per_case < 1:
            raise ValueError("controls_per_case must be >= 1")
        if self.match_tolerance_days < 0:
            raise ValueError("match_tolerance_days must be >= 0")
        object.__setattr__(self, "fatty_liver_patterns", _patterns(self.fatty_liver_patterns))
        object.__setattr__(self, "lc_patterns", _patterns(self.lc_patterns))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fatty_liver_patterns"] = [[int(v), p] for v, p in self.fatty_liver_patterns]
        d["lc_patterns"] = [[int(v), p] for v, p in self.lc_patterns]
        return d


@dataclass(frozen=True)
class CohortAssignment:
    patient_id: str
    label: str
    prediction_point: dt.date
    window_years: int
    index_date: dt.date | None = None
    anchor_case_id: str | None = None
    anchor_prediction_point: dt.date | None = None

    @property
    def y(self) -> int:
        return 1 if self.label == CASE else 0


class EmptyCohortError(RuntimeError):
    def __init__(self, stage: str):
        self.stage = stage
        super().__init__(f"cohort is empty at stage {stage!r}")


@dataclass
class CohortReport:
    """Counts at each cohort-derivation stage."""

    window_years: int
    fatty_liver: int = 0
    lc: int = 0
    non_lc: int = 0
    matched_controls_pre_dedup: int = 0
    max_controls_per_case_pre_dedup: int = 0
    matched_controls: int = 0
    cases_without_controls: int = 0
    complete_case_cases: int = 0
    complete_case_controls: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _matches(version, code, patterns: Sequence[Pattern]) -> bool:
    return any(version == v and code_matches_pattern(code, p) for v, p in patterns)


def identify_fatty_liver(records: ClinicalRecordSet, spec: CohortSpec) -> set[str]:
    return {
        d.patient_id
        for d in records.diagnoses
        if _matches(d.icd_version, d.code, spec.fatty_liver_patterns)
    }


def first_lc_diagnosis(records: ClinicalRecordSet, spec: CohortSpec, patient_id: str) -> dt.date | None:
    dates = [
        d.date
        for d in records.diagnoses_by_patient.get(patient_id, ())
        if _matches(d.icd_version, d.code, spec.lc_patterns)
    ]
    return min(dates) if dates else None


def prediction_point(index_date: dt.date, window_years: int) -> dt.date:
    """``index_date`` moved back ``window_years`` calendar years (Feb 29 -> Feb 28)."""
    year = index_date.year - window_years
    try:
        return index_date.replace(year=year)
    except ValueError:
        return index_date.replace(year=year, day=28)


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def case_rng(seed: int, patient_id: str) -> np.random.Generator:
    """Per-case stream: ``seed XOR hash(patient_id)``, independent of scheduling."""
    return np.random.default_rng((int(seed) ^ stable_hash(patient_id)) & _MASK64)


def _case_order(cases: Iterable[CohortAssignment]) -> list[CohortAssignment]:
    return sorted(cases, key=lambda c: (c.index_date or c.prediction_point, c.patient_id))


def _control_pool(records: ClinicalRecordSet, spec: CohortSpec, fatty: set[str] | None = None) -> set[str]:
    fatty = identify_fatty_liver(records, spec) if fatty is None else fatty
    return {pid for pid in fatty if first_lc_diagnosis(records, spec, pid) is None}


def match_controls(
    records: ClinicalRecordSet,
    spec: CohortSpec,
    cases: Sequence[CohortAssignment],
    pool: set[str] | None = None,
) -> tuple[list[CohortAssignment], dict[str, list[str]]]:
    """Sample time-matched controls and return ``(controls, pre-dedup trace)``.

    The trace maps each case id to the control patient ids drawn for it before
    deduplication across cases.
    """
    pool = _control_pool(records, spec) if pool is None else pool
    by_date: dict[dt.date, list] = defaultdict(list)
    for pid in sorted(pool):
        for enc in records.encounters_by_patient.get(pid, ()):
            by_date[enc.date].append(enc)
    tol = dt.timedelta(days=spec.match_tolerance_days)
    one = dt.timedelta(days=1)

    trace: dict[str, list[str]] = {}
    controls: list[CohortAssignment] = []
    taken: set[str] = set()
    for case in _case_order(cases):
        eligible = []
        day = case.prediction_point - tol
        while day <= case.prediction_point + tol:
            eligible.extend(by_date.get(day, ()))
            day += one
        eligible.sort()
        rng = case_rng(spec.rng_seed, case.patient_id)
        chosen, seen = [], set()
        for i in rng.permutation(len(eligible)):
            enc = eligible[i]
            if enc.patient_id in seen:
                continue
            seen.add(enc.patient_id)
            chosen.append(enc)
            if len(chosen) == spec.controls_per_case:
                break
        trace[case.patient_id] = [e.patient_id for e in chosen]
        for enc in chosen:
            if enc.patient_id in taken:
                continue
            taken.add(enc.patient_id)
            controls.append(
                CohortAssignment(
                    patient_id=enc.patient_id,
                    label=CONTROL,
                    prediction_point=enc.date,
                    window_years=case.window_years,
                    anchor_case_id=case.patient_id,
                    anchor_prediction_point=case.prediction_point,
                )
            )
    return controls, trace


def sample_matched_controls(
    records: ClinicalRecordSet, spec: CohortSpec, cases: Sequence[CohortAssignment]
) -> list[CohortAssignment]:
    return match_controls(records, spec, cases)[0]


def _has_panel(records: ClinicalRecordSet, member: CohortAssignment, loincs, vitals) -> bool:
    pp = member.prediction_point
    labs = {lab.loinc for lab in records.labs_by_patient.get(member.patient_id, ()) if lab.date <= pp}
    vit = {v.kind for v in records.vitals_by_patient.get(member.patient_id, ()) if v.date <= pp}
    return set(loincs) <= labs and set(vitals) <= vit


def complete_case_filter(
    records: ClinicalRecordSet,
    members: Sequence[CohortAssignment],
    panel: tuple[Sequence[str], Sequence[str]] = (PANEL_LOINC, VITAL_KINDS),
) -> list[CohortAssignment]:
    """Keep members with >= 1 value of every panel series dated <= prediction point."""
    loincs, vitals = panel
    return [m for m in members if _has_panel(records, m, loincs, vitals)]


def build_cohort(
    records: ClinicalRecordSet, spec: CohortSpec
) -> tuple[list[CohortAssignment], CohortReport]:
    """Run the full derivation. Members are returned cases first, then controls.

    Raises:
        EmptyCohortError: no fatty-liver patients, no cirrhosis cases, or no
            case survives the complete-case filter. Zero matched controls is
            reported, not raised.
    """
    report = CohortReport(window_years=spec.window_years)
    fatty = identify_fatty_liver(records, spec)
    report.fatty_liver = len(fatty)
    if not fatty:
        raise EmptyCohortError("fatty_liver")

    cases, pool = [], set()
    for pid in sorted(fatty):
        first = first_lc_diagnosis(records, spec, pid)
        if first is None:
            pool.add(pid)
        else:
            cases.append(
                CohortAssignment(
                    patient_id=pid,
                    label=CASE,
                    prediction_point=prediction_point(first, spec.window_years),
                    window_years=spec.window_years,
                    index_date=first,
                )
            )
    report.lc, report.non_lc = len(cases), len(pool)
    if not cases:
        raise EmptyCohortError("lc")
    cases = _case_order(cases)

    controls, trace = match_controls(records, spec, cases, pool)
    report.matched_controls_pre_dedup = sum(len(v) for v in trace.values())
    report.max_controls_per_case_pre_dedup = max(len(v) for v in trace.values())
    report.matched_controls = len(controls)
    report.cases_without_controls = sum(1 for v in trace.values() if not v)
    if not controls:
        report.notes.append("no eligible control encounters within the matching tolerance")

    kept_cases = complete_case_filter(records, cases)
    kept_controls = complete_case_filter(records, controls)
    report.complete_case_cases = len(kept_cases)
    report.complete_case_controls = len(kept_controls)
    if not kept_cases:
        raise EmptyCohortError("complete_case")
    if not kept_controls:
        report.notes.append("no control survives the complete-case filter")
    return kept_cases + kept_controls, report
