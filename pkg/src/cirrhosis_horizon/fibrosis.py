"""FIB-4 and FIB-5 serum fibrosis indices.

FIB-4 (Vallet-Pichard form)::

    age * AST / (platelets * sqrt(ALT))            platelets in 10^9/L

FIB-5 (Fibrofast form)::

    (albumin[g/L] * 0.3 + platelets * 0.05) - (ALP * 0.014 + AST/ALT * 6 + 14)

Albumin arrives in g/dL from the extract and is converted here, nowhere else.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .ehr import ClinicalRecordSet
from .features import AGE_COLUMN, FeatureMatrix, age_at, lab_column, mean_in_window

__all__ = [
    "SerumPanel",
    "DomainError",
    "SchemaError",
    "FIB5_COEFFICIENTS",
    "FIB4_CUTOFF",
    "FIB5_CUTOFF",
    "FIB4_DIRECTION",
    "FIB5_DIRECTION",
    "REFERENCE_OPERATING_POINTS",
    "fib4",
    "fib5",
    "classify_cutoff",
    "fib4_for_cohort",
    "fib5_for_cohort",
    "panel_from_records",
]

LOINC_ALT = "1742-6"
LOINC_ALBUMIN = "1751-7"
LOINC_AST = "1920-8"
LOINC_ALP = "6768-6"
LOINC_PLATELETS = "26515-7"

ALBUMIN_G_PER_DL_TO_G_PER_L = 10.0

FIB5_COEFFICIENTS = {
    "albumin_g_per_l": 0.3,
    "platelets": 0.05,
    "alp": 0.014,
    "ast_alt_ratio": 6.0,
    "constant": 14.0,
}

FIB4_CUTOFF = 2.02
FIB5_CUTOFF = -7.11
# FIB-4 rises with fibrosis; FIB-5 falls with it.
FIB4_DIRECTION = "lt_is_low_risk"
FIB5_DIRECTION = "gt_is_low_risk"

# Published operating characteristics from an NAFLD cohort, carried into
# report footnotes only; they describe a different population.
REFERENCE_OPERATING_POINTS = {
    "fib4": {"cutoff": FIB4_CUTOFF, "sensitivity": 0.468, "specificity": 0.864},
    "fib5": {"cutoff": FIB5_CUTOFF, "sensitivity": 0.818, "specificity": 0.468},
}

Direction = Literal["lt_is_low_risk", "gt_is_low_risk"]


class DomainError(ValueError):
    pass


class SchemaError(KeyError):
    pass


@dataclass(frozen=True)
class SerumPanel:
    age_years: float
    ast_u_per_l: float
    alt_u_per_l: float
    platelets_1e9_per_l: float
    albumin_g_per_dl: float = math.nan
    alp_u_per_l: float = math.nan

    def __post_init__(self):
        for name in ("age_years", "ast_u_per_l", "alt_u_per_l", "platelets_1e9_per_l"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and >= 0, got {v!r}")


def fib4(panel: SerumPanel) -> float:
    if panel.alt_u_per_l <= 0 or panel.platelets_1e9_per_l <= 0:
        raise DomainError("FIB-4 needs ALT > 0 and platelets > 0")
    return panel.age_years * panel.ast_u_per_l / (panel.platelets_1e9_per_l * math.sqrt(panel.alt_u_per_l))


def fib5(panel: SerumPanel) -> float:
    if panel.alt_u_per_l <= 0:
        raise DomainError("FIB-5 needs ALT > 0")
    if not (math.isfinite(panel.albumin_g_per_dl) and math.isfinite(panel.alp_u_per_l)):
        raise DomainError("FIB-5 needs albumin and ALP")
    c = FIB5_COEFFICIENTS
    albumin_g_per_l = panel.albumin_g_per_dl * ALBUMIN_G_PER_DL_TO_G_PER_L
    return (albumin_g_per_l * c["albumin_g_per_l"] + panel.platelets_1e9_per_l * c["platelets"]) - (
        panel.alp_u_per_l * c["alp"] + (panel.ast_u_per_l / panel.alt_u_per_l) * c["ast_alt_ratio"] + c["constant"]
    )


def classify_cutoff(score: float, cutoff: float, direction: Direction) -> str:
    """``"low_risk"`` strictly on the low-risk side of ``cutoff``, else ``"elevated"``."""
    if direction == "lt_is_low_risk":
        return "low_risk" if score < cutoff else "elevated"
    if direction == "gt_is_low_risk":
        return "low_risk" if score > cutoff else "elevated"
    raise ValueError(f"unknown direction {direction!r}")


def _require(matrix: FeatureMatrix, names):
    try:
        return [matrix.column(n) for n in names]
    except KeyError as exc:
        raise SchemaError(str(exc)) from None


def fib4_for_cohort(matrix: FeatureMatrix) -> np.ndarray:
    """FIB-4 for every row from window-mean labs and age at prediction."""
    age, ast, alt, plt = _require(
        matrix, [AGE_COLUMN, lab_column(LOINC_AST), lab_column(LOINC_ALT), lab_column(LOINC_PLATELETS)]
    )
    out = np.empty(matrix.n_rows)
    for i in range(matrix.n_rows):
        try:
            out[i] = fib4(SerumPanel(age[i], ast[i], alt[i], plt[i]))
        except DomainError as exc:
            raise DomainError(f"row {matrix.patient_ids[i]}: {exc}") from None
    return out


def fib5_for_cohort(matrix: FeatureMatrix) -> np.ndarray:
    age, ast, alt, plt, alb, alp = _require(
        matrix,
        [
            AGE_COLUMN,
            lab_column(LOINC_AST),
            lab_column(LOINC_ALT),
            lab_column(LOINC_PLATELETS),
            lab_column(LOINC_ALBUMIN),
            lab_column(LOINC_ALP),
        ],
    )
    out = np.empty(matrix.n_rows)
    for i in range(matrix.n_rows):
        try:
            out[i] = fib5(SerumPanel(age[i], ast[i], alt[i], plt[i], alb[i], alp[i]))
        except DomainError as exc:
            raise DomainError(f"row {matrix.patient_ids[i]}: {exc}") from None
    return out


def panel_from_records(
    records: ClinicalRecordSet,
    patient_id: str,
    at: dt.date | None = None,
    how: Literal["mean", "last"] = "mean",
) -> SerumPanel | None:
    """Serum panel from raw labs dated on or before ``at`` (default: latest lab).

    Returns None when any FIB-4 input is missing.
    """
    labs = records.labs_by_patient.get(patient_id, ())
    if at is None:
        if not labs:
            return None
        at = max(lab.date for lab in labs)
    series: dict[str, list[tuple[dt.date, float]]] = {}
    for lab in labs:
        if lab.date <= at:
            series.setdefault(lab.loinc, []).append((lab.date, lab.value))

    def pick(loinc):
        vals = series.get(loinc)
        if not vals:
            return math.nan
        return vals[-1][1] if how == "last" else mean_in_window(vals, at)

    ast, alt, plt = pick(LOINC_AST), pick(LOINC_ALT), pick(LOINC_PLATELETS)
    if any(math.isnan(v) for v in (ast, alt, plt)):
        return None
    patient = records.patient_index[patient_id]
    return SerumPanel(
        float(age_at(at, patient.birth_date)), ast, alt, plt, pick(LOINC_ALBUMIN), pick(LOINC_ALP)
    )
