"""Synthetic fatty-liver EHR extracts with a planted case/control signal.

Each member gets latent per-variable values drawn from its group's marginal
distribution (no cross-variable dependence). Every repeated measurement in the
observation window is a multiplicative jitter of the latent value, rescaled so
the window mean equals the latent value exactly. Cases additionally carry
prediction-window events whose lab values are deliberately shifted: they must
never reach the feature matrix, so any leak shows up as a distortion.

Default calibration targets come from published cohort summaries for the
1-, 2- and 3-year windows (overall, control and case columns).
"""

from __future__ import annotations

import csv
import datetime as dt
import functools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .cohort import prediction_point
from .ehr import (
    LAB_NAMES,
    PANEL_LOINC,
    VITAL_KINDS,
    ClinicalRecordSet,
    DiagnosisEvent,
    Encounter,
    IcdVersion,
    LabResult,
    PatientRecord,
    VitalSign,
    write_record_set,
)
from .terminology import RuccTable, load_rucc_table

__all__ = [
    "ConfigError",
    "ContinuousSpec",
    "PlantedSignalSpec",
    "GeneratorConfig",
    "SyntheticExtract",
    "TruthRow",
    "CONTINUOUS_VARIABLES",
    "CATEGORICAL_FIELDS",
    "default_config",
    "generate",
    "load_config",
    "write_truth",
    "read_truth",
]

GROUPS = ("control", "case")
CONTINUOUS_VARIABLES = ("age", "cci", *VITAL_KINDS, *PANEL_LOINC)
CATEGORICAL_FIELDS = ("gender", "race", "marital", "rucc")
LOGNORMAL_VARIABLES = frozenset({"cci", "1742-6", "1920-8", "6768-6", "1975-2", "5902-2"})
ICD10_START = dt.date(2015, 10, 1)

# Charlson "realizer" codes: one category each, none of them CCS-mapped.
_CCI_UNIT_CODES = (("4280", "I509"), ("4439", "I739"), ("4349", "I639"), ("412", "I252"), ("2900", "F03"))
_CCI_DOUBLE_CODES = (("5855", "N185"), ("1530", "C189"))
_FATTY_CODES = ("5718", "K760")
_LC_CODES = (("5712", "5713"), ("K7460", "K7469", "K7030", "K7031"))
# One (ICD-9, ICD-10) code per demo CCS category.
CCS_CODES = {
    53: ("2724", "E785"),
    58: ("2780", "E669"),
    59: ("2859", "D649"),
    95: ("3540", "G560"),
    98: ("4019", "I10"),
    133: ("7860", "R060"),
    138: ("5301", "K219"),
    150: ("5710", "K701"),
    151: ("5733", "K758"),
    155: ("5640", "K590"),
    205: ("7242", "M545"),
    211: ("7291", "M791"),
    651: ("3000", "F419"),
    657: ("311", "F329"),
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Marginal distributions
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _fit_truncnorm(mean: float, sd: float, lower: float, upper: float) -> tuple[float, float]:
    """``(loc, scale)`` of a normal truncated to ``[lower, upper]`` with the given moments."""

    def moments(params):
        loc, log_scale = params
        scale = math.exp(log_scale)
        a, b = (lower - loc) / scale, (upper - loc) / scale
        m, v = stats.truncnorm.stats(a, b, loc=loc, scale=scale, moments="mv")
        return [float(m) - mean, math.sqrt(float(v)) - sd]

    sol = optimize.least_squares(moments, [mean, math.log(sd)], xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if max(abs(r) for r in sol.fun) > 1e-6 * max(1.0, mean):
        raise ConfigError(f"no truncated normal on [{lower}, {upper}] has mean {mean} and sd {sd}")
    return float(sol.x[0]), math.exp(sol.x[1])


@dataclass(frozen=True)
class ContinuousSpec:
    mean: float
    sd: float
    distribution: str = "truncated_normal"
    lower: float = 0.0
    upper: float = math.inf

    def __post_init__(self):
        if self.sd < 0:
            raise ConfigError(f"sd must be >= 0, got {self.sd}")
        if self.distribution not in ("truncated_normal", "lognormal"):
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "lognormal" and self.mean <= 0:
            raise ConfigError("a lognormal needs a positive mean")
        if not self.lower <= self.mean <= self.upper:
            raise ConfigError(f"mean {self.mean} lies outside [{self.lower}, {self.upper}]")

    def frozen(self):
        """The scipy distribution this spec describes."""
        if self.distribution == "lognormal":
            s2 = math.log1p((self.sd / self.mean) ** 2)
            return stats.lognorm(math.sqrt(s2), scale=self.mean * math.exp(-s2 / 2.0))
        loc, scale = _fit_truncnorm(self.mean, self.sd, self.lower, self.upper)
        return stats.truncnorm((self.lower - loc) / scale, (self.upper - loc) / scale, loc=loc, scale=scale)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Stratified draws: one uniform per ``1/n`` quantile band, in shuffled order."""
        if self.sd == 0 or n == 0:
            return np.full(n, float(self.mean))
        u = (rng.permutation(n) + rng.random(n)) / n
        return self.frozen().ppf(u)

    def expected_mean(self) -> float:
        return float(self.mean)

    def to_dict(self) -> dict:
        d = {"mean": self.mean, "sd": self.sd, "distribution": self.distribution, "lower": self.lower}
        if math.isfinite(self.upper):
            d["upper"] = self.upper
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ContinuousSpec":
        return cls(float(d["mean"]), float(d["sd"]), d.get("distribution", "truncated_normal"),
                   float(d.get("lower", 0.0)), float(d.get("upper", math.inf)))


@dataclass(frozen=True)
class PlantedSignalSpec:
    """Variables drawn from group-specific distributions; the rest share the overall one."""

    variables: tuple[str, ...]

    def __contains__(self, name: str) -> bool:
        return name in self.variables


# --------------------------------------------------------------------------
# Reference calibration
# --------------------------------------------------------------------------

# Per window: member counts, categorical counts (overall, controls, cases),
# continuous mean/sd triples and the reported group-comparison p-values.
_C = "continuous"
_REFERENCE = {
    1: {
        "counts": (3043, 2139, 904),
        "gender": {"Female": (1767, 1295, 472), "Male": (1275, 843, 432), "Unknown": (1, 1, 0)},
        "race": {
            "Native American": (5, 4, 1), "Asian": (83, 63, 20), "Black": (973, 748, 225), "Decline": (11, 10, 1),
            "Hispanic": (29, 23, 6), "Multiple": (1, 1, 0), "White": (1941, 1290, 651),
        },
        "marital": {
            "Divorced": (362, 261, 101), "Life Partner": (14, 12, 2), "Married": (1457, 1024, 433),
            "Separated": (41, 30, 11), "Single": (852, 585, 267), "Unknown": (54, 38, 16),
            "Widowed": (263, 189, 74),
        },
        "rucc": {
            "1": (2235, 1683, 552), "2": (221, 115, 106), "3": (198, 107, 91), "4": (176, 110, 66),
            "5": (18, 9, 9), "6": (61, 36, 25), "7": (12, 7, 5), "8": (75, 46, 29), "9": (47, 26, 21),
        },
        _C: {
            "age": ((55.8, 13.3), (55.5, 13.9), (56.8, 11.9)),
            "cci": ((0.3, 0.4), (0.3, 0.4), (0.4, 0.4)),
            "BMI": ((33.1, 8.3), (33.5, 8.5), (32.3, 7.7)),
            "DBP": ((79.2, 7.2), (79.3, 7.1), (79.0, 7.4)),
            "SBP": ((131.8, 12.7), (131.6, 12.5), (132.3, 13.3)),
            "1742-6": ((36.4, 36.6), (33.1, 36.6), (44.2, 35.6)),
            "1751-7": ((4.1, 4.6), (4.2, 5.5), (3.8, 0.5)),
            "1920-8": ((36.4, 32.7), (31.3, 29.3), (48.4, 36.8)),
            "1975-2": ((0.7, 0.7), (0.6, 0.5), (1.0, 0.8)),
            "26515-7": ((227.9, 89.3), (243.2, 81.4), (191.7, 96.5)),
            "2885-2": ((7.0, 0.6), (7.0, 0.5), (7.1, 0.6)),
            "5902-2": ((14.3, 2.7), (14.2, 2.6), (14.8, 3.0)),
            "6768-6": ((92.4, 66.5), (85.0, 42.9), (109.9, 100.5)),
            "718-7": ((12.9, 1.7), (12.9, 1.7), (13.0, 1.8)),
        },
        "p": {
            "gender": "<0.001", "race": "<0.001", "marital": "0.715", "rucc": "<0.001", "age": "0.008",
            "cci": "<0.001", "BMI": "<0.001", "DBP": "0.246", "SBP": "0.193", "1742-6": "<0.001",
            "1751-7": "<0.001", "1920-8": "<0.001", "1975-2": "<0.001", "26515-7": "<0.001",
            "2885-2": "0.005", "5902-2": "<0.001", "6768-6": "<0.001", "718-7": "0.562",
        },
    },
    2: {
        "counts": (1981, 1473, 508),
        "gender": {"Female": (1132, 885, 247), "Male": (848, 587, 261), "Unknown": (1, 1, 0)},
        "race": {
            "Native American": (4, 3, 1), "Asian": (58, 49, 9), "Black": (683, 524, 159), "Decline": (7, 7, 0),
            "Hispanic": (22, 18, 4), "White": (1207, 872, 335),
        },
        "marital": {
            "Divorced": (229, 167, 62), "Life Partner": (10, 8, 2), "Married": (945, 715, 230),
            "Separated": (26, 22, 4), "Single": (563, 399, 164), "Unknown": (35, 27, 8),
            "Widowed": (173, 135, 38),
        },
        "rucc": {
            "1": (1542, 1186, 356), "2": (114, 73, 41), "3": (104, 64, 40), "4": (112, 76, 36),
            "5": (10, 6, 4), "6": (37, 25, 12), "7": (6, 2, 4), "8": (31, 23, 8), "9": (25, 18, 7),
        },
        _C: {
            "age": ((55.3, 13.5), (55.2, 13.8), (55.3, 12.7)),
            "cci": ((0.3, 0.4), (0.3, 0.4), (0.3, 0.3)),
            "BMI": ((33.2, 8.1), (33.6, 8.1), (32.2, 7.9)),
            "DBP": ((79.4, 6.9), (79.2, 6.8), (80.0, 6.9)),
            "SBP": ((132.0, 12.3), (131.7, 12.3), (132.9, 12.3)),
            "1742-6": ((36.0, 41.3), (32.6, 38.8), (46.1, 46.3)),
            "1751-7": ((4.3, 7.8), (4.5, 9.0), (3.9, 0.4)),
            "1920-8": ((35.1, 34.5), (30.4, 29.3), (48.7, 43.8)),
            "1975-2": ((0.7, 0.6), (0.6, 0.5), (0.9, 0.8)),
            "26515-7": ((234.1, 79.6), (241.8, 75.7), (211.8, 86.2)),
            "2885-2": ((7.1, 0.6), (7.0, 0.5), (7.1, 0.6)),
            "5902-2": ((14.2, 2.6), (14.1, 2.5), (14.5, 2.9)),
            "6768-6": ((89.3, 57.8), (83.7, 40.0), (105.7, 89.6)),
            "718-7": ((13.0, 1.7), (13.0, 1.7), (13.0, 1.8)),
        },
        "p": {
            "gender": "<0.001", "race": "0.051", "marital": "0.265", "rucc": "<0.001", "age": "0.900",
            "cci": "0.634", "BMI": "<0.001", "DBP": "0.025", "SBP": "0.065", "1742-6": "<0.001",
            "1751-7": "0.019", "1920-8": "<0.001", "1975-2": "<0.001", "26515-7": "<0.001",
            "2885-2": "0.003", "5902-2": "0.002", "6768-6": "<0.001", "718-7": "0.597",
        },
    },
    3: {
        "counts": (1470, 1099, 371),
        "gender": {"Female": (849, 665, 184), "Male": (621, 434, 187)},
        "race": {
            "Native American": (3, 2, 1), "Asian": (43, 36, 7), "Black": (486, 381, 105), "Decline": (6, 6, 0),
            "Hispanic": (14, 13, 1), "White": (918, 661, 257),
        },
        "marital": {
            "Divorced": (159, 122, 37), "Life Partner": (8, 7, 1), "Married": (715, 537, 178),
            "Separated": (19, 16, 3), "Single": (421, 305, 116), "Unknown": (23, 16, 7),
            "Widowed": (125, 96, 29),
        },
        "rucc": {
            "1": (1152, 892, 260), "2": (84, 54, 30), "3": (68, 42, 26), "4": (85, 56, 29),
            "5": (5, 4, 1), "6": (29, 20, 9), "7": (6, 2, 4), "8": (22, 16, 6), "9": (19, 13, 6),
        },
        _C: {
            "age": ((54.6, 13.4), (54.6, 13.7), (54.7, 12.6)),
            "cci": ((0.3, 0.4), (0.3, 0.4), (0.3, 0.3)),
            "BMI": ((33.2, 8.0), (33.3, 7.9), (32.8, 8.2)),
            "DBP": ((79.3, 7.0), (79.0, 7.1), (80.1, 6.9)),
            "SBP": ((131.6, 12.4), (131.2, 12.2), (132.8, 12.9)),
            "1742-6": ((35.1, 33.9), (31.9, 30.8), (44.5, 40.2)),
            "1751-7": ((4.4, 8.6), (4.5, 9.9), (3.9, 0.4)),
            "1920-8": ((33.5, 29.0), (29.6, 23.8), (44.9, 38.6)),
            "1975-2": ((0.7, 0.6), (0.6, 0.5), (0.8, 0.6)),
            "26515-7": ((235.7, 79.0), (242.6, 77.4), (215.2, 80.3)),
            "2885-2": ((7.0, 0.6), (7.0, 0.6), (7.1, 0.6)),
            "5902-2": ((14.2, 2.7), (14.1, 2.5), (14.6, 3.1)),
            "6768-6": ((87.7, 55.8), (83.1, 41.3), (101.5, 83.9)),
            # Hemoglobin row unavailable for this window; the 2-year row stands in.
            "718-7": ((13.0, 1.7), (13.0, 1.7), (13.0, 1.8)),
        },
        "p": {
            "gender": "<0.001", "race": "0.019", "marital": "0.709", "rucc": "0.001", "age": "0.948",
            "cci": "0.936", "BMI": "0.364", "DBP": "0.013", "SBP": "0.039", "1742-6": "<0.001",
            "1751-7": "0.052", "1920-8": "<0.001", "1975-2": "<0.001", "26515-7": "<0.001",
            "2885-2": "<0.001", "5902-2": "0.008", "6768-6": "<0.001", "718-7": "0.597",
        },
    },
}

ALBUMIN_BOUNDS = (1.0, 6.0)
# Invented CCS prevalences (control, case) by category id.
_CCS_PREVALENCE = {
    53: (0.40, 0.30), 58: (0.35, 0.55), 59: (0.15, 0.30), 95: (0.10, 0.16), 98: (0.45, 0.50),
    133: (0.12, 0.20), 138: (0.20, 0.28), 150: (0.02, 0.12), 151: (0.20, 0.45), 155: (0.12, 0.22),
    205: (0.22, 0.30), 211: (0.10, 0.16), 651: (0.15, 0.18), 657: (0.18, 0.24),
}


def _significant(p: str) -> bool:
    return p.startswith("<") or float(p) < 0.05


def _proportions(counts: dict[str, tuple[int, int, int]], column: int) -> dict[str, float]:
    total = sum(c[column] for c in counts.values())
    return {level: c[column] / total for level, c in counts.items() if c[column] > 0}


def _continuous_spec(var: str, mean: float, sd: float, fallback_sd: float) -> ContinuousSpec:
    if var == "1751-7":
        lo, hi = ALBUMIN_BOUNDS
        # Reported control SDs for albumin are implausible; the case SD stands in.
        return ContinuousSpec(mean, min(sd, fallback_sd), "truncated_normal", lo, hi)
    dist = "lognormal" if var in LOGNORMAL_VARIABLES else "truncated_normal"
    return ContinuousSpec(mean, sd, dist)


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    window_years: int
    n_cases: int
    n_controls: int
    continuous: dict[str, dict[str, ContinuousSpec]]
    categorical: dict[str, dict[str, dict[str, float]]]
    ccs_prevalence: dict[str, dict[int, float]]
    planted: PlantedSignalSpec
    encounters_per_year: float = 2.0
    history_years: tuple[float, float] = (1.0, 4.0)
    lab_draw_probability: float = 0.5
    measurement_cv: float = 0.15
    index_date_range: tuple[dt.date, dt.date] = (dt.date(2012, 1, 1), dt.date(2021, 12, 31))
    incomplete_fraction: float = 0.1
    leak_shift: float = 2.0
    # Random matching leaves part of the control pool unpicked; generating
    # a larger pool brings the matched count near n_controls.
    control_pool_factor: float = 1.25
    rng_seed: int = 0

    def __post_init__(self):
        if self.window_years < 1:
            raise ConfigError("window_years must be >= 1")
        if self.n_cases < 0 or self.n_controls < 0:
            raise ConfigError("member counts must be >= 0")
        if self.n_controls and not self.n_cases:
            raise ConfigError("controls are anchored to cases; n_cases must be > 0")
        if self.encounters_per_year <= 0:
            raise ConfigError("encounters_per_year must be > 0")
        lo, hi = self.history_years
        if not 0 < lo <= hi:
            raise ConfigError("history_years must satisfy 0 < min <= max")
        if not 0 < self.lab_draw_probability <= 1:
            raise ConfigError("lab_draw_probability must be in (0, 1]")
        if self.control_pool_factor < 1:
            raise ConfigError("control_pool_factor must be >= 1")
        if not 0 <= self.incomplete_fraction < 1:
            raise ConfigError("incomplete_fraction must be in [0, 1)")
        if self.index_date_range[0] > self.index_date_range[1]:
            raise ConfigError("index_date_range is reversed")
        for var in self.planted.variables:
            if var not in self.continuous and var not in self.categorical:
                raise ConfigError(f"planted variable {var!r} is not configured")
        for var in CONTINUOUS_VARIABLES:
            if var not in self.continuous:
                raise ConfigError(f"continuous variable {var!r} is not configured")
        for name in CATEGORICAL_FIELDS:
            for group, props in self.categorical.get(name, {}).items():
                if abs(math.fsum(props.values()) - 1.0) > 1e-9:
                    raise ConfigError(f"{name}/{group} proportions do not sum to 1")
                if any(p < 0 for p in props.values()):
                    raise ConfigError(f"{name}/{group} has a negative proportion")
        for group, prev in self.ccs_prevalence.items():
            if any(not 0 <= p <= 1 for p in prev.values()):
                raise ConfigError(f"ccs prevalence for {group} must be in [0, 1]")

    def group_key(self, var: str, group: str) -> str:
        return group if var in self.planted else "overall"

    def continuous_spec(self, var: str, group: str) -> ContinuousSpec:
        return self.continuous[var][self.group_key(var, group)]

    def proportions(self, name: str, group: str) -> dict[str, float]:
        return self.categorical[name][self.group_key(name, group)]

    def to_dict(self) -> dict:
        return {
            "window_years": self.window_years,
            "n_cases": self.n_cases,
            "n_controls": self.n_controls,
            "continuous": {v: {g: s.to_dict() for g, s in d.items()} for v, d in self.continuous.items()},
            "categorical": self.categorical,
            "ccs_prevalence": {g: {str(k): p for k, p in d.items()} for g, d in self.ccs_prevalence.items()},
            "planted": list(self.planted.variables),
            "encounters_per_year": self.encounters_per_year,
            "history_years": list(self.history_years),
            "lab_draw_probability": self.lab_draw_probability,
            "measurement_cv": self.measurement_cv,
            "index_date_range": [d.isoformat() for d in self.index_date_range],
            "incomplete_fraction": self.incomplete_fraction,
            "leak_shift": self.leak_shift,
            "control_pool_factor": self.control_pool_factor,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        try:
            return cls(
                window_years=int(d["window_years"]),
                n_cases=int(d["n_cases"]),
                n_controls=int(d["n_controls"]),
                continuous={
                    v: {g: ContinuousSpec.from_dict(s) for g, s in groups.items()}
                    for v, groups in d["continuous"].items()
                },
                categorical={
                    n: {g: {lvl: float(p) for lvl, p in props.items()} for g, props in groups.items()}
                    for n, groups in d["categorical"].items()
                },
                ccs_prevalence={g: {int(k): float(p) for k, p in prev.items()} for g, prev in d["ccs_prevalence"].items()},
                planted=PlantedSignalSpec(tuple(d["planted"])),
                encounters_per_year=float(d.get("encounters_per_year", 2.0)),
                history_years=tuple(float(x) for x in d.get("history_years", (1.0, 4.0))),
                lab_draw_probability=float(d.get("lab_draw_probability", 0.5)),
                measurement_cv=float(d.get("measurement_cv", 0.15)),
                index_date_range=tuple(dt.date.fromisoformat(x) for x in d.get("index_date_range", ("2012-01-01", "2021-12-31"))),
                incomplete_fraction=float(d.get("incomplete_fraction", 0.1)),
                leak_shift=float(d.get("leak_shift", 2.0)),
                control_pool_factor=float(d.get("control_pool_factor", 1.25)),
                rng_seed=int(d.get("rng_seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid generator config: {exc!r}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def load_config(path: str | os.PathLike) -> GeneratorConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return GeneratorConfig.from_dict(data)


def default_config(window_years: int, rng_seed: int = 0) -> GeneratorConfig:
    """Generator calibrated to the reference cohort summary for ``window_years``."""
    if window_years not in _REFERENCE:
        raise ConfigError(f"no reference calibration for window {window_years}")
    ref = _REFERENCE[window_years]
    _, n_controls, n_cases = ref["counts"]
    continuous = {}
    for var, triple in ref[_C].items():
        case_sd = triple[2][1]
        continuous[var] = {
            g: _continuous_spec(var, m, s, case_sd) for g, (m, s) in zip(("overall", "control", "case"), triple)
        }
    categorical = {
        name: {g: _proportions(ref[name], col) for col, g in enumerate(("overall", "control", "case"))}
        for name in CATEGORICAL_FIELDS
    }
    planted = tuple(v for v in (*CATEGORICAL_FIELDS, *CONTINUOUS_VARIABLES) if _significant(ref["p"][v]))
    ccs = {
        "control": {k: v[0] for k, v in _CCS_PREVALENCE.items()},
        "case": {k: v[1] for k, v in _CCS_PREVALENCE.items()},
    }
    return GeneratorConfig(
        window_years=window_years,
        n_cases=n_cases,
        n_controls=n_controls,
        continuous=continuous,
        categorical=categorical,
        ccs_prevalence=ccs,
        planted=PlantedSignalSpec(planted),
        rng_seed=rng_seed,
    )


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TruthRow:
    patient_id: str
    true_label: int
    index_date: dt.date | None
    prediction_point: dt.date
    panel_complete: bool


@dataclass
class SyntheticExtract:
    records: ClinicalRecordSet
    truth: list[TruthRow]
    latent: dict[str, dict[str, float]] = field(default_factory=dict)

    def write(self, directory: str | os.PathLike, comment: str | None = None) -> dict[str, Path]:
        paths = write_record_set(self.records, directory, comment)
        paths["truth"] = write_truth(self.truth, Path(directory) / "truth.csv", comment)
        return paths


def write_truth(rows, path: str | os.PathLike, comment: str | None = None) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "true_label", "index_date", "prediction_point", "panel_complete"])
        for r in rows:
            w.writerow([r.patient_id, r.true_label, r.index_date.isoformat() if r.index_date else "",
                        r.prediction_point.isoformat(), int(r.panel_complete)])
    return Path(path)


def read_truth(path: str | os.PathLike) -> list[TruthRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [
            TruthRow(
                r["patient_id"],
                int(r["true_label"]),
                dt.date.fromisoformat(r["index_date"]) if r["index_date"] else None,
                dt.date.fromisoformat(r["prediction_point"]),
                bool(int(r["panel_complete"])),
            )
            for r in reader
        ]


def _version(date: dt.date) -> IcdVersion:
    return IcdVersion.ICD10 if date >= ICD10_START else IcdVersion.ICD9


def _code(pair: tuple[str, str], date: dt.date) -> tuple[IcdVersion, str]:
    v = _version(date)
    return v, pair[1] if v == IcdVersion.ICD10 else pair[0]


def _days(rng, start: dt.date, end: dt.date, k: int) -> list[dt.date]:
    span = (end - start).days
    return sorted(start + dt.timedelta(days=int(d)) for d in rng.integers(0, span + 1, size=k))


def _measurements(rng, latent: float, k: int, cv: float) -> np.ndarray:
    """``k`` positive jittered values whose arithmetic mean is ``latent``."""
    w = rng.lognormal(0.0, cv, size=k)
    return latent * w / w.mean()


def _cci_codes(rng, score: int) -> list[tuple[str, str]]:
    doubles = list(_CCI_DOUBLE_CODES)
    units = list(_CCI_UNIT_CODES)
    out = []
    for i in rng.permutation(len(doubles)):
        if score >= 2:
            out.append(doubles[i])
            score -= 2
    for i in rng.permutation(len(units)):
        if score >= 1:
            out.append(units[i])
            score -= 1
    return out


class _Builder:
    def __init__(self):
        self.patients, self.encounters, self.diagnoses, self.labs, self.vitals = [], [], [], [], []

    def encounter(self, pid: str, date: dt.date) -> None:
        self.encounters.append(Encounter(pid, date, f"{pid}-E{len(self.encounters):07d}"))

    def dx(self, pid: str, date: dt.date, pair) -> None:
        v, code = _code(pair, date) if isinstance(pair, tuple) else (_version(date), pair)
        self.diagnoses.append(DiagnosisEvent(pid, date, v, code))

    def value(self, pid: str, date: dt.date, series: str, value: float) -> None:
        if series in LAB_NAMES:
            self.labs.append(LabResult(pid, date, series, float(value)))
        else:
            self.vitals.append(VitalSign(pid, date, series, float(value)))

    def build(self) -> ClinicalRecordSet:
        return ClinicalRecordSet(self.patients, self.encounters, self.diagnoses, self.labs, self.vitals)


def _group_draws(config: GeneratorConfig, group: str, n: int, tag: int) -> dict:
    """Latent values and categorical levels for ``n`` members of ``group``."""
    out: dict[str, np.ndarray] = {}
    for j, var in enumerate(CONTINUOUS_VARIABLES):
        rng = np.random.default_rng([config.rng_seed, tag, 1, j])
        out[var] = config.continuous_spec(var, group).sample(rng, n)
    for j, name in enumerate(CATEGORICAL_FIELDS):
        rng = np.random.default_rng([config.rng_seed, tag, 2, j])
        out[name] = _quota(rng, config.proportions(name, group), n)
    prev = config.ccs_prevalence.get(group, {})
    cats = sorted(prev)
    rng = np.random.default_rng([config.rng_seed, tag, 3])
    flags = rng.random((n, len(cats))) < np.array([prev[c] for c in cats])
    out["ccs"] = [[cats[k] for k in np.flatnonzero(row)] for row in flags]
    return out


def _quota(rng, props: dict[str, float], n: int) -> np.ndarray:
    """``n`` levels with counts ``n * p`` rounded by largest remainder, shuffled."""
    levels = sorted(props)
    share = np.array([props[lvl] for lvl in levels]) * n
    counts = np.floor(share).astype(int)
    short = n - counts.sum()
    counts[np.argsort(-(share - counts), kind="stable")[:short]] += 1
    return rng.permutation(np.repeat(np.asarray(levels, dtype=object), counts))


def _county(rng, rucc: RuccTable, level: str) -> str:
    fips = rucc.fips_for_code(int(level))
    if not fips:
        raise ConfigError(f"RUCC table has no county with code {level}")
    return fips[int(rng.integers(len(fips)))]


def _history(b: _Builder, rng, config: GeneratorConfig, pid: str, end: dt.date, draws: dict, i: int,
             incomplete: bool) -> None:
    """Encounters, repeated measurements, CCI and CCS codes on or before ``end``."""
    lo, hi = config.history_years
    years = rng.uniform(lo, hi)
    start = end - dt.timedelta(days=int(round(years * 365.25)))
    n_enc = max(1, int(rng.poisson(config.encounters_per_year * years)))
    dates = _days(rng, start, end, n_enc - 1) + [end]
    dates = sorted(set(dates))
    for d in dates:
        b.encounter(pid, d)

    series = list(PANEL_LOINC) + list(VITAL_KINDS)
    dropped = series[int(rng.integers(len(series)))] if incomplete else None
    for s in series:
        if s == dropped:
            continue
        # The first visit carries the full panel, so a match at any later
        # encounter still sees every series.
        take = rng.random(len(dates)) < config.lab_draw_probability
        take[0] = True
        on = [d for d, t in zip(dates, take) if t]
        for d, v in zip(on, _measurements(rng, draws[s][i], len(on), config.measurement_cv)):
            b.value(pid, d, s, v)

    c = float(draws["cci"][i])
    base, frac = int(math.floor(c)), c - math.floor(c)
    for d in dates:
        score = base + int(rng.random() < frac)
        for pair in _cci_codes(rng, score):
            b.dx(pid, d, pair)

    # CCS codes land on non-encounter days so they never alter per-encounter CCI.
    taken = set(dates)
    for cat in draws["ccs"][i]:
        d = _days(rng, start, end, 1)[0]
        while d in taken:
            d -= dt.timedelta(days=1)
        b.dx(pid, d, CCS_CODES[cat])


def _demographics(b: _Builder, rng, rucc: RuccTable, pid: str, at: dt.date, draws: dict, i: int) -> None:
    years = int(round(draws["age"][i]))
    birth = prediction_point(at, years) - dt.timedelta(days=int(rng.integers(0, 365)))
    if birth > at:
        birth = at
    b.patients.append(
        PatientRecord(pid, birth, str(draws["gender"][i]), str(draws["race"][i]), str(draws["marital"][i]),
                      _county(rng, rucc, draws["rucc"][i]))
    )


def generate(config: GeneratorConfig, rucc: RuccTable | None = None) -> SyntheticExtract:
    """Build a record set plus ground truth from ``config``; deterministic in its seed."""
    rucc = rucc or load_rucc_table()
    n_case_extra = int(round(config.n_cases * config.incomplete_fraction))
    n_ctrl_complete = int(round(config.n_controls * config.control_pool_factor))
    n_ctrl_extra = int(round(n_ctrl_complete * config.incomplete_fraction))
    n_case, n_ctrl = config.n_cases + n_case_extra, n_ctrl_complete + n_ctrl_extra
    b = _Builder()
    truth: list[TruthRow] = []
    if n_case + n_ctrl == 0:
        return SyntheticExtract(b.build(), truth)

    case_draws = _group_draws(config, "case", n_case, 1)
    ctrl_draws = _group_draws(config, "control", n_ctrl, 0)
    lo, hi = config.index_date_range
    width = len(str(n_case + n_ctrl))
    one = dt.timedelta(days=1)

    case_points = []
    for i in range(n_case):
        ordinal = i
        pid = f"P{ordinal:0{width}d}"
        rng = np.random.default_rng([config.rng_seed, ordinal])
        index = _days(rng, lo, hi, 1)[0]
        pp = prediction_point(index, config.window_years)
        incomplete = i >= config.n_cases
        _demographics(b, rng, rucc, pid, pp, case_draws, i)
        _history(b, rng, config, pid, pp, case_draws, i, incomplete)

        # Prediction-window events: shifted labs and liver codes, all after pp.
        window = _days(rng, pp + one, index - one, max(1, int(rng.poisson(config.encounters_per_year))))
        for d in sorted(set(window)):
            b.encounter(pid, d)
            for s in PANEL_LOINC:
                b.value(pid, d, s, case_draws[s][i] * config.leak_shift)
            b.dx(pid, d, CCS_CODES[150])
        b.dx(pid, window[0], _FATTY_CODES)
        b.encounter(pid, index)
        codes = _LC_CODES[1] if _version(index) == IcdVersion.ICD10 else _LC_CODES[0]
        b.dx(pid, index, codes[int(rng.integers(len(codes)))])
        truth.append(TruthRow(pid, 1, index, pp, not incomplete))
        case_points.append(pp)

    for i in range(n_ctrl):
        ordinal = n_case + i
        pid = f"P{ordinal:0{width}d}"
        rng = np.random.default_rng([config.rng_seed, ordinal])
        anchor = case_points[int(rng.integers(len(case_points)))]
        match = anchor + dt.timedelta(days=int(rng.integers(-7, 8)))
        incomplete = i >= n_ctrl_complete
        _demographics(b, rng, rucc, pid, match, ctrl_draws, i)
        _history(b, rng, config, pid, match, ctrl_draws, i, incomplete)
        later = match + dt.timedelta(days=int(rng.integers(30, 366)))
        b.dx(pid, later, _FATTY_CODES)
        truth.append(TruthRow(pid, 0, None, match, not incomplete))

    latent = {}
    for rows, draws, offset in ((range(n_case), case_draws, 0), (range(n_ctrl), ctrl_draws, n_case)):
        for i in rows:
            pid = f"P{offset + i:0{width}d}"
            latent[pid] = {v: float(draws[v][i]) for v in CONTINUOUS_VARIABLES}
    return SyntheticExtract(b.build(), truth, latent)
