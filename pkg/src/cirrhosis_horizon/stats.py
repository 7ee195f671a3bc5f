"""Evaluation statistics: splits, ROC/AUC, operating points, cohort tables."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import (
    AGE_COLUMN,
    CCI_COLUMN,
    FeatureMatrix,
    lab_column,
    lab_name,
    vital_column,
)
from .ehr import PANEL_LOINC
from .specfun import chi2_sf, t_sf_two_sided
from .terminology import RUCC_LABELS

__all__ = [
    "RocResult",
    "CharacteristicsRow",
    "CharacteristicsTable",
    "UndefinedAucError",
    "DegenerateTestError",
    "stratified_split",
    "roc_auc",
    "pairwise_auc",
    "sens_spec_at",
    "chi_square_p",
    "welch_t_p",
    "welch_t_from_summary",
    "characteristics_table",
    "format_p",
]


class UndefinedAucError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(
    labels: Sequence[int],
    test_fraction: float = 0.3,
    seed: int = 0,
    stratify: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/test index split.

    With ``stratify`` each label stratum contributes ``floor(f * n + 0.5)``
    test rows; otherwise the same rule is applied to the whole set.
    Strata are visited in ascending label order from one generator.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    y = np.asarray(labels)
    for cls in (0, 1):
        if not np.any(y == cls):
            raise ValueError(f"label stratum {cls} is empty")
    rng = np.random.default_rng(seed)
    strata = [np.flatnonzero(y == cls) for cls in (0, 1)] if stratify else [np.arange(len(y))]
    test = []
    for idx in strata:
        k = _half_up(test_fraction * len(idx))
        test.append(rng.permutation(idx)[:k])
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
    return train_idx, test_idx


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    n_pos: int
    n_neg: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    return s, y, n_pos, n_neg


def roc_auc(scores, labels) -> RocResult:
    """ROC by a descending-score sweep; tied scores move diagonally as one step."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(fpr, tpr, thresholds, auc, n_pos, n_neg)


def pairwise_auc(scores, labels) -> float:
    """Mann-Whitney concordance over all (positive, negative) pairs, ties 1/2."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both classes")
    pos, neg = s[y == 1][:, None], s[y == 0][None, :]
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (n_pos * n_neg))


def sens_spec_at(scores, labels, cutoff: float, high_is_positive: bool = True) -> tuple[float, float]:
    """Sensitivity and specificity when ``score > cutoff`` (or ``<``) calls positive."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("sensitivity/specificity need both classes")
    called = s > cutoff if high_is_positive else s < cutoff
    sens = float(np.sum(called & (y == 1)) / n_pos)
    spec = float(np.sum(~called & (y == 0)) / n_neg)
    return sens, spec


def chi_square_p(table) -> tuple[float, float]:
    """Pearson chi-square test of independence, no continuity correction."""
    obs = np.asarray(table, dtype=float)
    if obs.ndim != 2 or min(obs.shape) < 2:
        raise ValueError("contingency table needs at least 2 rows and 2 columns")
    rows, cols = obs.sum(axis=1), obs.sum(axis=0)
    if np.any(rows == 0) or np.any(cols == 0):
        raise DegenerateTestError("contingency table has a zero marginal")
    expected = np.outer(rows, cols) / obs.sum()
    stat = float(np.sum((obs - expected) ** 2 / expected))
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return stat, chi2_sf(stat, df)


def welch_t_from_summary(mean_a, var_a, n_a, mean_b, var_b, n_b) -> tuple[float, float, float]:
    if n_a < 2 or n_b < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = var_a / n_a, var_b / n_b
    if va + vb == 0:
        raise DegenerateTestError("both samples have zero variance")
    t = (mean_a - mean_b) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (n_a - 1) + vb**2 / (n_b - 1))
    return t, df, t_sf_two_sided(t, df)


def welch_t_p(sample_a, sample_b) -> tuple[float, float, float]:
    """Welch two-sample t: ``(t, Satterthwaite df, two-sided p)``."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 values")
    return welch_t_from_summary(
        math.fsum(a) / len(a), float(np.var(a, ddof=1)), len(a),
        math.fsum(b) / len(b), float(np.var(b, ddof=1)), len(b),
    )


def format_p(p: float | None) -> str:
    if p is None:
        return ""
    return "<0.001" if p < 0.001 else f"{p:.3f}"


# --------------------------------------------------------------------------
# Cohort characteristics
# --------------------------------------------------------------------------


@dataclass
class CharacteristicsRow:
    variable: str
    kind: str  # "categorical" or "continuous"
    p_value: float | None = None
    note: str = ""
    # categorical: level -> (overall, controls, cases)
    levels: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    # continuous: group -> (mean, sd)
    summary: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class CharacteristicsTable:
    counts: tuple[int, int, int]
    rows: list[CharacteristicsRow]

    def row(self, variable: str) -> CharacteristicsRow:
        for r in self.rows:
            if r.variable == variable:
                return r
        raise KeyError(variable)

    def to_records(self) -> list[list[str]]:
        out = [["Patient Counts", "", *map(str, self.counts), "", ""]]
        for r in self.rows:
            if r.kind == "categorical":
                out.append([r.variable, "", "", "", "", format_p(r.p_value), r.note])
                for level, (o, c, k) in r.levels.items():
                    out.append([r.variable, level, str(o), str(c), str(k), "", ""])
            else:
                cells = [f"{m:.1f} ({s:.1f})" for m, s in (r.summary[g] for g in ("overall", "controls", "cases"))]
                out.append([r.variable, "mean (SD)", *cells, format_p(r.p_value), r.note])
        return out

    def to_csv(self, path: str | os.PathLike, comment: str | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "level", "overall", "controls", "cases", "p_value", "note"])
            w.writerows(self.to_records())


_CATEGORICAL = (("Gender", "gender"), ("Race", "race"), ("Marital Status", "marital"), ("Rural-Urban Status", "rucc"))


def _continuous_columns():
    cols = [("Age", AGE_COLUMN), ("CCI", CCI_COLUMN)]
    cols += [(kind, vital_column(kind)) for kind in ("BMI", "DBP", "SBP")]
    cols += [(f"{lab_name(lab_column(code))} (LOINC: {code})", lab_column(code)) for code in PANEL_LOINC]
    return cols


def characteristics_table(matrix: FeatureMatrix, cohort=None) -> CharacteristicsTable:
    """Counts and chi-square for categorical groups, mean (SD) and Welch t otherwise.

    ``cohort``, when given, must be row-aligned with ``matrix``.
    """
    if cohort is not None and tuple(m.patient_id for m in cohort) != matrix.patient_ids:
        raise ValueError("cohort and matrix rows are not aligned")
    y = matrix.labels.astype(bool)
    if matrix.n_rows == 0 or y.all() or not y.any():
        raise ValueError("characteristics need both cases and controls")
    rows = []
    for title, group in _CATEGORICAL:
        a, b = matrix.schema.groups[group]
        block = matrix.values[:, a:b]
        prefix = len(group) + 1
        levels = {}
        for j, name in enumerate(matrix.schema.columns[a:b]):
            cases, controls = int(block[y, j].sum()), int(block[~y, j].sum())
            level = name[prefix:]
            if group == "rucc" and level.isdigit():
                level = RUCC_LABELS[int(level)]
            if cases + controls:
                levels[level] = (cases + controls, controls, cases)
        row = CharacteristicsRow(title, "categorical", levels=levels)
        table = [[c, k] for _, c, k in levels.values()]
        try:
            row.p_value = chi_square_p(table)[1]
        except (DegenerateTestError, ValueError):
            row.note = "degenerate: test not applicable"
        rows.append(row)
    for title, col in _continuous_columns():
        x = matrix.column(col)
        row = CharacteristicsRow(title, "continuous")
        for label, sel in (("overall", slice(None)), ("controls", ~y), ("cases", y)):
            v = x[sel]
            v = v[~np.isnan(v)]
            mean = math.fsum(v) / len(v) if len(v) else math.nan
            sd = float(np.std(v, ddof=1)) if len(v) > 1 else math.nan
            row.summary[label] = (mean, sd)
        try:
            a_, b_ = x[~y], x[y]
            row.p_value = welch_t_p(a_[~np.isnan(a_)], b_[~np.isnan(b_)])[2]
        except (DegenerateTestError, ValueError):
            row.note = "degenerate: test not applicable"
        rows.append(row)
    return CharacteristicsTable((matrix.n_rows, int((~y).sum()), int(y.sum())), rows)
