"""Code-system lookups: CCS diagnosis groups, Charlson comorbidity index, RUCC.

Mapping content lives in CSV files (see ``cirrhosis_horizon/data``); the
shipped CCS and RUCC tables are small demonstration subsets, the Charlson
table is the full Quan ICD-9-CM/ICD-10 coding algorithm.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from importlib import resources
from typing import Iterable

from .ehr import IcdVersion, normalize_icd

__all__ = [
    "CcsMap",
    "CharlsonMap",
    "RuccTable",
    "RUCC_LABELS",
    "RUCC_UNKNOWN",
    "CHARLSON_WEIGHTS",
    "load_ccs_map",
    "load_charlson_map",
    "load_rucc_table",
    "load_county_sidecar",
    "ccs_lookup",
    "cci_for_diagnoses",
    "rucc_lookup",
    "default_data_path",
]

RUCC_LABELS: dict[int, str] = {
    1: "Metro, ≥1 million",
    2: "Metro, 250,000 to 1 million",
    3: "Metro, <250,000",
    4: "Nonmetro, ≥20,000, adjacent to metro",
    5: "Nonmetro, ≥20,000, not adjacent to metro",
    6: "Nonmetro, 5,000 to 20,000, adjacent to metro",
    7: "Nonmetro, 5,000 to 20,000, not adjacent to metro",
    8: "Nonmetro, <5,000, adjacent to metro",
    9: "Nonmetro, <5,000, not adjacent to metro",
}
RUCC_UNKNOWN = "Unknown"
CHARLSON_WEIGHTS = frozenset({1, 2, 3, 6})


def default_data_path(name: str) -> str:
    return str(resources.files("cirrhosis_horizon") / "data" / name)


def _prefix(pattern: str) -> str:
    p = normalize_icd(pattern)
    return p[:-1] if p.endswith("X") and pattern.strip().endswith("x") else p


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        yield from csv.DictReader(lines)


# --------------------------------------------------------------------------
# CCS
# --------------------------------------------------------------------------


class CcsMap:
    """Longest-prefix ICD -> CCS category map."""

    def __init__(self, entries: Iterable[tuple[IcdVersion | int, str, int, str]]):
        self.entries = []
        self._index: dict[tuple[IcdVersion, str], int] = {}
        self.labels: dict[int, str] = {}
        for version, pattern, cat, label in entries:
            version = IcdVersion(int(version))
            prefix = _prefix(pattern)
            cat = int(cat)
            if cat < 1:
                raise ValueError(f"CCS category_id must be >= 1, got {cat}")
            key = (version, prefix)
            if key in self._index:
                raise ValueError(f"duplicate CCS entry for ICD-{int(version)} {prefix}")
            self._index[key] = cat
            self.labels.setdefault(cat, label)
            self.entries.append((version, prefix, cat, label))
        self._max_len = max((len(p) for _, p, _, _ in self.entries), default=0)

    @property
    def category_ids(self) -> list[int]:
        return sorted(self.labels)

    def lookup(self, version: IcdVersion | int, code: str) -> int | None:
        version = IcdVersion(int(version))
        for n in range(min(len(code), self._max_len), 0, -1):
            cat = self._index.get((version, code[:n]))
            if cat is not None:
                return cat
        return None


def ccs_lookup(ccs: CcsMap, version: IcdVersion | int, code: str) -> int | None:
    return ccs.lookup(version, code)


def load_ccs_map(path: str | os.PathLike | None = None) -> CcsMap:
    """Read ``icd_version,code_prefix,category_id,category_label`` rows."""
    path = path or default_data_path("ccs_map.csv")
    rows = _read_csv(path)
    return CcsMap(
        (int(r["icd_version"]), r["code_prefix"], int(r["category_id"]), r["category_label"].strip())
        for r in rows
    )


# --------------------------------------------------------------------------
# Charlson
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CharlsonEntry:
    icd_version: IcdVersion
    prefix: str
    category: str
    weight: int


class CharlsonMap:
    """ICD prefix -> Charlson category map with per-category weights.

    ``supersedes`` maps a category to the milder one it silences when both
    are present (e.g. metastatic tumour silences any malignancy).
    """

    def __init__(self, entries: Iterable[tuple], supersedes: dict[str, str] | None = None):
        self.entries: list[CharlsonEntry] = []
        self.weights: dict[str, int] = {}
        self._index: dict[tuple[IcdVersion, str], set[str]] = {}
        for version, pattern, category, weight in entries:
            e = CharlsonEntry(IcdVersion(int(version)), _prefix(pattern), category, int(weight))
            if e.weight not in CHARLSON_WEIGHTS:
                raise ValueError(f"Charlson weight must be one of {sorted(CHARLSON_WEIGHTS)}, got {e.weight}")
            if self.weights.setdefault(category, e.weight) != e.weight:
                raise ValueError(f"category {category!r} has more than one weight")
            self._index.setdefault((e.icd_version, e.prefix), set()).add(category)
            self.entries.append(e)
        self.supersedes = dict(supersedes or {})
        for hi, lo in self.supersedes.items():
            if hi not in self.weights or lo not in self.weights:
                raise ValueError(f"supersedes rule {hi!r} -> {lo!r} names an unknown category")
        self._max_len = max((len(e.prefix) for e in self.entries), default=0)

    @property
    def max_score(self) -> int:
        return sum(self.weights.values())

    def categories_for(self, version: IcdVersion | int, code: str) -> set[str]:
        version = IcdVersion(int(version))
        found: set[str] = set()
        for n in range(1, min(len(code), self._max_len) + 1):
            cats = self._index.get((version, code[:n]))
            if cats:
                found |= cats
        return found

    def categories(self, diagnoses: Iterable[tuple[IcdVersion | int, str]], hierarchy: bool = True) -> set[str]:
        present: set[str] = set()
        for version, code in diagnoses:
            present |= self.categories_for(version, code)
        if hierarchy:
            present -= {lo for hi, lo in self.supersedes.items() if hi in present}
        return present

    def score(self, diagnoses: Iterable[tuple[IcdVersion | int, str]], hierarchy: bool = True) -> int:
        return sum(self.weights[c] for c in self.categories(diagnoses, hierarchy))


def cci_for_diagnoses(
    charlson: CharlsonMap,
    diagnoses: Iterable[tuple[IcdVersion | int, str]],
    hierarchy: bool = True,
) -> int:
    """Charlson index of a diagnosis set: each category's weight counted once."""
    return charlson.score(diagnoses, hierarchy)


def load_charlson_map(path: str | os.PathLike | None = None) -> CharlsonMap:
    """Read ``icd_version,code_prefix,category,weight,supersedes`` rows."""
    path = path or default_data_path("charlson_map.csv")
    entries, supersedes = [], {}
    for r in _read_csv(path):
        cat = r["category"].strip()
        entries.append((int(r["icd_version"]), r["code_prefix"], cat, int(r["weight"])))
        sup = (r.get("supersedes") or "").strip()
        if sup:
            if supersedes.setdefault(cat, sup) != sup:
                raise ValueError(f"category {cat!r} has conflicting supersedes values")
    return CharlsonMap(entries, supersedes)


# --------------------------------------------------------------------------
# RUCC
# --------------------------------------------------------------------------


class RuccTable:
    def __init__(self, rows: Iterable[tuple[str, int, str]]):
        self.rows: dict[str, tuple[int, str]] = {}
        for fips, code, label in rows:
            fips = fips.strip().zfill(5)
            code = int(code)
            if code not in RUCC_LABELS:
                raise ValueError(f"RUCC code must be in 1..9, got {code}")
            self.rows[fips] = (code, label)

    def lookup(self, county_fips: str | None) -> tuple[int, str] | None:
        """``(code, canonical label)`` for a FIPS, or None when unknown."""
        if not county_fips:
            return None
        row = self.rows.get(county_fips.strip())
        if row is None:
            return None
        return row[0], RUCC_LABELS[row[0]]

    def fips_for_code(self, code: int) -> list[str]:
        return sorted(f for f, (c, _) in self.rows.items() if c == code)


def rucc_lookup(table: RuccTable, county_fips: str | None) -> tuple[int, str] | None:
    return table.lookup(county_fips)


def load_rucc_table(path: str | os.PathLike | None = None) -> RuccTable:
    path = path or default_data_path("rucc.csv")
    return RuccTable((r["county_fips"], int(r["rucc_code"]), r["label"]) for r in _read_csv(path))


def load_county_sidecar(path: str | os.PathLike) -> dict[tuple[str, str], str]:
    """Read a ``county,state,county_fips`` file into a ``(county, state) -> fips`` dict.

    Keys are case-folded so free-text county names from extracts resolve.
    """
    return {
        (r["county"].strip().casefold(), r["state"].strip().casefold()): r["county_fips"].strip().zfill(5)
        for r in _read_csv(path)
    }
