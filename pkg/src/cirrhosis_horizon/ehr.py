"""EHR extract types, CSV ingestion and ICD code normalization.

A record set is five flat tables (patients, encounters, diagnoses, labs,
vitals) keyed by ``patient_id``. Everything is validated on load and kept
immutable afterwards; events are exposed sorted by ``(patient_id, date)``.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

__all__ = [
    "IcdVersion",
    "PatientRecord",
    "Encounter",
    "DiagnosisEvent",
    "LabResult",
    "VitalSign",
    "ClinicalRecordSet",
    "RejectedRow",
    "MalformedCodeError",
    "RecordSetError",
    "PANEL_LOINC",
    "LAB_NAMES",
    "VITAL_KINDS",
    "GENDERS",
    "normalize_icd",
    "code_matches_pattern",
    "load_record_set",
    "read_table",
    "write_record_set",
    "TABLES",
]

# LOINC -> short analyte name, in the order the labs appear in the extract.
LAB_NAMES: dict[str, str] = {
    "1742-6": "ALT",
    "1751-7": "Albumin",
    "1920-8": "AST",
    "6768-6": "ALP",
    "1975-2": "Bilirubin",
    "718-7": "Hemoglobin",
    "26515-7": "Platelets",
    "2885-2": "Protein",
    "5902-2": "PT",
}
PANEL_LOINC: tuple[str, ...] = tuple(LAB_NAMES)
VITAL_KINDS: tuple[str, ...] = ("SBP", "DBP", "BMI")
GENDERS: tuple[str, ...] = ("Female", "Male", "Unknown")

TABLES = ("patients", "encounters", "diagnoses", "labs", "vitals")
_COLUMNS = {
    "patients": ("patient_id", "birth_date", "gender", "race", "marital_status", "county_fips"),
    "encounters": ("encounter_id", "patient_id", "date"),
    "diagnoses": ("patient_id", "date", "icd_version", "code"),
    "labs": ("patient_id", "date", "loinc", "value"),
    "vitals": ("patient_id", "date", "kind", "value"),
}


class IcdVersion(enum.IntEnum):
    ICD9 = 9
    ICD10 = 10


class MalformedCodeError(ValueError):
    pass


class RecordSetError(ValueError):
    """Raised for schema, parse or referential-integrity failures on load."""

    def __init__(self, message: str, file: str | None = None, line: int | None = None):
        self.file = file
        self.line = line
        where = f"{file}:{line}: " if file is not None and line is not None else (f"{file}: " if file else "")
        super().__init__(where + message)


@dataclass(frozen=True, order=True)
class PatientRecord:
    patient_id: str
    birth_date: dt.date
    gender: str = "Unknown"
    race: str = "Unknown"
    marital_status: str = "Unknown"
    county_fips: str | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("empty patient_id")
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if self.county_fips is not None and (len(self.county_fips) != 5 or not self.county_fips.isdigit()):
            raise ValueError(f"county_fips must be 5 digits, got {self.county_fips!r}")


@dataclass(frozen=True, order=True)
class Encounter:
    patient_id: str
    date: dt.date
    encounter_id: str


@dataclass(frozen=True, order=True)
class DiagnosisEvent:
    patient_id: str
    date: dt.date
    icd_version: IcdVersion
    code: str

    def __post_init__(self):
        if not self.code or "." in self.code:
            raise MalformedCodeError(f"diagnosis code must be normalized, got {self.code!r}")


@dataclass(frozen=True, order=True)
class LabResult:
    patient_id: str
    date: dt.date
    loinc: str
    value: float

    def __post_init__(self):
        if self.loinc not in LAB_NAMES:
            raise ValueError(f"LOINC {self.loinc!r} is not in the lab panel")
        if not math.isfinite(self.value):
            raise ValueError(f"lab value must be finite, got {self.value!r}")


@dataclass(frozen=True, order=True)
class VitalSign:
    patient_id: str
    date: dt.date
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in VITAL_KINDS:
            raise ValueError(f"vital kind must be one of {VITAL_KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.value) and self.value > 0):
            raise ValueError(f"vital value must be finite and positive, got {self.value!r}")


@dataclass(frozen=True)
class RejectedRow:
    file: str
    line: int
    reason: str


def normalize_icd(raw: str, version: IcdVersion | int | None = None) -> str:
    """Uppercase, strip whitespace and remove dots: ``" k70.30 "`` -> ``"K7030"``.

    ``version`` is accepted for call-site symmetry; normalization is the same
    for both code systems and the version travels alongside the code.
    """
    if version is not None:
        IcdVersion(int(version))
    code = raw.strip().replace(".", "").upper()
    if not code:
        raise MalformedCodeError(f"empty ICD code {raw!r}")
    return code


def code_matches_pattern(code: str, pattern: str) -> bool:
    """Exact match, or prefix match when ``pattern`` ends in a lowercase ``x``."""
    if pattern.endswith("x"):
        return code.startswith(pattern[:-1])
    return code == pattern


class ClinicalRecordSet:
    """Immutable bundle of the five extract tables.

    Collections are sorted by ``(patient_id, date, ...)`` at construction so
    that any downstream computation is independent of on-disk row order.
    """

    __slots__ = ("patients", "encounters", "diagnoses", "labs", "vitals", "rejected", "__dict__")

    def __init__(
        self,
        patients: Iterable[PatientRecord] = (),
        encounters: Iterable[Encounter] = (),
        diagnoses: Iterable[DiagnosisEvent] = (),
        labs: Iterable[LabResult] = (),
        vitals: Iterable[VitalSign] = (),
        rejected: Iterable[RejectedRow] = (),
        validate: bool = True,
    ):
        self.patients = tuple(sorted(patients))
        self.encounters = tuple(sorted(encounters))
        self.diagnoses = tuple(sorted(diagnoses))
        self.labs = tuple(sorted(labs))
        self.vitals = tuple(sorted(vitals))
        self.rejected = tuple(rejected)
        if validate:
            self._validate()

    def _validate(self):
        ids = set()
        for p in self.patients:
            if p.patient_id in ids:
                raise RecordSetError(f"duplicate patient_id {p.patient_id!r}", "patients")
            ids.add(p.patient_id)
        for name in TABLES[1:]:
            for ev in getattr(self, name):
                if ev.patient_id not in ids:
                    raise RecordSetError(f"unknown patient_id {ev.patient_id!r}", name)

    def __eq__(self, other):
        if not isinstance(other, ClinicalRecordSet):
            return NotImplemented
        return all(getattr(self, t) == getattr(other, t) for t in TABLES)

    def __repr__(self):
        counts = ", ".join(f"{t}={len(getattr(self, t))}" for t in TABLES)
        return f"ClinicalRecordSet({counts})"

    def counts(self) -> dict[str, int]:
        return {t: len(getattr(self, t)) for t in TABLES}

    @cached_property
    def patient_index(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}

    def _group(self, name):
        out = defaultdict(list)
        for ev in getattr(self, name):
            out[ev.patient_id].append(ev)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def encounters_by_patient(self) -> dict[str, tuple[Encounter, ...]]:
        return self._group("encounters")

    @cached_property
    def diagnoses_by_patient(self) -> dict[str, tuple[DiagnosisEvent, ...]]:
        return self._group("diagnoses")

    @cached_property
    def labs_by_patient(self) -> dict[str, tuple[LabResult, ...]]:
        return self._group("labs")

    @cached_property
    def vitals_by_patient(self) -> dict[str, tuple[VitalSign, ...]]:
        return self._group("vitals")


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------


def _iter_rows(path: Path):
    """Yield ``(line_number, row_dict)``; leading ``#`` comment lines are skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        # Skip provenance comments without losing physical line numbers.
        pos_line = 0
        while True:
            pos = fh.tell()
            line = fh.readline()
            if not line:
                break
            if line.startswith("#"):
                pos_line += 1
                continue
            fh.seek(pos)
            break
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RecordSetError("missing header row", path.name, pos_line + 1) from None
        yield pos_line + reader.line_num, header
        for row in reader:
            yield pos_line + reader.line_num, row


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _parse_row(table: str, row: dict[str, str]):
    if table == "patients":
        fips = row["county_fips"].strip() or None
        return PatientRecord(
            patient_id=row["patient_id"].strip(),
            birth_date=_parse_date(row["birth_date"]),
            gender=row["gender"].strip() or "Unknown",
            race=row["race"].strip() or "Unknown",
            marital_status=row["marital_status"].strip() or "Unknown",
            county_fips=fips,
        )
    if table == "encounters":
        return Encounter(
            patient_id=row["patient_id"].strip(),
            date=_parse_date(row["date"]),
            encounter_id=row["encounter_id"].strip(),
        )
    if table == "diagnoses":
        version = IcdVersion(int(row["icd_version"]))
        return DiagnosisEvent(
            patient_id=row["patient_id"].strip(),
            date=_parse_date(row["date"]),
            icd_version=version,
            code=normalize_icd(row["code"], version),
        )
    if table == "labs":
        return LabResult(row["patient_id"].strip(), _parse_date(row["date"]), row["loinc"].strip(), float(row["value"]))
    return VitalSign(row["patient_id"].strip(), _parse_date(row["date"]), row["kind"].strip(), float(row["value"]))


def _resolve_paths(paths: Mapping[str, str | os.PathLike] | str | os.PathLike) -> dict[str, Path]:
    if isinstance(paths, Mapping):
        missing = [t for t in TABLES if t not in paths]
        if missing:
            raise RecordSetError(f"no path given for tables {missing}")
        return {t: Path(paths[t]) for t in TABLES}
    base = Path(paths)
    return {t: base / f"{t}.csv" for t in TABLES}


def _read_table(path: Path, table: str, lenient: bool, rejected: list[RejectedRow]):
    if not path.exists():
        raise RecordSetError("file not found", str(path))
    rows = _iter_rows(path)
    _, header = next(rows)
    header = [h.strip() for h in header]
    missing = [c for c in _COLUMNS[table] if c not in header]
    if missing:
        raise RecordSetError(f"missing column(s) {missing}", path.name, 1)
    items, item_lines = [], []
    for line, values in rows:
        if not values:
            continue
        try:
            if len(values) != len(header):
                raise ValueError(f"expected {len(header)} fields, found {len(values)}")
            items.append(_parse_row(table, dict(zip(header, values))))
            item_lines.append(line)
        except (ValueError, KeyError) as exc:
            if not lenient:
                raise RecordSetError(str(exc), path.name, line) from exc
            rejected.append(RejectedRow(path.name, line, str(exc)))
    return items, item_lines


def read_table(path: str | os.PathLike, table: str) -> list:
    """Parse one extract table on its own (no cross-table checks)."""
    if table not in TABLES:
        raise ValueError(f"unknown table {table!r}")
    return _read_table(Path(path), table, False, [])[0]


def load_record_set(
    paths: Mapping[str, str | os.PathLike] | str | os.PathLike,
    lenient: bool = False,
) -> ClinicalRecordSet:
    """Load and validate the five extract CSVs.

    Args:
        paths: mapping ``table -> path`` for the five tables, or a directory
            holding ``patients.csv``, ``encounters.csv``, ... .
        lenient: skip and report rows that fail to parse or reference an
            unknown patient instead of raising on the first one.

    Raises:
        RecordSetError: missing file/column, unparseable row or dangling
            ``patient_id``; the message names the file and line.
    """
    files = _resolve_paths(paths)
    parsed: dict[str, list] = {}
    lines: dict[str, list[int]] = {}
    rejected: list[RejectedRow] = []
    for table in TABLES:
        parsed[table], lines[table] = _read_table(files[table], table, lenient, rejected)

    ids: set[str] = set()
    for p, line in zip(parsed["patients"], lines["patients"]):
        if p.patient_id in ids:
            raise RecordSetError(f"duplicate patient_id {p.patient_id!r}", files["patients"].name, line)
        ids.add(p.patient_id)
    for table in TABLES[1:]:
        kept = []
        for ev, line in zip(parsed[table], lines[table]):
            if ev.patient_id in ids:
                kept.append(ev)
                continue
            msg = f"unknown patient_id {ev.patient_id!r}"
            if not lenient:
                raise RecordSetError(msg, files[table].name, line)
            rejected.append(RejectedRow(files[table].name, line, msg))
        parsed[table] = kept
    return ClinicalRecordSet(**parsed, rejected=rejected, validate=False)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, dt.date):
        return value.isoformat()
    if isinstance(value, IcdVersion):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_record_set(records: ClinicalRecordSet, directory: str | os.PathLike, comment: str | None = None) -> dict[str, Path]:
    """Write the five tables as CSV into ``directory``; returns the paths.

    ``comment`` becomes a leading ``# ...`` line that ``load_record_set``
    skips, used for provenance stamps.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for table in TABLES:
        path = out / f"{table}.csv"
        cols = _COLUMNS[table]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for item in getattr(records, table):
                writer.writerow([_fmt(getattr(item, c)) for c in cols])
        written[table] = path
    return written
