import datetime as dt

import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import Builder, small_cohort_records
from cirrhosis_horizon.ehr import (
    TABLES,
    ClinicalRecordSet,
    Encounter,
    IcdVersion,
    MalformedCodeError,
    PatientRecord,
    RecordSetError,
    code_matches_pattern,
    load_record_set,
    normalize_icd,
    read_table,
    write_record_set,
)


@pytest.mark.parametrize("raw, expected", [(" k70.30 ", "K7030"), ("571.8", "5718"), ("K760", "K760")])
def test_normalize_icd(raw, expected):
    assert normalize_icd(raw) == expected


def test_normalize_rejects_empty():
    with pytest.raises(MalformedCodeError):
        normalize_icd(" . ")


@given(st.text(alphabet="ABCKZ0123456789.", min_size=1, max_size=8).filter(lambda s: s.strip(".")))
def test_normalize_is_idempotent(raw):
    once = normalize_icd(raw)
    assert normalize_icd(once) == once


@pytest.mark.parametrize(
    "code, pattern, hit",
    [("K7460", "K74.6x", False), ("K7460", "K746x", True), ("K746", "K746x", True), ("K745", "K746x", False),
     ("5712", "5712", True), ("57120", "5712", False)],
)
def test_code_matches_pattern(code, pattern, hit):
    assert code_matches_pattern(code, pattern) is hit


def test_record_set_sorts_and_validates():
    with pytest.raises(RecordSetError, match="unknown patient_id"):
        ClinicalRecordSet([PatientRecord("A", dt.date(1970, 1, 1))], [Encounter("B", dt.date(2020, 1, 1), "e")])
    rs = ClinicalRecordSet(
        [PatientRecord("B", dt.date(1970, 1, 1)), PatientRecord("A", dt.date(1971, 1, 1))],
        [Encounter("A", dt.date(2020, 2, 1), "e2"), Encounter("A", dt.date(2020, 1, 1), "e1")],
    )
    assert [p.patient_id for p in rs.patients] == ["A", "B"]
    assert [e.encounter_id for e in rs.encounters_by_patient["A"]] == ["e1", "e2"]


def test_round_trip(tmp_path):
    records = small_cohort_records()
    write_record_set(records, tmp_path, comment="provenance line")
    assert (tmp_path / "labs.csv").read_text().startswith("# provenance line\n")
    again = load_record_set(tmp_path)
    for table in TABLES:
        assert getattr(again, table) == getattr(records, table)


def _write_minimal(tmp_path, **override):
    tables = {
        "patients": "patient_id,birth_date,gender,race,marital_status,county_fips\nA,1970-01-01,Female,White,Married,\n",
        "encounters": "encounter_id,patient_id,date\ne1,A,2020-01-01\n",
        "diagnoses": "patient_id,date,icd_version,code\nA,2020-01-01,10,k76.0\n",
        "labs": "patient_id,date,loinc,value\nA,2020-01-01,1742-6,30\n",
        "vitals": "patient_id,date,kind,value\nA,2020-01-01,BMI,31.5\n",
    }
    tables.update(override)
    for name, text in tables.items():
        (tmp_path / f"{name}.csv").write_text(text)


def test_loader_normalizes_codes(tmp_path):
    _write_minimal(tmp_path)
    rs = load_record_set(tmp_path)
    assert rs.diagnoses[0].code == "K760"
    assert rs.diagnoses[0].icd_version is IcdVersion.ICD10
    assert rs.patients[0].county_fips is None


@pytest.mark.parametrize(
    "table, text, message",
    [
        ("labs", "patient_id,date,loinc\nA,2020-01-01,1742-6\n", "missing column"),
        ("labs", "patient_id,date,loinc,value\nA,2020-13-01,1742-6,3\n", "labs.csv"),
        ("encounters", "encounter_id,patient_id,date\ne1,Z,2020-01-01\n", "unknown patient_id"),
        ("diagnoses", "patient_id,date,icd_version,code\nA,2020-01-01,11,K760\n", "diagnoses.csv:2:"),
    ],
)
def test_loader_errors_name_file_and_line(tmp_path, table, text, message):
    _write_minimal(tmp_path, **{table: text})
    with pytest.raises(RecordSetError, match=message):
        load_record_set(tmp_path)


def test_lenient_mode_reports_rejects(tmp_path):
    _write_minimal(tmp_path, labs="patient_id,date,loinc,value\nA,2020-01-01,1742-6,x\nA,2020-01-02,1742-6,3\nQ,2020-01-01,1742-6,3\n")
    rs = load_record_set(tmp_path, lenient=True)
    assert len(rs.labs) == 1
    assert [(r.file, r.line) for r in rs.rejected] == [("labs.csv", 2), ("labs.csv", 4)]


def test_missing_file(tmp_path):
    _write_minimal(tmp_path)
    (tmp_path / "vitals.csv").unlink()
    with pytest.raises(RecordSetError, match="file not found"):
        load_record_set(tmp_path)


def test_read_table_alone(tmp_path):
    _write_minimal(tmp_path)
    assert read_table(tmp_path / "vitals.csv", "vitals")[0].value == 31.5


def test_duplicate_patient(tmp_path):
    b = Builder().patient("A").patient("A")
    with pytest.raises(RecordSetError, match="duplicate"):
        b.build()
