import datetime as dt

import pytest

import oracles
from builders import D, Builder, small_cohort_records
from cirrhosis_horizon.cohort import (
    CASE,
    CONTROL,
    CohortSpec,
    EmptyCohortError,
    build_cohort,
    first_lc_diagnosis,
    identify_fatty_liver,
    match_controls,
    prediction_point,
)
from cirrhosis_horizon.pipeline import write_cohort
from cirrhosis_horizon.ehr import write_record_set


@pytest.mark.parametrize(
    "index, years, expected",
    [("2020-06-15", 1, "2019-06-15"), ("2020-02-29", 1, "2019-02-28"), ("2020-02-29", 4, "2016-02-29"),
     ("2021-01-01", 3, "2018-01-01")],
)
def test_prediction_point(index, years, expected):
    assert prediction_point(D(index), years) == D(expected)


def test_fatty_liver_and_first_lc():
    records = small_cohort_records()
    spec = CohortSpec()
    assert identify_fatty_liver(records, spec) == {"P1", "C1", "C2", "C3", "C4", "C5", "C6"}
    assert first_lc_diagnosis(records, spec, "P1") == D("2020-06-15")
    assert first_lc_diagnosis(records, spec, "C1") is None


def test_lc_patterns_use_prefix_wildcards():
    b = Builder().patient("A").visit("A", "2019-01-01", "K76.0").visit("A", "2020-01-01", "K70.31")
    b.patient("B").visit("B", "2019-01-01", "571.8").visit("B", "2020-01-01", "571.21")
    records = b.build()
    spec = CohortSpec()
    assert first_lc_diagnosis(records, spec, "A") == D("2020-01-01")
    assert first_lc_diagnosis(records, spec, "B") is None  # 571.2 is exact, not a prefix


def test_small_cohort():
    members, report = build_cohort(small_cohort_records(), CohortSpec(window_years=1, rng_seed=1))
    cases = [m for m in members if m.label == CASE]
    controls = [m for m in members if m.label == CONTROL]
    assert [(c.patient_id, c.prediction_point) for c in cases] == [("P1", D("2019-06-15"))]
    # C6 is 8 days out; C5 lacks BMI and is dropped by the complete-case filter.
    assert sorted(c.patient_id for c in controls) == ["C1", "C2", "C3", "C4"]
    assert all(c.anchor_case_id == "P1" and c.anchor_prediction_point == D("2019-06-15") for c in controls)
    assert report.matched_controls_pre_dedup == 5
    assert report.max_controls_per_case_pre_dedup == 5
    assert (report.complete_case_cases, report.complete_case_controls) == (1, 4)


def test_controls_per_case_cap_and_determinism():
    spec = CohortSpec(controls_per_case=2, rng_seed=9)
    a, _ = build_cohort(small_cohort_records(), spec)
    b, _ = build_cohort(small_cohort_records(), spec)
    assert a == b
    assert sum(m.label == CONTROL for m in a) <= 2


def _two_cases_sharing_pool():
    b = Builder()
    for pid, index in (("P1", "2020-06-15"), ("P2", "2020-06-16")):
        b.patient(pid).visit(pid, "2018-01-01", "K76.0").panel(pid, "2018-01-01").visit(pid, index, "K74.60")
    for i in range(3):
        pid = f"C{i}"
        b.patient(pid).visit(pid, "2017-01-01", "571.8").panel(pid, "2017-01-01").visit(pid, "2019-06-15")
    return b.build()


def test_dedup_first_case_wins():
    records = _two_cases_sharing_pool()
    members, report = build_cohort(records, CohortSpec(rng_seed=0))
    controls = [m for m in members if m.label == CONTROL]
    assert sorted(m.patient_id for m in controls) == ["C0", "C1", "C2"]
    assert {m.anchor_case_id for m in controls} == {"P1"}
    assert report.matched_controls_pre_dedup == 6
    assert report.matched_controls == 3


def test_trace_respects_cap():
    records = _two_cases_sharing_pool()
    spec = CohortSpec(controls_per_case=2)
    cases, _ = build_cohort(records, spec)
    cases = [m for m in cases if m.label == CASE]
    _, trace = match_controls(records, spec, cases)
    assert all(len(v) <= 2 for v in trace.values())
    assert all(len(set(v)) == len(v) for v in trace.values())


def test_checker_accepts_built_cohort(tmp_path):
    records = _two_cases_sharing_pool()
    members, _ = build_cohort(records, CohortSpec())
    write_cohort(members, tmp_path / "cohort.csv")
    write_record_set(records, tmp_path)
    assert oracles.check_matching(tmp_path / "cohort.csv", tmp_path / "encounters.csv") == []


def test_checker_flags_a_late_control(tmp_path):
    records = _two_cases_sharing_pool()
    members, _ = build_cohort(records, CohortSpec())
    bad = [m if m.label == CASE else type(m)(**{**m.__dict__, "anchor_prediction_point": m.prediction_point - dt.timedelta(days=8)})
           for m in members]
    write_cohort(bad, tmp_path / "cohort.csv")
    write_record_set(records, tmp_path)
    assert any("days from its anchor" in p for p in oracles.check_matching(tmp_path / "cohort.csv", tmp_path / "encounters.csv"))


@pytest.mark.parametrize(
    "builder, stage",
    [
        (lambda: Builder().patient("A").visit("A", "2019-01-01"), "fatty_liver"),
        (lambda: Builder().patient("A").visit("A", "2019-01-01", "K76.0"), "lc"),
        (lambda: Builder().patient("A").visit("A", "2019-01-01", "K76.0").visit("A", "2020-01-01", "K74.60"), "complete_case"),
    ],
)
def test_empty_cohorts_raise(builder, stage):
    with pytest.raises(EmptyCohortError) as info:
        build_cohort(builder().build(), CohortSpec())
    assert info.value.stage == stage


def test_zero_controls_is_reported_not_raised():
    b = Builder().patient("A").visit("A", "2018-01-01", "K76.0").panel("A", "2018-01-01").visit("A", "2020-01-01", "K74.60")
    members, report = build_cohort(b.build(), CohortSpec())
    assert [m.label for m in members] == [CASE]
    assert report.notes
