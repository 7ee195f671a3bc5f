import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import D, PANEL_VALUES, Builder, small_cohort_records
from cirrhosis_horizon.cohort import CohortSpec, build_cohort
from cirrhosis_horizon.ehr import ClinicalRecordSet
from cirrhosis_horizon.features import (
    AGE_COLUMN,
    CCI_COLUMN,
    FeatureMatrix,
    FeatureSchema,
    InvalidDemographicsError,
    WindowGuard,
    age_at,
    assemble_matrix,
    lab_column,
    mean_cci,
    mean_in_window,
)
from cirrhosis_horizon.terminology import load_ccs_map, load_charlson_map, load_rucc_table

CCS, CHARLSON, RUCC = load_ccs_map(), load_charlson_map(), load_rucc_table()
PP = D("2019-06-15")


def test_mean_in_window_includes_the_cut_off_day():
    series = [(D("2019-06-14"), 1.0), (D("2019-06-15"), 3.0), (D("2019-06-16"), 100.0)]
    guard = WindowGuard()
    assert mean_in_window(series, PP, guard) == 2.0
    assert (guard.consumed, guard.violations) == (2, 0)
    assert mean_in_window([(D("2019-06-16"), 1.0)], PP) is None


@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(1, 50))
def test_mean_of_copies_is_the_value(v, k):
    assert mean_in_window([(PP, v)] * k, PP) == v


def test_guard_counts_violations():
    guard = WindowGuard()
    guard.consume(D("2019-06-16"), PP)
    assert guard.violations == 1


@pytest.mark.parametrize(
    "birth, at, age",
    [("1960-06-15", "2019-06-15", 59), ("1960-06-16", "2019-06-15", 58), ("1960-02-29", "2019-02-28", 58),
     ("1960-02-29", "2019-03-01", 59), ("1960-02-29", "2020-02-29", 60)],
)
def test_age_at(birth, at, age):
    assert age_at(D(at), D(birth)) == age


def test_age_after_prediction_point_is_invalid():
    with pytest.raises(InvalidDemographicsError):
        age_at(D("2000-01-01"), D("2001-01-01"))


def test_mean_cci_uses_encounter_day_diagnoses_only():
    b = Builder().patient("A")
    b.visit("A", "2019-01-01", "E11.9", "I50.9")  # 2
    b.visit("A", "2019-02-01")  # 0
    b.dx("A", "2019-03-01", "C78.7")  # no encounter that day: ignored
    b.visit("A", "2019-07-01", "C78.7")  # after the prediction point
    records = b.build()
    guard = WindowGuard()
    assert mean_cci(records, "A", PP, CHARLSON, guard) == 1.0
    assert guard.violations == 0
    assert mean_cci(records, "Z", PP, CHARLSON) == 0.0


def _matrix(records=None, **kw):
    records = records or small_cohort_records()
    cohort, _ = build_cohort(records, CohortSpec(rng_seed=1))
    guard = WindowGuard()
    return assemble_matrix(records, cohort, CCS, CHARLSON, RUCC, guard, **kw), cohort, guard


def test_matrix_values():
    m, cohort, guard = _matrix()
    assert m.patient_ids == tuple(c.patient_id for c in cohort)
    assert guard.violations == 0 and guard.consumed > 0
    # P1's tripled labs are dated inside the prediction window and must not leak.
    assert m.column(lab_column("1920-8"))[0] == PANEL_VALUES["1920-8"]
    assert m.column(AGE_COLUMN)[0] == 59
    assert m.labels.tolist() == [1, 0, 0, 0, 0]
    for name in ("gender", "race", "marital", "rucc"):
        a, b = m.schema.groups[name]
        assert np.all(m.values[:, a:b].sum(axis=1) == 1.0)
    assert np.all(m.column("rucc_Unknown") == 1.0)
    assert np.all(m.column("gender_Unknown") == 1.0)


def test_single_member_cohort_and_ccs_flags():
    b = Builder().patient("A", gender="Female", county_fips="99001")
    b.visit("A", "2018-01-01", "K76.0", "E78.5").panel("A", "2018-01-01").visit("A", "2020-01-01", "K74.60")
    m, _, _ = _matrix(b.build())
    assert m.n_rows == 1
    assert m.column("gender_Female")[0] == 1.0
    assert m.column("rucc_1")[0] == 1.0
    assert m.column("ccs_53")[0] == 1.0
    assert m.column(CCI_COLUMN)[0] == 1.0  # K76.0 is mild liver disease


def test_permutation_invariance():
    records = small_cohort_records()
    shuffled = []
    rng = random.Random(5)
    for table in ("patients", "encounters", "diagnoses", "labs", "vitals"):
        items = list(getattr(records, table))
        rng.shuffle(items)
        shuffled.append(items)
    a, _, _ = _matrix(records)
    b, _, _ = _matrix(ClinicalRecordSet(*shuffled))
    assert a.values.tobytes() == b.values.tobytes()
    assert np.array_equal(a.mask, b.mask)


def test_csv_round_trip(tmp_path):
    m, _, _ = _matrix()
    m.to_csv(tmp_path / "f.csv", comment="x")
    schema = FeatureSchema.from_dict(m.schema.to_dict())
    back = FeatureMatrix.from_csv(tmp_path / "f.csv", schema)
    assert back.patient_ids == m.patient_ids
    assert np.array_equal(back.values, m.values) and np.array_equal(back.mask, m.mask)


def test_misaligned_matrix_is_rejected():
    m, _, _ = _matrix()
    with pytest.raises(ValueError):
        FeatureMatrix(m.patient_ids[:-1], m.labels, m.values, m.mask, m.schema)
