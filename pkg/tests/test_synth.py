import dataclasses
import numpy as np
import pytest

from cirrhosis_horizon.cohort import CohortSpec, build_cohort
from cirrhosis_horizon.ehr import load_record_set
from cirrhosis_horizon.synth import (
    CONTINUOUS_VARIABLES,
    ConfigError,
    ContinuousSpec,
    default_config,
    generate,
    load_config,
    read_truth,
)
from cirrhosis_horizon.terminology import load_rucc_table


def _small(window=1, seed=0, **kw):
    return dataclasses.replace(default_config(window, rng_seed=seed), n_cases=30, n_controls=60, **kw)


def test_default_config_examples():
    one, two, three = default_config(1), default_config(2), default_config(3)
    ast = one.continuous_spec("1920-8", "case")
    assert (ast.mean, ast.sd) == (48.4, 36.8)
    assert (one.n_cases, one.n_controls) == (904, 2139)
    assert two.n_cases == 508
    bmi = three.continuous["BMI"]["control"]
    assert (bmi.mean, bmi.sd) == (33.3, 7.9)
    # BMI is not planted at three years, so both groups draw from the overall column.
    assert three.continuous_spec("BMI", "control") == three.continuous["BMI"]["overall"]
    assert one.continuous_spec("26515-7", "control").mean == 243.2
    assert one.continuous_spec("26515-7", "case").mean == 191.7
    # Non-significant variables share the overall distribution across groups.
    assert "718-7" not in one.planted.variables
    assert one.continuous_spec("718-7", "case") == one.continuous_spec("718-7", "control")
    with pytest.raises(ConfigError):
        default_config(4)


def test_config_json_round_trip(tmp_path):
    cfg = default_config(2, rng_seed=5)
    path = tmp_path / "gen.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"window_years": 1,\n "n_cases": }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(bad)
    with pytest.raises(ConfigError):
        dataclasses.replace(default_config(1), n_cases=0)
    with pytest.raises(ConfigError):
        ContinuousSpec(10.0, -1.0)


@pytest.mark.parametrize("dist", ["truncated_normal", "lognormal"])
def test_continuous_spec_moments(dist):
    spec = ContinuousSpec(30.0, 20.0, dist)
    x = spec.sample(np.random.default_rng(0), 20000)
    assert x.min() >= 0.0
    assert abs(x.mean() - 30.0) < 3 * 20.0 / np.sqrt(20000)
    assert abs(x.std() - 20.0) < 0.5
    assert spec.expected_mean() == pytest.approx(30.0, rel=1e-6)


def test_generation_is_deterministic_and_seed_dependent():
    a, b = generate(_small(seed=1)), generate(_small(seed=1))
    assert a.records.labs == b.records.labs and a.truth == b.truth
    assert generate(_small(seed=2)).records.labs != a.records.labs


def test_zero_controls():
    ex = generate(dataclasses.replace(_small(), n_controls=0))
    assert all(t.true_label == 1 for t in ex.truth)


def test_write_and_reload(tmp_path):
    ex = generate(_small(), load_rucc_table())
    ex.write(tmp_path, "stamp")
    records = load_record_set(tmp_path)
    assert records.labs == ex.records.labs
    assert read_truth(tmp_path / "truth.csv") == ex.truth


@pytest.mark.parametrize("window", [1, 2, 3])
def test_cohort_recovers_truth(window):
    ex = generate(_small(window, seed=3, incomplete_fraction=0.0))
    members, report = build_cohort(ex.records, CohortSpec(window_years=window, rng_seed=3))
    truth = {t.patient_id: t for t in ex.truth}
    cases = [m for m in members if m.label == "case"]
    assert len(cases) == 30
    for m in cases:
        assert truth[m.patient_id].true_label == 1
        assert m.prediction_point == truth[m.patient_id].prediction_point
    assert all(truth[m.patient_id].true_label == 0 for m in members if m.label == "control")
    assert report.complete_case_controls > 0


def test_cases_carry_prediction_window_leak():
    ex = generate(_small(seed=4))
    truth = {t.patient_id: t for t in ex.truth if t.true_label}
    after = [lab for lab in ex.records.labs if lab.patient_id in truth and lab.date > truth[lab.patient_id].prediction_point]
    assert after, "cases should have labs inside the prediction window"


def test_every_variable_is_configured():
    cfg = default_config(1)
    assert set(cfg.continuous) == set(CONTINUOUS_VARIABLES)


def test_lc_codes_only_on_case_index_dates():
    ex = generate(_small(seed=6))
    spec = CohortSpec()
    from cirrhosis_horizon.cohort import first_lc_diagnosis

    for t in ex.truth:
        first = first_lc_diagnosis(ex.records, spec, t.patient_id)
        assert first == (t.index_date if t.true_label else None)
