import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cirrhosis_horizon.terminology import (
    RUCC_LABELS,
    CcsMap,
    CharlsonMap,
    cci_for_diagnoses,
    ccs_lookup,
    default_data_path,
    load_ccs_map,
    load_charlson_map,
    load_rucc_table,
    rucc_lookup,
)

CHARLSON = load_charlson_map()
ROWS = oracles.read_charlson_csv(default_data_path("charlson_map.csv"))
SHIPPED_CODES = [(int(r["icd_version"]), r["code_prefix"]) for r in ROWS]


def test_ccs_longest_prefix_wins():
    ccs = CcsMap([(10, "K7", 1, "broad"), (10, "K76", 2, "narrow"), (9, "571", 3, "nine")])
    assert ccs_lookup(ccs, 10, "K760") == 2
    assert ccs_lookup(ccs, 10, "K74") == 1
    assert ccs_lookup(ccs, 9, "K760") is None
    assert ccs_lookup(ccs, 9, "5718") == 3
    assert ccs.category_ids == [1, 2, 3]


def test_shipped_ccs_map_loads():
    ccs = load_ccs_map()
    assert ccs.lookup(10, "E785") == 53
    assert ccs.lookup(9, "2724") == 53


@pytest.mark.parametrize(
    "codes, hierarchy, expected",
    [
        ([(10, "E119"), (10, "I509")], True, 2),  # diabetes + heart failure
        ([(10, "E119"), (10, "E112")], True, 2),  # complicated diabetes silences uncomplicated
        ([(10, "E119"), (10, "E112")], False, 3),
        ([(10, "C787"), (10, "C509")], True, 6),  # metastasis silences malignancy
        ([(10, "C787"), (10, "C509")], False, 8),
        ([(10, "I509"), (10, "I509"), (9, "4280")], True, 1),  # a category counts once
        ([(10, "Z000")], True, 0),
        ([], True, 0),
    ],
)
def test_cci_examples(codes, hierarchy, expected):
    assert cci_for_diagnoses(CHARLSON, codes, hierarchy) == expected


@given(st.lists(st.sampled_from(SHIPPED_CODES), max_size=8), st.sampled_from(SHIPPED_CODES))
def test_cci_is_monotone_without_hierarchy(codes, extra):
    assert cci_for_diagnoses(CHARLSON, codes + [extra], hierarchy=False) >= cci_for_diagnoses(CHARLSON, codes, hierarchy=False)


@given(st.lists(st.sampled_from(SHIPPED_CODES), max_size=8))
def test_cci_ignores_duplicates_and_matches_oracle(codes):
    assert cci_for_diagnoses(CHARLSON, codes + codes) == cci_for_diagnoses(CHARLSON, codes)
    assert cci_for_diagnoses(CHARLSON, codes) == oracles.brute_force_cci(ROWS, codes)
    assert 0 <= cci_for_diagnoses(CHARLSON, codes) <= CHARLSON.max_score


def test_charlson_has_seventeen_categories():
    assert len(CHARLSON.weights) == 17


def test_charlson_rejects_bad_weight():
    with pytest.raises(ValueError):
        CharlsonMap([(10, "I50", "chf", 4)])


def test_rucc_lookup():
    table = load_rucc_table()
    code, label = rucc_lookup(table, "99001")
    assert code == 1 and label == RUCC_LABELS[1]
    assert rucc_lookup(table, None) is None
    assert rucc_lookup(table, "00000") is None
