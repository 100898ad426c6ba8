import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alistudy.ali import (
    COMPONENTS,
    ComponentMeasurement,
    StressorProfile,
    ThresholdTable,
    apply_roadmap,
    classify_component,
    compute_ali,
    profile_from_measurements,
)
from alistudy.errors import ConfigurationError, DataError

# (component, cutoff, stressor at the cutoff itself, direction, sex)
BOUNDARIES = [
    ("systolic_bp", 140.0, 0, "above", None),
    ("diastolic_bp", 90.0, 0, "above", None),
    ("bmi", 30.0, 0, "above", None),
    ("triglycerides", 150.0, 1, "above", None),
    ("total_cholesterol", 200.0, 1, "above", None),
    ("crp", 10.0, 1, "above", None),
    ("hba1c", 6.5, 1, "above", None),
    ("serum_albumin", 3.5, 1, "above", None),
    ("creatinine_clearance", 110.0, 0, "below", "male"),
    ("homocysteine", 50.0, 0, "above", None),
]


def stress(comp, value, sex=None):
    return classify_component(ComponentMeasurement(comp, value, sex))


def profile(**kw):
    return StressorProfile.from_values(kw)


@pytest.mark.parametrize("comp,cut,at_cut,direction,sex", BOUNDARIES)
def test_boundary_inclusivity(comp, cut, at_cut, direction, sex):
    assert stress(comp, cut, sex) == at_cut
    above = math.nextafter(cut, math.inf)
    below = math.nextafter(cut, -math.inf)
    if direction == "above":
        assert stress(comp, above, sex) == 1
        assert stress(comp, below, sex) == 0
    else:
        assert stress(comp, below, sex) == 1
        assert stress(comp, above, sex) == 0


def test_creatinine_clearance_is_sex_specific():
    assert stress("creatinine_clearance", 105.0, "male") == 1
    assert stress("creatinine_clearance", 105.0, "female") == 0
    assert stress("creatinine_clearance", 100.0, "female") == 0
    assert stress("creatinine_clearance", 99.9, "female") == 1
    with pytest.raises(DataError):
        stress("creatinine_clearance", 105.0, None)


def test_hba1c_examples():
    assert stress("hba1c", 6.5) == 1
    assert stress("hba1c", 5.6) == 0
    assert stress("hba1c", None) is None
    assert stress("systolic_bp", 140.0) == 0


def test_unknown_component_and_nonfinite_value():
    with pytest.raises(ConfigurationError):
        ComponentMeasurement("pulse", 80.0)
    with pytest.raises(DataError):
        ComponentMeasurement("bmi", float("nan"))


def test_default_table_aux_terms():
    t = ThresholdTable.default()
    for comp in COMPONENTS:
        if comp == "serum_albumin":
            assert t.aux_terms(comp) == ()
        else:
            assert len(t.aux_terms(comp)) >= 1
    assert t.aux_terms("hba1c") == ("Diabetes", "Impaired Glycemic Control")


def test_threshold_config_override(tmp_path):
    path = tmp_path / "t.yaml"
    path.write_text("thresholds:\n  serum_albumin:\n    direction: below\n    inclusive: false\n")
    t = ThresholdTable.load(path)
    assert classify_component(ComponentMeasurement("serum_albumin", 3.4), t) == 1
    assert classify_component(ComponentMeasurement("serum_albumin", 3.5), t) == 0
    with pytest.raises(ConfigurationError):
        ThresholdTable.from_config({"pulse": {"cutoff": 1}})
    with pytest.raises(ConfigurationError):
        ThresholdTable.from_config({"bmi": {"cutof": 1}})


def test_compute_ali_examples():
    p = profile(systolic_bp=1, diastolic_bp=1, bmi=0, triglycerides=0, total_cholesterol=0, crp=0)
    a = compute_ali(p)
    assert (a.numerator, a.denominator) == (2, 6)
    assert a.value == pytest.approx(1 / 3)
    assert compute_ali(profile(**{c: 0 for c in COMPONENTS})).value == 0
    empty = compute_ali(profile())
    assert empty.value is None and empty.denominator == 0


def test_roadmap_recovers_hba1c_from_diabetes():
    p = profile(systolic_bp=1, diastolic_bp=0)
    out = apply_roadmap(p, ["Type 2 DIABETES mellitus"])
    assert out.stressors["hba1c"] == 1 and out.recovered["hba1c"]
    assert compute_ali(out).denominator == compute_ali(p).denominator + 1


def test_roadmap_never_recovers_albumin():
    out = apply_roadmap(profile(), ["Hypoalbuminemia", "albumin", "Diabetes", "Sepsis"])
    assert out.stressors["serum_albumin"] is None


def test_roadmap_noop_without_missing():
    p = profile(**{c: 0 for c in COMPONENTS})
    assert apply_roadmap(p, ["Diabetes", "Hypertension"]) == p


def test_measurements_are_averaged_before_thresholding():
    p = profile_from_measurements({"hba1c": [6.0, 7.0, None]}, None)
    assert p.stressors["hba1c"] == 1  # mean 6.5
    p = profile_from_measurements({"systolic_bp": [150.0, 130.0]}, None)
    assert p.stressors["systolic_bp"] == 0  # mean 140, strict


def test_corrected_value_and_roadmap_recovery():
    # transposed lab value corrected on review, and missing lab recovered from a diagnosis
    ehr = profile_from_measurements({"hba1c": [5.6]}, None)
    chart = profile_from_measurements({"hba1c": [6.5]}, None)
    assert (ehr.stressors["hba1c"], chart.stressors["hba1c"]) == (0, 1)
    missing = profile_from_measurements({"systolic_bp": [120.0]}, None)
    recovered = apply_roadmap(missing, ["Diabetes"])
    assert compute_ali(recovered).denominator == compute_ali(missing).denominator + 1


stressor = st.sampled_from([0, 1, None])
profiles = st.fixed_dictionaries({c: stressor for c in COMPONENTS}).map(StressorProfile)
all_terms = sorted({t for c in COMPONENTS for t in ThresholdTable.default().aux_terms(c)})
chart_terms = st.lists(st.one_of(st.sampled_from(all_terms), st.text(max_size=12)), max_size=5)


@given(profiles)
def test_ali_in_unit_interval(p):
    a = compute_ali(p)
    assert 0 <= a.numerator <= a.denominator <= 10
    if a.denominator:
        assert 0 <= a.value <= 1 and a.value == a.numerator / a.denominator
    else:
        assert a.value is None


@given(profiles, chart_terms)
def test_roadmap_monotone_and_idempotent(p, terms):
    out = apply_roadmap(p, terms)
    for c in COMPONENTS:
        if p.stressors[c] is not None:
            assert out.stressors[c] == p.stressors[c] and not out.recovered[c]
        elif out.stressors[c] is not None:
            assert out.stressors[c] == 1 and out.recovered[c]
    assert compute_ali(out).denominator >= compute_ali(p).denominator
    assert apply_roadmap(out, terms) == out


@given(profiles, st.sampled_from(COMPONENTS))
def test_adding_a_stressor_recomputes_directly(p, comp):
    if p.stressors[comp] is not None:
        return
    before = compute_ali(p)
    after = compute_ali(StressorProfile({**p.stressors, comp: 1}))
    assert after.numerator == before.numerator + 1
    assert after.denominator == before.denominator + 1
    if before.value is not None:
        assert after.value >= before.value


@settings(max_examples=200)
@given(st.sampled_from(BOUNDARIES), st.floats(-1e3, 1e3, allow_nan=False))
def test_classification_agrees_with_rule(case, offset):
    comp, cut, at_cut, direction, sex = case
    v = cut + offset
    expected = at_cut if v == cut else int((v > cut) if direction == "above" else (v < cut))
    assert stress(comp, v, sex) == expected
