import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctpa_pe.consistency import (
    DEFAULT_RULES,
    DELTA,
    PredictionSet,
    enforce,
    labels_to_prediction,
    validate,
)
from ctpa_pe.data import SyntheticSpec, generate_synthetic_study, random_synthetic_specs
from ctpa_pe.labels import STUDY_LABELS

from oracles import rules_satisfied


def _preds(image, **study):
    base = {n: 0.1 for n in STUDY_LABELS}
    base.update(study)
    return PredictionSet(np.asarray(image), base)


def _ids(preds):
    return [v.rule_id for v in validate(preds).violations]


def test_consistent_positive_study():
    p = _preds([0.9], leftsided=0.8, rvlv_lt_1=0.7)
    assert validate(p).is_consistent


def test_positive_study_with_negative_label():
    p = _preds([0.9], negative_for_pe=0.7, leftsided=0.8, rvlv_lt_1=0.7)
    assert _ids(p) == ["R4"]
    fixed = enforce(p)
    assert validate(fixed).is_consistent
    assert fixed["negative_for_pe"] == pytest.approx(0.5 - DELTA)
    changed = np.flatnonzero(fixed.study_probs != p.study_probs)
    assert [STUDY_LABELS[i] for i in changed] == ["negative_for_pe"]


def test_negative_study_with_laterality():
    p = _preds([0.2, 0.3], negative_for_pe=0.9, rightsided=0.6)
    assert _ids(p) == ["R5"]
    fixed = enforce(p)
    assert fixed["rightsided"] <= 0.5
    assert validate(fixed).is_consistent


def test_both_rvlv_keeps_larger():
    p = _preds([0.9], central=0.8, rvlv_gte_1=0.7, rvlv_lt_1=0.6)
    assert _ids(p) == ["R2"]
    fixed = enforce(p)
    assert fixed["rvlv_gte_1"] == 0.7
    assert fixed["rvlv_lt_1"] == pytest.approx(0.5 - DELTA)


def test_boundary_is_not_predicted():
    p = _preds([0.5], negative_for_pe=0.5)
    # image at exactly 0.5 is not positive, and a 0.5 negative label is not predicted
    assert not p.pe_positive
    assert _ids(p) == ["R4"]
    fixed = enforce(p)
    assert fixed["negative_for_pe"] == pytest.approx(0.5 + DELTA)


def test_ties_follow_label_order():
    p = _preds([0.9], leftsided=0.3, rightsided=0.3, central=0.3, rvlv_gte_1=0.9)
    fixed = enforce(p)
    assert fixed["leftsided"] == pytest.approx(0.5 + DELTA)
    assert fixed["rightsided"] == 0.3


def test_image_probs_untouched_and_input_not_mutated():
    p = _preds([0.2, 0.95], negative_for_pe=0.9)
    before = p.study_probs.copy()
    fixed = enforce(p)
    np.testing.assert_array_equal(fixed.image_probs, p.image_probs)
    np.testing.assert_array_equal(p.study_probs, before)


def test_rule_table():
    assert [r.id for r in DEFAULT_RULES] == ["R1", "R2", "R3", "R4", "R5"]
    for r in DEFAULT_RULES:
        assert set(r.labels) <= set(STUDY_LABELS)


def test_ground_truth_labels_are_consistent():
    for i, spec in enumerate(random_synthetic_specs(60, 9, slice_range=(6, 10), size=32)):
        s = generate_synthetic_study(i, spec)
        p = labels_to_prediction(s.labels.image_pe, s.labels.study)
        assert validate(p).is_consistent, s.study_id
    neg = generate_synthetic_study(0, SyntheticSpec(n_slices=6, height=32, width=32, pe_present=False, indeterminate=True))
    assert validate(labels_to_prediction(neg.labels.image_pe, neg.labels.study)).is_consistent


def _random_sets(rng, n):
    # mass near the 0.5 boundary and at the extremes
    pool = np.r_[np.linspace(0, 1, 21), 0.5 - DELTA, 0.5 + DELTA, 0.4999, 0.5001]
    for _ in range(n):
        k = int(rng.integers(1, 5))
        image = rng.choice(pool, size=k) if rng.random() < 0.5 else rng.uniform(0, 1, k)
        study = rng.choice(pool, size=9) if rng.random() < 0.5 else rng.uniform(0, 1, 9)
        yield PredictionSet(image, study)


def test_soundness_idempotence_minimality():
    rng = np.random.default_rng(2024)
    for p in _random_sets(rng, 10_000):
        fixed = enforce(p)
        assert rules_satisfied(fixed.image_probs, fixed.as_dict())
        assert validate(fixed).is_consistent
        np.testing.assert_array_equal(enforce(fixed).study_probs, fixed.study_probs)
        np.testing.assert_array_equal(fixed.image_probs, p.image_probs)
        touched = {STUDY_LABELS[i] for i in np.flatnonzero(fixed.study_probs != p.study_probs)}
        allowed = set()
        for v in validate(p).violations:
            allowed |= set(next(r for r in DEFAULT_RULES if r.id == v.rule_id).labels)
        assert touched <= allowed
        # agreement between validator and the independent rule statement
        assert validate(p).is_consistent == rules_satisfied(p.image_probs, p.as_dict())


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.lists(st.floats(0, 1), min_size=9, max_size=9))
def test_enforce_properties(image, study):
    p = PredictionSet(image, study)
    fixed = enforce(p)
    assert validate(fixed).is_consistent
    if validate(p).is_consistent:
        np.testing.assert_array_equal(fixed.study_probs, p.study_probs)
    assert np.all((fixed.study_probs >= 0) & (fixed.study_probs <= 1))
