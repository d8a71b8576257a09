import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthopgd.metrics import auc, calibrate_phi, false_positive_rate, roc, success_rate_at, trapezoid_auc


def mann_whitney(benign, adv):
    """O(n^2) pair-counting AUC with ties counted one half."""
    wins = 0.0
    for a in adv:
        for b in benign:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(adv) * len(benign))


def phi_by_definition(scores, n_percent):
    """Smallest candidate score whose strict exceedance fraction is within budget."""
    scores = list(scores)
    ok = [s for s in scores if sum(v > s for v in scores) <= n_percent / 100 * len(scores)]
    return min(ok)


def test_phi_examples():
    phi = calibrate_phi([1, 2, 3, 4], 50)
    assert phi == 2
    assert false_positive_rate([1, 2, 3, 4], phi) == 0.5
    assert calibrate_phi([3.0, -1.0, 7.5], 0) == 7.5


def test_phi_empty_and_range_errors():
    with pytest.raises(ValueError):
        calibrate_phi([], 5)
    with pytest.raises(ValueError):
        calibrate_phi([1.0], 101)


def test_phi_ties_break_toward_fewer_false_positives():
    # 2 of 4 scores equal 1; any phi below 1 would flag three
    assert calibrate_phi([0.0, 1.0, 1.0, 2.0], 50) == 1.0
    assert calibrate_phi([0.0, 1.0, 1.0, 2.0], 25) == 1.0
    assert calibrate_phi([0.0, 1.0, 1.0, 2.0], 24) == 2.0


def test_phi_matches_definition_on_random_samples():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.integers(0, 8, size=rng.integers(1, 15)).astype(float)
        n = float(rng.choice([0, 5, 10, 25, 50, 73, 100]))
        assert calibrate_phi(s, n) == phi_by_definition(s, n)


def test_phi_gaussian_resample():
    benign = np.random.default_rng(0).normal(size=1000)
    fresh = np.random.default_rng(1).normal(size=1000)
    rate = false_positive_rate(fresh, calibrate_phi(benign, 5))
    assert 0.04 <= rate <= 0.06


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=60), st.floats(0, 100))
def test_phi_realised_fpr_bounds(scores, n):
    phi = calibrate_phi(scores, n)
    rate = false_positive_rate(scores, phi)
    assert rate <= n / 100 + 1e-12
    if len(set(scores)) == len(scores):
        assert rate > n / 100 - 1 / len(scores) - 1e-12


def outcome(hit, score):
    return {"classified_as_target": hit, "detector_score": score}


def test_sr_trivial_cases():
    benign = np.linspace(0, 1, 100)
    assert success_rate_at([outcome(True, -1.0)] * 10, benign, 5) == 1.0
    assert success_rate_at([outcome(False, -1.0)] * 10, benign, 5) == 0.0
    assert success_rate_at([], benign, 5) == 0.0


@pytest.mark.parametrize("count", [10, 20])
def test_sr_matches_exhaustive_definition(count):
    rng = np.random.default_rng(count)
    benign = rng.normal(size=50)
    for _ in range(50):
        outs = [outcome(bool(rng.integers(0, 2)), float(rng.normal(0.5))) for _ in range(count)]
        for n in (5, 50):
            phi = phi_by_definition(benign, n)
            expected = sum(o["classified_as_target"] and o["detector_score"] <= phi for o in outs) / count
            assert success_rate_at(outs, benign, n) == expected


def test_sr_boundary_score_equal_to_phi_counts_as_success():
    benign = [1.0, 2.0, 3.0, 4.0]
    assert success_rate_at([outcome(True, 2.0)], benign, 50) == 1.0
    assert success_rate_at([outcome(True, 2.0 + 1e-12)], benign, 50) == 0.0


def test_sr_is_non_increasing_in_n():
    # a larger tolerated false-positive rate lowers phi, so more attacks are flagged
    rng = np.random.default_rng(5)
    benign = rng.normal(size=200)
    outs = [outcome(bool(rng.integers(0, 2)), float(rng.normal(1))) for _ in range(100)]
    rates = [success_rate_at(outs, benign, n) for n in range(0, 101, 5)]
    assert all(a >= b for a, b in itertools.pairwise(rates))
    assert rates[1] > rates[10]


def test_roc_examples():
    assert auc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auc([0.8, 0.9], [0.1, 0.2]) == 0.0
    assert auc([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]) == 0.5


def test_roc_self_auc_is_exactly_half():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = rng.integers(0, 5, size=rng.integers(1, 40)).astype(float)
        assert auc(b, b) == 0.5


def test_roc_matches_mann_whitney_on_50_seeds():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        benign = np.round(rng.normal(size=rng.integers(1, 60)), 1)
        adv = np.round(rng.normal(0.5, size=rng.integers(1, 60)), 1)
        assert abs(auc(benign, adv) - mann_whitney(benign, adv)) < 1e-9


def test_roc_curve_shape():
    rng = np.random.default_rng(3)
    curve = roc(rng.normal(size=30), rng.normal(1, size=40))
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert abs(curve.auc - trapezoid_auc(curve.fpr, curve.tpr)) < 1e-12
    assert 0.0 <= curve.auc <= 1.0


def test_roc_empty_errors():
    with pytest.raises(ValueError):
        roc([], [1.0])
