"""Threshold calibration, success rate at a fixed false-positive rate, ROC/AUC.

Convention used throughout: an input is flagged as adversarial when its
detector score is strictly greater than the threshold ``phi``; an attack
succeeds when it reaches its target and is not flagged (``score <= phi``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


def calibrate_phi(benign_scores, fpr_percent: float) -> float:
    """Smallest benign score ``phi`` with ``mean(benign > phi) <= fpr_percent / 100``."""
    s = np.sort(np.asarray(benign_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("calibrate_phi needs at least one benign score")
    if not 0 <= fpr_percent <= 100:
        raise ValueError("fpr_percent must lie in [0, 100]")
    n = s.size
    # for candidate s[k], the number strictly above it is n - (index past its last tie)
    above = n - np.searchsorted(s, s, side="right")
    ok = above <= fpr_percent / 100.0 * n + 1e-12 * n
    return float(s[np.argmax(ok)])


def false_positive_rate(benign_scores, phi: float) -> float:
    s = np.asarray(benign_scores, dtype=np.float64)
    return float(np.mean(s > phi))


def _fields(outcome):
    if isinstance(outcome, dict):
        return bool(outcome["classified_as_target"]), float(outcome["detector_score"])
    return bool(outcome.classified_as_target), float(outcome.detector_score)


def success_rate_at(outcomes: Iterable, benign_scores, fpr_percent: float) -> float:
    """Fraction of targeted attacks that hit their target and stay below ``phi(N)``."""
    outcomes = list(outcomes)
    if not outcomes:
        return 0.0
    phi = calibrate_phi(benign_scores, fpr_percent)
    wins = 0
    for o in outcomes:
        hit, score = _fields(o)
        wins += hit and score <= phi
    return wins / len(outcomes)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # flagged when score >= threshold; +inf for the origin
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(benign_scores, adv_scores) -> RocCurve:
    """ROC of the detector with adversarial inputs as positives.

    Thresholds sweep the distinct values of the pooled scores from high to
    low, so tied scores enter together and the trapezoidal area equals the
    Mann-Whitney statistic with ties counted one half.
    """
    neg = np.asarray(benign_scores, dtype=np.float64).ravel()
    pos = np.asarray(adv_scores, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ValueError("roc needs benign and adversarial scores")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    last_of_run = np.r_[np.diff(scores) != 0, True]
    tp = np.cumsum(is_pos)[last_of_run]
    fp = np.cumsum(1 - is_pos)[last_of_run]
    tpr = np.r_[0.0, tp / pos.size]
    fpr = np.r_[0.0, fp / neg.size]
    thresholds = np.r_[np.inf, scores[last_of_run]]
    return RocCurve(fpr, tpr, thresholds, trapezoid_auc(fpr, tpr))


def trapezoid_auc(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc(benign_scores, adv_scores) -> float:
    return roc(benign_scores, adv_scores).auc
