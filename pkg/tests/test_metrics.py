from __future__ import annotations

import itertools

import numpy as np
import pytest

from pmfl.errors import EvaluationError
from pmfl.metrics import (
    ConfusionCounts,
    confusion_at,
    mann_whitney_auc,
    rates,
    roc_auc,
    trapezoid_area,
    youden_optimal,
)


def test_worked_threshold_example():
    assert confusion_at([0.48], [1], 0.4) == ConfusionCounts(1, 0, 0, 0)
    assert confusion_at([0.48], [1], 0.5) == ConfusionCounts(0, 0, 0, 1)


def test_zero_threshold_predicts_everything_positive():
    c = confusion_at([0.1, 0.0, 0.9], [0, 1, 0], 0.0)
    assert c.tn == 0 and c.fn == 0 and c.total == 3


def test_hand_enumerated_counts():
    scores = [0.9, 0.5, 0.49, 0.2, 0.7, 0.5]
    labels = [1, 0, 1, 0, 0, 1]
    # >= 0.5: 0.9(+) 0.5(-) 0.7(-) 0.5(+)  |  < 0.5: 0.49(+) 0.2(-)
    assert confusion_at(scores, labels, 0.5) == ConfusionCounts(tp=2, fp=2, tn=1, fn=1)


def test_rates():
    assert rates(ConfusionCounts(1, 0, 1, 0)) == (1.0, 1.0, 0.0, 1.0)
    r, p, f, f1 = rates(ConfusionCounts(0, 0, 3, 2))
    assert p == 0.0 and f1 == 0.0
    r, p, f, f1 = rates(ConfusionCounts(tp=3, fp=2, tn=4, fn=1))
    assert r == 0.75 and p == 0.6 and f == pytest.approx(1 / 3) and f1 == pytest.approx(2 / (4 / 3 + 5 / 3))


def test_separated_scores():
    scores, labels = [0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]
    curve, auc = roc_auc(scores, labels)
    assert auc == 1.0
    rep = youden_optimal(scores, labels)
    assert rep.j == 1.0 and rep.precision == rep.recall == rep.f1 == 1.0
    assert 0.2 < rep.youden_threshold <= 0.8


def test_curve_endpoints_and_monotonicity(rng):
    s, y = rng.random(40), rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    curve, auc = roc_auc(s, y)
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0) and (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert trapezoid_area(curve.fpr, curve.tpr) == pytest.approx(auc, abs=1e-12)


def test_auc_equals_mann_whitney(rng):
    s = np.round(rng.random(50), 1)  # plenty of ties
    y = rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    assert abs(roc_auc(s, y)[1] - mann_whitney_auc(s, y)) <= 1e-12


def test_permutation_average_is_one_half(rng):
    s = rng.random(30)
    y = np.array([0, 1] * 15)
    aucs = [roc_auc(s, rng.permutation(y))[1] for _ in range(10_000)]
    assert abs(np.mean(aucs) - 0.5) <= 0.02


def test_auc_properties(rng):
    s, y = rng.random(60), rng.integers(0, 2, 60)
    y[:2] = [0, 1]
    auc = roc_auc(s, y)[1]
    assert roc_auc(np.exp(3 * s) - 7, y)[1] == pytest.approx(auc, abs=1e-12)
    assert auc + roc_auc(1 - s, y)[1] == pytest.approx(1.0, abs=1e-12)


def test_all_equal_scores():
    rep = youden_optimal([0.3] * 5, [0, 1, 0, 1, 1])
    assert rep.j == 0.0 and rep.youden_threshold == 0.3
    assert rep.tp == 3 and rep.fp == 2 and rep.tn == 0 and rep.fn == 0


def _exhaustive(s, y):
    best_j, best_t = -2.0, None
    for t in sorted(set(s.tolist()), reverse=True):
        c = confusion_at(s, y, t)
        j = c.tp / (c.tp + c.fn) - c.fp / (c.fp + c.tn)
        if j > best_j:
            best_j, best_t = j, t
    return best_j, best_t


def test_youden_matches_exhaustive_scan(rng):
    for _ in range(20):
        s, y = np.round(rng.random(20), 2), rng.integers(0, 2, 20)
        y[:2] = [0, 1]
        rep = youden_optimal(s, y)
        j, t = _exhaustive(s, y)
        assert rep.youden_threshold == t and rep.j == pytest.approx(j, abs=1e-15)
        c = confusion_at(s, y, t)
        r, p, _, f1 = rates(c)
        assert (rep.recall, rep.precision, rep.f1) == (r, p, f1)
        assert (rep.tp, rep.fp, rep.tn, rep.fn) == (c.tp, c.fp, c.tn, c.fn)
        assert -1.0 <= rep.j <= 1.0 and rep.j >= 0.0


def test_ties_favour_larger_threshold():
    # J = 0.5 at both 0.9 and 0.7
    rep = youden_optimal([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    assert rep.j == 0.5 and rep.youden_threshold == 0.9


def test_single_class_is_evaluation_error():
    with pytest.raises(EvaluationError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(EvaluationError):
        youden_optimal([0.1, 0.2], [0, 0])


def test_report_json_fields():
    rep = youden_optimal([0.1, 0.9], [0, 1])
    assert list(rep.to_dict()) == ["auc", "youden_threshold", "j", "precision", "recall", "f1", "tp", "fp", "tn", "fn"]
