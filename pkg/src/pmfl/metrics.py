"""Threshold metrics, ROC/AUC and Youden-optimal operating points."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import EvaluationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


@dataclass(frozen=True)
class EvalReport:
    auc: float
    youden_threshold: float
    j: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


def _scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise EvaluationError("scores and labels differ in length")
    if s.size == 0:
        raise EvaluationError("no scored samples")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")
    return s, y.astype(bool)


def _both_classes(y: np.ndarray) -> tuple[int, int]:
    p = int(y.sum())
    n = y.size - p
    if p == 0 or n == 0:
        raise EvaluationError(f"ROC needs both classes (positives={p}, negatives={n})")
    return p, n


def confusion_at(scores, labels, threshold: float) -> ConfusionCounts:
    """Counts with a sample predicted positive iff ``score >= threshold``."""
    s, y = _scored(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    return ConfusionCounts(tp, fp, int(np.sum(~pred & ~y)), int(np.sum(~pred & y)))


def rates(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(recall, precision, fpr, f1); empty denominators yield 0."""
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    fpr = c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return recall, precision, fpr, f1


def _sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at every distinct score, highest first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC over every distinct score plus +/-inf sentinels; trapezoidal AUC."""
    s, y = _scored(scores, labels)
    p, n = _both_classes(y)
    thr, tp, fp = _sweep(s, y)
    tpr = np.r_[0.0, tp / p]
    fpr = np.r_[0.0, fp / n]
    thresholds = np.r_[np.inf, thr]
    if thr[-1] != -np.inf:
        tpr, fpr = np.r_[tpr, 1.0], np.r_[fpr, 1.0]
        thresholds = np.r_[thresholds, -np.inf]
    return RocCurve(fpr, tpr, thresholds), trapezoid_area(fpr, tpr)


def trapezoid_area(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)


def mann_whitney_auc(scores, labels) -> float:
    """Brute-force (concordant + ties/2) / (P * N)."""
    s, y = _scored(scores, labels)
    p, n = _both_classes(y)
    d = s[y][:, None] - s[~y][None, :]
    return float(((d > 0).sum() + 0.5 * (d == 0).sum()) / (p * n))


def youden_optimal(scores, labels) -> EvalReport:
    """Threshold maximising TPR - FPR among the distinct scores.

    Ties go to the larger threshold. The sentinels are not candidates, so
    when every score is equal the single candidate predicts all positive.
    """
    s, y = _scored(scores, labels)
    p, n = _both_classes(y)
    thr, tp, fp = _sweep(s, y)
    j = tp / p - fp / n
    best = int(np.argmax(j))  # first maximum = largest threshold
    t = float(thr[best])
    c = confusion_at(s, y, t)
    recall, precision, _, f1 = rates(c)
    _, auc = roc_auc(s, y)
    return EvalReport(auc, t, float(j[best]), precision, recall, f1, c.tp, c.fp, c.tn, c.fn)


def evaluate(scores, labels) -> EvalReport:
    return youden_optimal(scores, labels)
