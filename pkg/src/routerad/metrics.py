"""ROC/AUC, F1 and confusion counts for window-level detection.

``roc_auc`` takes *anomaly* scores (higher means more anomalous); detector
decision values ``f`` are converted with ``anomaly_score = -f``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import UndefinedMetricError


class RocPoint(NamedTuple):
    fpr: float
    tpr: float
    threshold: float


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


class F1Result(NamedTuple):
    f1: float
    precision: float
    recall: float
    undefined: bool
    confusion: Confusion


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not y.any() or y.all():
        raise UndefinedMetricError("both benign and malicious rows are required")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def roc_auc(scores, labels) -> tuple[list[RocPoint], float]:
    """Threshold sweep over distinct scores, ties grouped.

    The area is accumulated exactly as ``sum(neg_in_group * (pos_above +
    pos_in_group / 2)) / (P * N)``, i.e. P(mal > ben) + P(tie)/2.
    """
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    P, N = int(tp[-1]), int(fp[-1])
    tp_prev = np.r_[0, tp[:-1]]
    dfp = np.diff(np.r_[0, fp])
    dtp = tp - tp_prev
    area2 = int(np.sum(dfp * (2 * tp_prev + dtp)))  # twice the win count, integer-exact
    auc = area2 / (2.0 * P * N)
    points = [RocPoint(0.0, 0.0, float("inf"))]
    points += [RocPoint(f / N, t / P, float(th)) for f, t, th in zip(fp.tolist(), tp.tolist(), s[last].tolist())]
    return points, auc


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference: fraction of (malicious, benign) pairs ordered correctly."""
    s, y = _check(scores, labels)
    pos, neg = s[y], s[~y]
    wins = 2 * int(np.sum(pos[:, None] > neg[None, :])) + int(np.sum(pos[:, None] == neg[None, :]))
    return wins / (2.0 * pos.size * neg.size)


def confusion(predicted, labels) -> Confusion:
    p = np.asarray(predicted, dtype=bool)
    y = np.asarray(labels, dtype=bool)
    return Confusion(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)),
                     int(np.sum(~p & y)))


def f1_score(c: Confusion) -> F1Result:
    undefined = (c.tp + c.fp) == 0 or (c.tp + c.fn) == 0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    if undefined:
        return F1Result(0.0, precision, recall, True, c)
    if precision + recall == 0:
        return F1Result(0.0, precision, recall, False, c)
    return F1Result(2 * precision * recall / (precision + recall), precision, recall, False, c)


def f1_at_zero(scores, labels, threshold: float = 0.0) -> F1Result:
    """F1 predicting malicious iff the decision value ``f < threshold``."""
    s, y = _check(scores, labels)
    return f1_score(confusion(s < threshold, y))
