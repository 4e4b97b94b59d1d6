"""Ranking metrics computed exactly from scores and binary labels."""
from __future__ import annotations

from collections.abc import Sequence
from fractions import Fraction

import numpy as np


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2.

    Computed with integer arithmetic (twice the concordance count) so that the
    result is the correctly rounded rational value.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    order = np.argsort(s, kind="mergesort")
    s, y = s[order], y[order]
    twice = 0
    negs_below = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        pos = int(y[i:j].sum())
        neg = (j - i) - pos
        twice += pos * (2 * negs_below + neg)
        negs_below += neg
        i = j
    return twice / (2 * n_pos * n_neg)


def ranking_order(scores, ids: Sequence[str] | None = None) -> list[int]:
    """Indices sorted by score descending, ties by id ascending (or input order)."""
    s = np.asarray(scores, dtype=np.float64)
    keys = list(ids) if ids is not None else list(range(len(s)))
    return sorted(range(len(s)), key=lambda i: (-s[i], keys[i]))


def average_precision(scores: Sequence[float], labels: Sequence[int], ids: Sequence[str] | None = None) -> float:
    """Mean over positives of the precision at each positive's rank.

    Ties in score are broken by ``ids`` ascending (or input position), i.e.
    the ranking is a stable sort by (score desc, id asc).
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    total = Fraction(0)
    hits = 0
    for rank, i in enumerate(ranking_order(s, ids), start=1):
        if y[i]:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / n_pos)


def has_ties(scores) -> bool:
    s = np.asarray(scores)
    return len(np.unique(s)) < len(s)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points for thresholds at every distinct score, descending.

    The first point is (0, 0, inf); a sample is called positive when its score
    is >= threshold.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve needs both classes")
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    for t in np.unique(s)[::-1]:
        sel = s == t
        tp += int(y[sel].sum())
        fp += int(sel.sum()) - int(y[sel].sum())
        points.append((fp / n_neg, tp / n_pos, float(t)))
    return points
