"""Segmentation quality metrics: Dice overlap on binary masks and average
precision (area under the precision-recall curve) on soft scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, UndefinedMetricError

__all__ = ["PrCurve", "dice", "threshold", "pr_curve", "prauc"]


def dice(pred, target):
    """Overlap score 2|P & T| / (|P| + |T|).

    Two empty masks count as a perfect match (1.0); one empty mask against a
    non-empty one scores 0.0. Matters for slices with no foreground at all.
    """
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    p = p.astype(bool)
    t = t.astype(bool)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def threshold(soft, t=0.5):
    """Binarize a soft map; values >= t map to 1 (so 0.5 itself is foreground)."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"threshold must be in [0, 1], got {t}")
    return (np.asarray(soft) >= t).astype(np.uint8)


@dataclass(frozen=True)
class PrCurve:
    """(recall, precision) points from the highest score threshold down.

    Tied scores are grouped into a single threshold step, so the curve does
    not depend on how ties happen to be ordered.
    """

    points: list
    positive_count: int
    total_count: int


def pr_curve(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"scores and labels differ: {scores.shape} vs {labels.shape}")
    binary = (labels == 0) | (labels == 1)
    if not binary.all():
        i = int(np.argmin(binary))
        raise DomainError(f"label {i} is {labels[i]!r}, expected 0 or 1")
    labels = labels.astype(np.int64)
    npos = int(labels.sum())
    if npos == 0:
        raise UndefinedMetricError("precision-recall needs at least one positive label")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # last index of each group of equal scores
    ends = np.empty(s_sorted.size, dtype=bool)
    ends[:-1] = s_sorted[:-1] != s_sorted[1:]
    ends[-1] = True
    tp = np.cumsum(l_sorted)[ends]
    pp = np.flatnonzero(ends) + 1
    precision = tp / pp
    recall = tp / npos
    points = list(zip(recall.tolist(), precision.tolist()))
    return PrCurve(points, npos, int(labels.size))


def prauc(scores, labels):
    """Average precision: sum of precision times recall increment per step."""
    curve = pr_curve(scores, labels)
    terms = []
    prev_recall = 0.0
    for recall, precision in curve.points:
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)
