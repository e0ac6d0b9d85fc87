"""Pixel confusion statistics and the six-column metric suite.

A metric whose denominator vanishes is reported as ``None`` rather than 0 or
NaN.  AUC uses the exact rank statistic with midranks for ties; MCC keeps
its intermediate products in Python integers so counts near 1e5 pixels per
image cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "ConfusionCounts",
    "BasicMetrics",
    "RocCurve",
    "confusion",
    "basic_metrics",
    "mcc",
    "roc_auc",
    "segmentation_report",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("se", "sp", "acc", "auc", "f1", "mcc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def _as_binary(arr, what: str) -> np.ndarray:
    a = np.asarray(arr)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return a.astype(bool)


def confusion(pred_mask, gt_mask, region=None) -> ConfusionCounts:
    """Pixelwise counts, optionally restricted to a binary region mask."""
    p = _as_binary(pred_mask, "prediction")
    g = _as_binary(gt_mask, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if region is not None:
        r = _as_binary(region, "region")
        if r.shape != p.shape:
            raise ValueError(f"region shape {r.shape} does not match {p.shape}")
        p, g = p[r], g[r]
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


@dataclass(frozen=True)
class BasicMetrics:
    se: Optional[float]
    sp: Optional[float]
    acc: Optional[float]
    f1: Optional[float]


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    def ratio(num: int, den: int) -> Optional[float]:
        return num / den if den else None

    return BasicMetrics(
        se=ratio(c.tp, c.tp + c.fn),
        sp=ratio(c.tn, c.tn + c.fp),
        acc=ratio(c.tp + c.tn, c.total),
        f1=ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    )


def mcc(c: ConfusionCounts) -> Optional[float]:
    """Matthews correlation coefficient; None when any marginal is empty."""
    factors = (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn)
    if any(f == 0 for f in factors):
        return None
    numerator = c.tp * c.tn - c.fp * c.fn
    denominator = 1.0
    for f in factors:
        denominator *= math.sqrt(f)
    return numerator / denominator


@dataclass(frozen=True)
class RocCurve:
    """ROC points from (0, 0) to (1, 1), monotone in both coordinates."""

    points: tuple

    def __post_init__(self):
        pts = tuple((float(a), float(b)) for a, b in self.points)
        object.__setattr__(self, "points", pts)
        if pts[0] != (0.0, 0.0) or pts[-1] != (1.0, 1.0):
            raise ValueError("ROC curve must run from (0, 0) to (1, 1)")
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            if x1 < x0 or y1 < y0:
                raise ValueError("ROC curve must be monotone non-decreasing")


def roc_auc(scores, gt_mask, region=None) -> tuple[Optional[float], Optional[RocCurve]]:
    """Exact AUC via the rank statistic (midranks for ties), plus the swept curve.

    Returns (None, None) when the region contains a single class.
    """
    s = np.asarray(scores, dtype=np.float64)
    g = _as_binary(gt_mask, "ground truth")
    if s.shape != g.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {g.shape}")
    if region is not None:
        r = _as_binary(region, "region")
        if r.shape != s.shape:
            raise ValueError(f"region shape {r.shape} does not match {s.shape}")
        s, g = s[r], g[r]
    s = s.ravel()
    g = g.ravel()
    n_pos = int(np.count_nonzero(g))
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None, None

    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    start = 0
    while start < s.size:
        stop = start + 1
        while stop < s.size and sorted_s[stop] == sorted_s[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0  # midrank, 1-based
        start = stop
    auc = (ranks[g].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    desc = order[::-1]
    labels = g[desc]
    boundaries = np.flatnonzero(np.diff(s[desc]) != 0)
    cut = np.concatenate([boundaries, [s.size - 1]])
    cum_tp = np.cumsum(labels)[cut]
    cum_fp = np.cumsum(~labels)[cut]
    pts = [(0.0, 0.0)] + list(zip(cum_fp / n_neg, cum_tp / n_pos))
    return float(auc), RocCurve(tuple(pts))


def segmentation_report(prob, pred_mask, gt_mask, region=None) -> dict:
    """All six metrics as one record, keyed in report column order."""
    c = confusion(pred_mask, gt_mask, region)
    b = basic_metrics(c)
    auc, _ = roc_auc(prob, gt_mask, region)
    return {
        "se": b.se,
        "sp": b.sp,
        "acc": b.acc,
        "auc": auc,
        "f1": b.f1,
        "mcc": mcc(c),
    }
