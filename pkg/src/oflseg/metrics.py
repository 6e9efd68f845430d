"""Segmentation metrics: Dice and average Hausdorff distance."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, ValidationError


def _binary(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if not np.all((a == 0) | (a == 1)):
        raise ValidationError(f"{name} must be a binary mask")
    return a.astype(bool)


def _pair(pred, gt):
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if p.shape != g.shape or p.ndim != 2:
        raise ShapeError(f"masks must be matching H×W, got {p.shape} and {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    """``2|P∩G| / (|P|+|G|)``; 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the foreground (image
    border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _mean_min_dist(src: np.ndarray, dst: np.ndarray) -> float:
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    mins = np.sqrt(d2.min(axis=1).astype(np.float64))
    return math.fsum(mins.tolist()) / len(mins)


def avg_hausdorff(pred, gt) -> float:
    """Symmetric average of mean nearest boundary-to-boundary distances (pixels).

    Exactly one empty boundary scores the image diagonal; two empty ones score 0.
    """
    p, g = _pair(pred, gt)
    bp = np.argwhere(boundary(p)).astype(np.int64)
    bg = np.argwhere(boundary(g)).astype(np.int64)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        h, w = p.shape
        return math.hypot(h, w)
    return 0.5 * (_mean_min_dist(bp, bg) + _mean_min_dist(bg, bp))
