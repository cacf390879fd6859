"""PLCC / SRCC and median aggregation."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def _as_pair(y, yp) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yp = np.asarray(yp, dtype=np.float64).ravel()
    if y.shape != yp.shape:
        raise ValueError(f"length mismatch: {y.size} vs {yp.size}")
    if y.size < 2:
        raise ValueError("correlation needs at least two samples")
    if not (np.isfinite(y).all() and np.isfinite(yp).all()):
        raise ValueError("non-finite values")
    return y, yp


def plcc(y, yp) -> float:
    """Pearson correlation, no nonlinear mapping applied."""
    y, yp = _as_pair(y, yp)
    a = y - y.mean()
    b = yp - yp.mean()
    sa = np.sqrt(np.dot(a, a))
    sb = np.sqrt(np.dot(b, b))
    if sa == 0 or sb == 0:
        raise ValueError("correlation is undefined for a constant vector")
    return float(np.clip(np.dot(a, b) / (sa * sb), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    start = 0
    while start < x.size:
        stop = start + 1
        while stop < x.size and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def srcc(y, yp) -> float:
    y, yp = _as_pair(y, yp)
    return plcc(average_ranks(y), average_ranks(yp))


def median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
