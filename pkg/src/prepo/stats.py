"""Rank statistics for the perplexity / pass-rate analysis."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import stats as _sps


class UndefinedCorrelationError(ValueError):
    pass


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    return _sps.rankdata(np.asarray(values, dtype=np.float64), method="average")


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        raise UndefinedCorrelationError("zero variance on one axis")
    return float(np.dot(xc, yc) / denom)


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman rho and a two-sided p-value.

    The p-value uses the t approximation ``t = rho * sqrt((n-2)/(1-rho^2))``
    with ``n - 2`` degrees of freedom; it is approximate for small n and
    under ties.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and the same length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 pairs")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("all values tied on one axis")
    rho = pearson(average_ranks(x), average_ranks(y))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * _sps.t.sf(abs(t), n - 2))
