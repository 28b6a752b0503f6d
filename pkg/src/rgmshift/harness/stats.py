"""Correlation statistics with t-approximation p-values and a permutation oracle."""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata, t as t_dist

from .._validation import InvalidArgument, make_rng


def _pair(x, y):
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise InvalidArgument("series lengths differ")
    if x.size < 3:
        raise InvalidArgument("need at least 3 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidArgument("series contain non-finite values")
    return x, y


def _r(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(math.fsum(xc * xc))
    sy = math.sqrt(math.fsum(yc * yc))
    if sx == 0 or sy == 0:
        raise InvalidArgument("zero variance series")
    return max(-1.0, min(1.0, math.fsum(xc * yc) / (sx * sy)))


def _t_pvalue(r, n):
    if abs(r) >= 1.0:
        return 0.0
    tstat = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * t_dist.sf(abs(tstat), n - 2))


def pearson(x, y):
    """Sample Pearson r and its two-sided t-approximation p-value."""
    x, y = _pair(x, y)
    r = _r(x, y)
    return r, _t_pvalue(r, x.size)


def spearman(x, y):
    """Pearson correlation of average ranks."""
    x, y = _pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    r = _r(rx, ry)
    return r, _t_pvalue(r, x.size)


def permutation_pvalue(x, y, method="pearson", n_perm=10_000, seed=0):
    """Two-sided permutation p-value with the +1 correction."""
    x, y = _pair(x, y)
    if method == "spearman":
        x, y = rankdata(x), rankdata(y)
    elif method != "pearson":
        raise InvalidArgument(f"unknown method {method!r}")
    r0 = abs(_r(x, y))
    rng = make_rng(seed)
    hits = 0
    for _ in range(n_perm):
        if abs(_r(x, rng.permutation(y))) >= r0 - 1e-12:
            hits += 1
    return (hits + 1) / (n_perm + 1)


def off_diagonal_pairs(wd, loss):
    """Flattened off-diagonal entries of two square matrices (row-major)."""
    wd = np.asarray(wd, dtype=float)
    loss = np.asarray(loss, dtype=float)
    if wd.shape != loss.shape or wd.ndim != 2 or wd.shape[0] != wd.shape[1]:
        raise InvalidArgument("transfer matrices must be square and aligned")
    mask = ~np.eye(wd.shape[0], dtype=bool)
    return wd[mask], loss[mask]
