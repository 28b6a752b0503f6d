"""Wasserstein distances between point clouds and Gaussians, and the domain divergence term.

Ground cost is squared Euclidean everywhere; reported distances are square-rooted
so they are on the W2 scale.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from ._validation import (
    InvalidArgument,
    SizeCapExceeded,
    as_matrix,
    as_vector,
    check_positive,
    check_positive_int,
)

PERMUTATION_CAP = 8
ASSIGNMENT_CAP = 200
LP_CAP = 40000  # n*m variables


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = as_matrix(self.points, "points")
        if pts.shape[0] == 0:
            raise InvalidArgument("point cloud is empty")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = as_vector(self.weights, "weights", pts.shape[0])
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise InvalidArgument("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def uniform(self):
        return bool(np.all(self.weights == self.weights[0]))


def _cloud(x):
    return x if isinstance(x, PointCloud) else PointCloud(np.asarray(x, dtype=float))


def sq_cost(x, y):
    """Pairwise squared Euclidean cost matrix."""
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def exact_w2(a, b, mode="auto"):
    """Exact W2 by permutation enumeration, min-cost assignment or a small LP.

    mode: 'permutation' (equal uniform, n <= 8), 'assignment' (equal uniform,
    n <= 200), 'lp' (general weights, n*m <= 40000) or 'auto'.
    """
    a, b = _cloud(a), _cloud(b)
    if a.dim != b.dim:
        raise InvalidArgument("clouds live in different dimensions")
    equal_uniform = a.n == b.n and a.uniform and b.uniform
    if mode == "auto":
        if equal_uniform and a.n <= ASSIGNMENT_CAP:
            mode = "assignment"
        else:
            mode = "lp"
    cost = sq_cost(a.points, b.points)
    if mode == "permutation":
        if not equal_uniform or a.n > PERMUTATION_CAP:
            raise SizeCapExceeded(f"permutation mode needs equal uniform clouds with n <= {PERMUTATION_CAP}")
        idx = np.arange(a.n)
        best = min(cost[idx, list(p)].sum() for p in itertools.permutations(range(a.n)))
        return math.sqrt(max(best / a.n, 0.0))
    if mode == "assignment":
        if not equal_uniform or a.n > ASSIGNMENT_CAP:
            raise SizeCapExceeded(f"assignment mode needs equal uniform clouds with n <= {ASSIGNMENT_CAP}")
        r, c = linear_sum_assignment(cost)
        return math.sqrt(max(cost[r, c].sum() / a.n, 0.0))
    if mode == "lp":
        if a.n * b.n > LP_CAP:
            raise SizeCapExceeded(f"lp mode limited to n*m <= {LP_CAP}")
        n, m = a.n, b.n
        rows = np.zeros((n + m, n * m))
        for i in range(n):
            rows[i, i * m:(i + 1) * m] = 1.0
        for j in range(m):
            rows[n + j, j::m] = 1.0
        res = linprog(cost.ravel(), A_eq=rows, b_eq=np.concatenate([a.weights, b.weights]),
                      bounds=(0, None), method="highs")
        if not res.success:
            raise InvalidArgument(f"transport LP failed: {res.message}")
        return math.sqrt(max(res.fun, 0.0))
    raise InvalidArgument(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class SinkhornResult:
    distance: float
    cost: float
    residual: float
    plan: np.ndarray = field(repr=False)
    iters: int = 0

    def __float__(self):
        return self.distance


def sinkhorn_w2(a, b, reg_eps=0.1, iters=1000, tol=0.0):
    """Entropic OT with log-domain updates.

    Returns the transport cost <P, C> of the entropic plan (square-rooted) and the
    L1 violation of the row marginal after the last column update.
    """
    a, b = _cloud(a), _cloud(b)
    reg_eps = check_positive(reg_eps, "reg_eps")
    iters = check_positive_int(iters, "iters")
    if a.dim != b.dim:
        raise InvalidArgument("clouds live in different dimensions")
    C = sq_cost(a.points, b.points)
    with np.errstate(divide="ignore"):
        log_a = np.log(a.weights)
        log_b = np.log(b.weights)
    f = np.zeros(a.n)
    g = np.zeros(b.n)
    it = 0
    for it in range(1, iters + 1):
        f = reg_eps * (log_a - logsumexp((g[None, :] - C) / reg_eps, axis=1))
        g = reg_eps * (log_b - logsumexp((f[:, None] - C) / reg_eps, axis=0))
        if tol > 0 and it % 10 == 0:
            logp = (f[:, None] + g[None, :] - C) / reg_eps
            resid = np.abs(np.exp(logsumexp(logp, axis=1)) - a.weights).sum()
            if resid < tol:
                break
    logp = (f[:, None] + g[None, :] - C) / reg_eps
    plan = np.exp(logp)
    residual = float(np.abs(plan.sum(axis=1) - a.weights).sum())
    cost = float(np.sum(plan * C))
    return SinkhornResult(math.sqrt(max(cost, 0.0)), cost, residual, plan, it)


def gaussian_w2(m1, cov1, m2, cov2):
    """Closed-form W2 between Gaussians with diagonal covariances."""
    m1 = as_vector(m1, "m1")
    m2 = as_vector(m2, "m2", m1.shape[0])
    s1 = as_vector(cov1, "cov1", m1.shape[0])
    s2 = as_vector(cov2, "cov2", m1.shape[0])
    if np.any(s1 <= 0) or np.any(s2 <= 0):
        raise InvalidArgument("diagonal covariances must be > 0")
    mean_term = float(np.sum((m1 - m2) ** 2))
    cov_term = float(np.sum((np.sqrt(s1) - np.sqrt(s2)) ** 2))
    return math.sqrt(mean_term + cov_term)


def pseudo_metric_dsigma(Z1, Z2, mode="assignment"):
    """Average row-wise Euclidean distance under the best row matching."""
    Z1 = as_matrix(Z1, "Z1")
    Z2 = as_matrix(Z2, "Z2")
    if Z1.shape != Z2.shape:
        raise InvalidArgument(f"signal shapes differ: {Z1.shape} vs {Z2.shape}")
    n = Z1.shape[0]
    D = np.sqrt(sq_cost(Z1, Z2))
    if mode == "permutation":
        if n > PERMUTATION_CAP:
            raise SizeCapExceeded("permutation mode limited to small N")
        idx = np.arange(n)
        return min(D[list(p), idx].sum() for p in itertools.permutations(range(n))) / n
    r, c = linear_sum_assignment(D)
    return float(D[r, c].sum() / n)


def _fit_gaussian(cloud):
    pts = cloud.points
    mean = np.average(pts, axis=0, weights=cloud.weights)
    var = np.average((pts - mean) ** 2, axis=0, weights=cloud.weights)
    return mean, np.maximum(var, 1e-300)


def cloud_w2(a, b, estimator="sinkhorn", reg_eps=0.1, iters=1000):
    a, b = _cloud(a), _cloud(b)
    if estimator == "exact":
        return exact_w2(a, b)
    if estimator == "sinkhorn":
        return sinkhorn_w2(a, b, reg_eps, iters).distance
    if estimator == "gaussian_fit":
        ma, va = _fit_gaussian(a)
        mb, vb = _fit_gaussian(b)
        return gaussian_w2(ma, va, mb, vb)
    raise InvalidArgument(f"unknown estimator {estimator!r}")


def classwise_latent_wd(source: Mapping, target: Mapping, estimator="sinkhorn",
                        aggregate="sum", reg_eps=0.1, iters=1000, return_per_class=False):
    """Per-class W2 between aligned class clouds, then sum or max."""
    if set(source) != set(target):
        missing = set(source) ^ set(target)
        raise InvalidArgument(f"class sets differ, unmatched: {sorted(missing)}")
    per_class = {c: cloud_w2(source[c], target[c], estimator, reg_eps, iters) for c in sorted(source)}
    vals = list(per_class.values())
    if aggregate == "sum":
        total = math.fsum(vals)
    elif aggregate == "max":
        total = max(vals) if vals else 0.0
    else:
        raise InvalidArgument(f"unknown aggregate {aggregate!r}")
    return (total, per_class) if return_per_class else total


@dataclass
class DivergenceInputs:
    """Inputs of the latent domain divergence term.

    Either ``w2_hat`` (one empirical W2 per class) or the per-class clouds must be set.
    """
    class_count: int
    L2_kernel: float = 1.0
    lip_f: float = 1.0
    holder_alpha: float = 1.0
    c_x: float = 1.0
    d_x_cover: float = 1.0
    rho: float = 0.1
    n_nodes_source: int = 1
    n_nodes_target: int = 1
    m_per_class_source: Sequence[int] = (1,)
    m_per_class_target: Sequence[int] = (1,)
    w2_hat: Sequence[float] = None
    source_clouds: Mapping = None
    target_clouds: Mapping = None
    L_prime: float = None

    def validate(self):
        if not 0.0 < self.rho < 1.0:
            raise InvalidArgument("rho must lie in (0, 1)")
        C = check_positive_int(self.class_count, "class_count")
        for name in ("m_per_class_source", "m_per_class_target"):
            vals = list(getattr(self, name))
            if len(vals) == 1 and C > 1:
                vals = vals * C
            if len(vals) != C or any(v < 1 for v in vals):
                raise InvalidArgument(f"{name} must hold {C} counts >= 1")
            setattr(self, name, vals)
        check_positive_int(self.n_nodes_source, "n_nodes_source")
        check_positive_int(self.n_nodes_target, "n_nodes_target")
        if self.w2_hat is not None and len(self.w2_hat) != C:
            raise InvalidArgument("w2_hat must hold one value per class")
        return self


def _resolve_w2(inputs, estimator, **kw):
    if inputs.w2_hat is not None:
        return [float(v) for v in inputs.w2_hat]
    if inputs.source_clouds is None or inputs.target_clouds is None:
        raise InvalidArgument("need w2_hat or per-class clouds")
    _, per = classwise_latent_wd(inputs.source_clouds, inputs.target_clouds, estimator,
                                 "sum", return_per_class=True, **kw)
    vals = list(per.values())
    if len(vals) != inputs.class_count:
        raise InvalidArgument("cloud class count does not match class_count")
    return vals


def delta_d_terms(inputs: DivergenceInputs, w2_hat):
    """Per-class bracket values before the 2*alpha power."""
    D = float(inputs.d_x_cover)
    if D <= 0:
        raise InvalidArgument("d_x_cover must be > 0 when finite-sample terms are used")
    B = max(1.0, inputs.c_x ** (-D))
    log_term = math.log(1.0 / inputs.rho) ** 0.25
    const = 2.0 * B * 27.0 ** (D / 4.0)
    out = []
    for j, w in enumerate(w2_hat):
        ns = inputs.n_nodes_source * inputs.m_per_class_source[j]
        nt = inputs.n_nodes_target * inputs.m_per_class_target[j]
        out.append(math.fsum([
            w,
            B * (ns ** (-1.0 / D) + nt ** (-1.0 / D)),
            const,
            B * log_term * (ns ** -0.25 + nt ** -0.25),
        ]))
    return out


def delta_d(inputs: DivergenceInputs, estimator="sinkhorn", **kw):
    """Domain divergence upper bound on W2^2 between the graph-signal distributions.

    Returns a dict with the summed form (default), the per-class brackets and,
    when ``L_prime`` is supplied, the max-aggregated variant 2 C^2 L' max_j W2.
    """
    inputs.validate()
    w2 = _resolve_w2(inputs, estimator, **kw)
    brackets = delta_d_terms(inputs, w2)
    C = inputs.class_count
    pref = 2.0 * C * inputs.L2_kernel * inputs.lip_f ** 2
    value = pref * math.fsum(b ** (2.0 * inputs.holder_alpha) for b in brackets)
    out = {"delta_d": value, "w2_hat": w2, "brackets": brackets}
    if inputs.L_prime is not None:
        out["delta_d_max_variant"] = 2.0 * C ** 2 * inputs.L_prime * max(w2)
    return out
