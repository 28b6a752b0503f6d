"""Latent space model for binary graphs: fitting, alignment and graph summaries.

Edge log-odds are alpha + beta . x_ij - ||z_i - z_j|| with dyad covariates
x_ij = [|x_i - x_j|, (x_i - x_j)^2] built from node features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import shortest_path
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import InvalidArgument, as_matrix, as_vector, check_positive_int, make_rng

DIST_FLOOR = 1e-8


def dyad_covariates(zi, zj):
    zi = as_vector(zi, "zi")
    zj = as_vector(zj, "zj", dim=zi.shape[0])
    d = zi - zj
    return np.concatenate([np.abs(d), d * d])


def _pair_covariates(X):
    """(n_pairs, 2F) covariates over i < j plus the index arrays."""
    iu, ju = np.triu_indices(X.shape[0], k=1)
    d = X[iu] - X[ju]
    return np.concatenate([np.abs(d), d * d], axis=1), iu, ju


def _check_adjacency(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidArgument("adjacency must be square")
    if A.shape[0] < 2:
        raise InvalidArgument("need at least two nodes")
    if not np.array_equal(A, A.T):
        raise InvalidArgument("adjacency must be symmetric")
    if not np.all((A == 0) | (A == 1)):
        raise InvalidArgument("adjacency must be binary")
    return A


@dataclass
class _Block:
    y: np.ndarray
    cov: np.ndarray
    iu: np.ndarray
    ju: np.ndarray
    n: int


def _distances(Z, iu, ju):
    diff = Z[iu] - Z[ju]
    raw = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return diff, np.maximum(raw, DIST_FLOOR), raw >= DIST_FLOOR


def _block_loglik(b: _Block, alpha, beta, Z):
    _, dist, _ = _distances(Z, b.iu, b.ju)
    eta = alpha + b.cov @ beta - dist
    return math.fsum(b.y * eta - np.logaddexp(0.0, eta))


def loglik(adjacency, node_features, alpha, beta, positions):
    """Bernoulli log-likelihood over dyads i < j."""
    A = _check_adjacency(adjacency)
    X = as_matrix(node_features, "node_features")
    cov, iu, ju = _pair_covariates(X)
    return _block_loglik(_Block(A[iu, ju], cov, iu, ju, A.shape[0]), float(alpha), as_vector(beta, "beta"),
                         as_matrix(positions, "positions"))


def _block_grad(b: _Block, alpha, beta, Z):
    diff, dist, live = _distances(Z, b.iu, b.ju)
    eta = alpha + b.cov @ beta - dist
    r = b.y - 0.5 * (1.0 + np.tanh(0.5 * eta))
    g_alpha = float(r.sum())
    g_beta = b.cov.T @ r
    w = np.where(live, -r / dist, 0.0)[:, None] * diff
    gZ = np.zeros_like(Z)
    np.add.at(gZ, b.iu, w)
    np.add.at(gZ, b.ju, -w)
    return g_alpha, g_beta, gZ


def classical_mds(D, d):
    """Top-d classical scaling coordinates of a distance matrix."""
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D ** 2) @ J
    vals, vecs = np.linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(vals)[::-1][:d]
    vals = np.clip(vals[order], 0.0, None)
    out = vecs[:, order] * np.sqrt(vals)
    if out.shape[1] < d:
        out = np.pad(out, ((0, 0), (0, d - out.shape[1])))
    # deterministic sign: largest-magnitude entry of each column positive
    for k in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, k])))
        if out[i, k] < 0:
            out[:, k] = -out[:, k]
    return out


def init_positions(A, d, rng=None, jitter=1e-3):
    D = shortest_path(A, unweighted=True, directed=False)
    finite = np.isfinite(D)
    fill = (D[finite].max() if finite.any() else 0.0) + 1.0
    D = np.where(finite, D, fill)
    Z = classical_mds(D, d)
    if rng is not None and jitter > 0:
        Z = Z + jitter * rng.standard_normal(Z.shape)
    return Z - Z.mean(axis=0)


@dataclass
class LsmFit:
    alpha: float
    beta: np.ndarray
    positions: list
    final_loglik: float
    converged: bool
    iterations: int = 0
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {"alpha": self.alpha, "beta": self.beta.tolist(),
                "positions": [p.tolist() for p in self.positions],
                "loglik": self.final_loglik, "converged": self.converged, "iterations": self.iterations}


def lsm_fit_joint(adjacencies, node_features, d=2, lr=0.05, iters=500, tol=1e-6, seed=0,
                  fix_beta=False, max_backtracks=40):
    """Shared (alpha, beta) with one position block per graph, by backtracking gradient ascent."""
    d = check_positive_int(d, "d")
    adjacencies = [_check_adjacency(A) for A in adjacencies]
    if not adjacencies:
        raise InvalidArgument("need at least one graph")
    feats = [as_matrix(X, "node_features") for X in node_features]
    if len(feats) != len(adjacencies) or any(X.shape[0] != A.shape[0] for X, A in zip(feats, adjacencies)):
        raise InvalidArgument("node features must align with adjacencies")
    if len({X.shape[1] for X in feats}) != 1:
        raise InvalidArgument("all graphs need the same feature dim")
    rng = make_rng(seed)
    blocks = []
    for A, X in zip(adjacencies, feats):
        cov, iu, ju = _pair_covariates(X)
        blocks.append(_Block(A[iu, ju], cov, iu, ju, A.shape[0]))
    n_pairs = sum(len(b.y) for b in blocks)
    density = min(max(sum(b.y.sum() for b in blocks) / n_pairs, 1e-4), 1 - 1e-4)
    alpha = math.log(density / (1 - density))
    beta = np.zeros(2 * feats[0].shape[1])
    Zs = [init_positions(A, d, rng) for A in adjacencies]
    # shift alpha so the mean log-odds matches the density despite the distance term
    mean_dist = np.mean(np.concatenate([_distances(Z, b.iu, b.ju)[1] for Z, b in zip(Zs, blocks)]))
    alpha += float(mean_dist)

    def total(a, bt, zs):
        return math.fsum(_block_loglik(b, a, bt, z) for b, z in zip(blocks, zs))

    ll = total(alpha, beta, Zs)
    trace = [ll]
    step = lr
    converged = False
    it = 0
    for it in range(1, iters + 1):
        ga, gb, gz = 0.0, np.zeros_like(beta), []
        for b, Z in zip(blocks, Zs):
            a_, b_, z_ = _block_grad(b, alpha, beta, Z)
            ga += a_
            gb += b_
            gz.append(z_)
        if fix_beta:
            gb = np.zeros_like(gb)
        scale = 1.0 / n_pairs
        accepted = False
        for _ in range(max_backtracks):
            a_new = alpha + step * ga * scale * len(blocks)
            b_new = beta + step * gb * scale * len(blocks)
            z_new = [Z + step * g for Z, g in zip(Zs, gz)]
            ll_new = total(a_new, b_new, z_new)
            if np.isfinite(ll_new) and ll_new >= ll:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        delta = ll_new - ll
        alpha, beta, Zs, ll = a_new, b_new, z_new, ll_new
        trace.append(ll)
        step *= 1.2
        if abs(delta) < tol:
            converged = True
            break
    Zs = [Z - Z.mean(axis=0) for Z in Zs]
    return LsmFit(float(alpha), beta, Zs, total(alpha, beta, Zs), converged, it, trace)


def lsm_fit(adjacency, node_features, d=2, lr=0.05, iters=500, tol=1e-6, seed=0, fix_beta=False):
    """Single-graph fit; ``positions`` of the result holds one n x d array."""
    return lsm_fit_joint([adjacency], [node_features], d, lr, iters, tol, seed, fix_beta)


def procrustes_align(positions, reference, return_info=False):
    """Translate and orthogonally map ``positions`` onto ``reference`` (reflections allowed)."""
    X = as_matrix(positions, "positions")
    R = as_matrix(reference, "reference")
    if X.shape != R.shape:
        raise InvalidArgument("positions and reference must have equal shapes")
    mx, mr = X.mean(axis=0), R.mean(axis=0)
    Xc, Rc = X - mx, R - mr
    U, s, Vt = np.linalg.svd(Xc.T @ Rc)
    Q = U @ Vt
    aligned = Xc @ Q + mr
    if return_info:
        deficient = bool(s.size == 0 or s[-1] <= 1e-12 * max(s[0], 1e-300))
        return aligned, {"rotation": Q, "rank_deficient": deficient,
                         "discrepancy": float(np.linalg.norm(aligned - R))}
    return aligned


def principal_align(positions):
    """Procrustes map onto the principal-axis frame of the cloud itself.

    Graphs of different sizes have no node correspondence, so each cloud is
    rotated to its own covariance eigenbasis (descending variance, sign fixed
    by the largest-magnitude coordinate). Distances are preserved.
    """
    Z = as_matrix(positions, "positions")
    Zc = Z - Z.mean(axis=0)
    vals, vecs = np.linalg.eigh(Zc.T @ Zc)
    vecs = vecs[:, np.argsort(vals)[::-1]]
    out = Zc @ vecs
    for k in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, k])))
        if out[i, k] < 0:
            out[:, k] = -out[:, k]
    return out


def subsample_positions(positions, n_keep, seed=None):
    Z = as_matrix(positions, "positions")
    n_keep = check_positive_int(n_keep, "n_keep")
    rng = make_rng(seed)
    replace = n_keep > Z.shape[0]
    idx = rng.choice(Z.shape[0], size=n_keep, replace=replace)
    return Z[idx]


def graph_representation(positions):
    """[per-dimension mean, per-dimension population variance]."""
    Z = as_matrix(positions, "positions")
    if Z.shape[0] < 2:
        raise InvalidArgument("variance needs at least two rows")
    return np.concatenate([Z.mean(axis=0), Z.var(axis=0)])


class LatentSpaceModel(TransformerMixin, BaseEstimator, auto_wrap_output_keys=None):
    """Estimator form of the joint fit. ``fit`` takes (adjacencies, node_features)."""

    def __init__(self, d=2, lr=0.05, iters=500, tol=1e-6, n_keep=16, seed=0):
        self.d = d
        self.lr = lr
        self.iters = iters
        self.tol = tol
        self.n_keep = n_keep
        self.seed = seed

    def fit(self, X, y=None):
        adjs, feats = X
        self.fit_ = lsm_fit_joint(adjs, feats, self.d, self.lr, self.iters, self.tol, self.seed)
        return self

    def transform(self, X=None):
        """Graph representations of the fitted position blocks after subsampling."""
        check_is_fitted(self, "fit_")
        seeds = np.random.SeedSequence(self.seed).spawn(len(self.fit_.positions))
        return np.stack([graph_representation(subsample_positions(Z, self.n_keep, np.random.default_rng(s)))
                         for Z, s in zip(self.fit_.positions, seeds)])
