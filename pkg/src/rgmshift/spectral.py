"""Gram spectra of graph kernels and truncation ranks."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import InvalidArgument, as_matrix, check_positive_int, check_symmetric
from .rgm import Graph


# ---------------------------------------------------------------------------
# Weisfeiler-Lehman features


class WlDictionary:
    """Signature -> integer label table shared across a graph collection."""

    def __init__(self):
        self.table = {}

    def __call__(self, signature):
        lab = self.table.get(signature)
        if lab is None:
            lab = len(self.table)
            self.table[signature] = lab
        return lab

    def __len__(self):
        return len(self.table)


@dataclass
class WlFeatures:
    counts: list  # one Counter per iteration 0..h
    labels: list = field(default_factory=list)  # node labels per iteration

    @property
    def h(self):
        return len(self.counts) - 1


def degree_bins(degrees, n_bins=10, lo=None, hi=None):
    """Equal-width bin index of each degree over [lo, hi]."""
    d = np.asarray(degrees, dtype=float)
    lo = float(d.min()) if lo is None else lo
    hi = float(d.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(d.shape, dtype=int)
    idx = np.floor((d - lo) / (hi - lo) * n_bins).astype(int)
    return np.clip(idx, 0, n_bins - 1)


def _neighbors(graph: Graph):
    A = graph.adjacency
    return [np.flatnonzero((A[i] != 0) & (np.arange(graph.n) != i)) for i in range(graph.n)]


def _off_diag_degree(graph):
    A = (graph.adjacency != 0).astype(int)
    return A.sum(axis=1) - np.diag(A)


def wl_features(graph: Graph, h, node_labels=None, dictionary=None, n_bins=10):
    """WL subtree relabelling for iterations 0..h.

    Without ``node_labels`` the unweighted off-diagonal degree is binned into
    ``n_bins`` equal-width bins over [0, n - 1].
    """
    if h < 0 or int(h) != h:
        raise InvalidArgument("h must be a nonnegative integer")
    comp = WlDictionary() if dictionary is None else dictionary
    if node_labels is None:
        raw = degree_bins(_off_diag_degree(graph), n_bins, 0, max(graph.n - 1, 1))
    else:
        raw = list(node_labels)
        if len(raw) != graph.n:
            raise InvalidArgument("node_labels needs one label per node")
    labels = [comp(f"0|{v}") for v in raw]
    nbrs = _neighbors(graph)
    all_labels = [labels]
    counts = [Counter(labels)]
    for it in range(1, int(h) + 1):
        new = []
        for i in range(graph.n):
            sig = ",".join(str(v) for v in sorted(labels[j] for j in nbrs[i]))
            new.append(comp(f"{it}|{labels[i]}|{sig}"))
        labels = new
        all_labels.append(labels)
        counts.append(Counter(labels))
    return WlFeatures(counts, all_labels)


def _wl_dot(f1: WlFeatures, f2: WlFeatures):
    total = 0
    for c1, c2 in zip(f1.counts, f2.counts):
        small, big = (c1, c2) if len(c1) <= len(c2) else (c2, c1)
        total += sum(v * big.get(k, 0) for k, v in small.items())
    return float(total)


def wl_kernel(g1: Graph, g2: Graph, h, labels1=None, labels2=None, n_bins=10):
    comp = WlDictionary()
    f1 = wl_features(g1, h, labels1, comp, n_bins)
    f2 = wl_features(g2, h, labels2, comp, n_bins)
    return _wl_dot(f1, f2)


def wl_feature_matrix(graphs, h, node_labels=None, n_bins=10):
    """Dense count matrix (graphs x compressed labels) over a shared dictionary."""
    graphs = list(graphs)
    comp = WlDictionary()
    feats = [wl_features(g, h, None if node_labels is None else node_labels[i], comp, n_bins)
             for i, g in enumerate(graphs)]
    X = np.zeros((len(graphs), len(comp)))
    for i, f in enumerate(feats):
        for c in f.counts:
            for k, v in c.items():
                X[i, k] += v
    return X


def wl_gram(graphs, h, node_labels=None, n_bins=10):
    X = wl_feature_matrix(graphs, h, node_labels, n_bins)
    return X @ X.T


def dot_product_gram(embeddings, unit_norm=False):
    E = as_matrix(embeddings, "embeddings")
    if unit_norm:
        nrm = np.linalg.norm(E, axis=1, keepdims=True)
        if np.any(nrm == 0):
            raise InvalidArgument("zero embedding cannot be normalised")
        E = E / nrm
    K = E @ E.T
    return 0.5 * (K + K.T)


def normalize_gram(K):
    K = check_symmetric(K, "K")
    d = np.diag(K).copy()
    if np.any(d <= 0):
        raise InvalidArgument("Gram diagonal must be positive")
    s = np.sqrt(d)
    Kn = K / s[:, None] / s[None, :]
    Kn = 0.5 * (Kn + Kn.T)
    np.fill_diagonal(Kn, 1.0)
    return Kn


# ---------------------------------------------------------------------------
# eigenvalues


def jacobi_eigenvalues(A, tol=1e-10, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm is below tol * ||A||_F.
    Returns (eigenvalues in input diagonal order, sweeps used).
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    scale = float(np.linalg.norm(A))
    if n <= 1 or scale == 0.0:
        return np.diag(A).copy(), 0
    target = tol * scale

    def off(M):
        return math.sqrt(max(float(np.sum(M * M) - np.sum(np.diag(M) ** 2)), 0.0))

    sweeps = 0
    while off(A) > target and sweeps < max_sweeps:
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                with np.errstate(over="ignore"):
                    theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
    return np.diag(A).copy(), sweeps


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    n: int
    negative_mass: float = 0.0
    has_negative: bool = False
    sweeps: int = 0

    def clipped(self):
        return np.clip(self.eigenvalues, 0.0, None)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "eigenvalue"])
        for i, v in enumerate(self.eigenvalues, start=1):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()


def empirical_spectrum(K, n=None, tol=1e-10, neg_tol=1e-8, max_sweeps=100):
    """Descending eigenvalues of K / n."""
    K = check_symmetric(K, "K", tol=1e-8)
    K = 0.5 * (K + K.T)
    n = K.shape[0] if n is None else check_positive_int(n, "n")
    lam, sweeps = jacobi_eigenvalues(K / n, tol, max_sweeps)
    lam = np.sort(lam)[::-1]
    neg = lam[lam < 0]
    return Spectrum(lam, n, float(-neg.sum()), bool(np.any(lam < -neg_tol)), sweeps)


def tail_fractions(spec: Spectrum):
    """tail[r] = sum_{i>r} lambda_i / sum lambda_i for r = 0..n (negatives clipped)."""
    lam = spec.clipped()
    total = math.fsum(lam)
    if total <= 0:
        raise InvalidArgument("spectrum has no positive mass")
    return np.array([math.fsum(lam[r:]) / total for r in range(len(lam) + 1)])


def truncation_rank(spec: Spectrum, eps):
    if not 0 <= eps <= 1:
        raise InvalidArgument("eps must lie in [0, 1]")
    tail = tail_fractions(spec)
    return int(np.flatnonzero(tail <= eps)[0])


def spectrum_report(grams_by_seed, eps_list=(0.1, 0.01, 0.001), method="wl", depth=None, normalize=True):
    """r_eps table rows (mean, std over seeds) and per-seed decay curves.

    ``grams_by_seed`` is a list of Gram matrices, one per seed.
    """
    grams_by_seed = list(grams_by_seed)
    if not grams_by_seed:
        raise InvalidArgument("need at least one Gram matrix")
    specs = []
    for K in grams_by_seed:
        if K.shape[0] < 2:
            raise InvalidArgument("need at least two graphs")
        specs.append(empirical_spectrum(normalize_gram(K) if normalize else K))
    rows = []
    for eps in eps_list:
        r = np.array([truncation_rank(s, eps) for s in specs], dtype=float)
        rows.append({"method": method, "depth": depth, "eps": float(eps), "mean": float(r.mean()),
                     "std": float(r.std()), "n": specs[0].n, "seed_count": len(specs)})
    curves = [[(i + 1, float(v)) for i, v in enumerate(s.eigenvalues)] for s in specs]
    return {"rows": rows, "curves": curves, "spectra": specs}


def rank_table_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "depth", "eps", "mean", "std", "n", "seed_count"])
    for r in rows:
        w.writerow([r["method"], r["depth"], repr(r["eps"]), repr(r["mean"]), repr(r["std"]), r["n"],
                    r["seed_count"]])
    return buf.getvalue()


class WlSpectrum(TransformerMixin, BaseEstimator):
    """Estimator form: fit a WL Gram spectrum on graphs; transform returns WL count vectors."""

    def __init__(self, h=3, n_bins=10, normalize=True):
        self.h = h
        self.n_bins = n_bins
        self.normalize = normalize

    def fit(self, X, y=None):
        graphs = list(X)
        if len(graphs) < 2 or not all(isinstance(g, Graph) for g in graphs):
            raise InvalidArgument("need at least two Graph objects")
        K = wl_gram(graphs, self.h, n_bins=self.n_bins)
        self.spectrum_ = empirical_spectrum(normalize_gram(K) if self.normalize else K)
        return self

    def transform(self, X):
        return wl_feature_matrix(list(X), self.h, n_bins=self.n_bins)

    def truncation_rank(self, eps):
        return truncation_rank(self.spectrum_, eps)
