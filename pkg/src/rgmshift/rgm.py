"""Random graph models: kernels, latent distributions, feature maps, sampling, deformation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import (ConstraintViolation, InvalidArgument, as_matrix, as_vector,
                          check_nonneg, check_positive, check_positive_int, check_probability,
                          make_rng, spawn_seeds)

KERNEL_KINDS = ("constant", "epsilon_ball", "gaussian_ti")


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric kernel W with optional affine pre-transform x -> pre_scale * x - pre_shift.

    The pre-transform is how deformations are represented; it is the identity for
    freshly built kernels. ``w_max`` and ``lip_w_inf`` default to the tightest value
    implied by the kind; ``d_min`` is only checked when declared.
    """
    kind: str
    p: float = 0.0
    eps: float = 1.0
    hi: float = 1.0
    lo: float = 0.0
    smoothing: float = 0.0
    sigma: float = 1.0
    scale: float = 1.0
    w_max: float = None
    d_min: float = None
    lip_w_inf: float = None
    c_grad_w: float = 1.0
    pre_scale: float = 1.0
    pre_shift: tuple = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidArgument(f"unknown kernel kind {self.kind!r}")
        if self.kind == "constant":
            check_probability(self.p, "p")
            implied_max, implied_lip = float(self.p), 0.0
        elif self.kind == "epsilon_ball":
            check_positive(self.eps, "eps")
            check_nonneg(self.hi, "hi")
            check_nonneg(self.lo, "lo")
            check_nonneg(self.smoothing, "smoothing")
            implied_max = max(self.hi, self.lo)
            if self.hi == self.lo:
                implied_lip = 0.0
            else:
                implied_lip = abs(self.hi - self.lo) / self.smoothing if self.smoothing > 0 else math.inf
        else:
            check_positive(self.sigma, "sigma")
            check_nonneg(self.scale, "scale")
            implied_max = float(self.scale)
            implied_lip = self.scale / (self.sigma * math.sqrt(math.e))
        implied_lip *= abs(self.pre_scale)
        if self.w_max is None:
            object.__setattr__(self, "w_max", float(implied_max))
        elif self.w_max < implied_max - 1e-12:
            raise ConstraintViolation(f"w_max={self.w_max} below kernel maximum {implied_max}")
        if self.lip_w_inf is None:
            object.__setattr__(self, "lip_w_inf", float(implied_lip))
        check_nonneg(self.c_grad_w, "c_grad_w")
        if self.d_min is not None:
            if not 0 < self.d_min <= self.w_max:
                raise ConstraintViolation(f"need 0 < d_min <= w_max, got d_min={self.d_min}, w_max={self.w_max}")
        if self.pre_shift is not None:
            object.__setattr__(self, "pre_shift", tuple(float(v) for v in self.pre_shift))

    @property
    def lipschitz(self):
        """False for a hard ball, which breaks the Lipschitz kernel assumption."""
        return math.isfinite(self.lip_w_inf)

    def _prepare(self, X):
        X = np.asarray(X, dtype=float)
        if self.pre_scale != 1.0:
            X = self.pre_scale * X
        if self.pre_shift is not None:
            shift = np.asarray(self.pre_shift)
            if shift.shape[0] != X.shape[-1]:
                raise InvalidArgument("latent dimension does not match deformation shift")
            X = X - shift
        return X

    def profile(self, dist):
        """Kernel value as a function of Euclidean distance after pre-transform."""
        r = np.asarray(dist, dtype=float)
        if self.kind == "constant":
            return np.full(r.shape, float(self.p))
        if self.kind == "gaussian_ti":
            return self.scale * np.exp(-r ** 2 / (2.0 * self.sigma ** 2))
        if self.smoothing > 0:
            t = np.clip((r - self.eps) / self.smoothing, 0.0, 1.0)
        else:
            t = (r > self.eps).astype(float)
        return (1.0 - t) * self.hi + t * self.lo

    def matrix(self, X, Y=None):
        """Pairwise kernel matrix W(x_i, y_j)."""
        X = self._prepare(as_matrix(X, "X"))
        Y = X if Y is None else self._prepare(as_matrix(Y, "Y", ncols=X.shape[1]))
        diff = X[:, None, :] - Y[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return self.profile(dist)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["pre_shift"] is not None:
            d["pre_shift"] = list(d["pre_shift"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class LatentSpec:
    """Gaussian latent distribution with diagonal covariance."""
    mean: tuple
    cov_diag: tuple
    c_x: float = 1.0
    d_x_cover: float = None

    def __post_init__(self):
        mean = tuple(float(v) for v in as_vector(self.mean, "mean"))
        cov = tuple(float(v) for v in as_vector(self.cov_diag, "cov_diag", dim=len(mean)))
        if len(mean) < 1:
            raise InvalidArgument("latent dim must be >= 1")
        if any(c <= 0 for c in cov):
            raise InvalidArgument("cov_diag entries must be > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_diag", cov)
        check_positive(self.c_x, "c_x")
        if self.d_x_cover is None:
            object.__setattr__(self, "d_x_cover", float(len(mean)))
        check_nonneg(self.d_x_cover, "d_x_cover")

    @property
    def dim(self):
        return len(self.mean)

    @classmethod
    def isotropic(cls, mean, var=1.0, **kw):
        mean = as_vector(mean, "mean")
        return cls(tuple(mean), tuple(np.full(mean.shape[0], float(var))), **kw)

    def to_dict(self):
        return {"mean": list(self.mean), "cov_diag": list(self.cov_diag),
                "c_x": self.c_x, "d_x_cover": self.d_x_cover}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class FeatureMapSpec:
    kind: str = "zero_pad"
    out_dim: int = None
    matrix: tuple = None
    lip_f: float = 1.0
    holder_alpha: float = 1.0
    f_inf: float = 1.0

    def __post_init__(self):
        if self.kind == "zero_pad":
            if self.out_dim is None:
                raise InvalidArgument("zero_pad feature map needs out_dim")
            check_positive_int(self.out_dim, "out_dim")
        elif self.kind == "linear":
            if self.matrix is None:
                raise InvalidArgument("linear feature map needs a matrix")
            M = as_matrix(self.matrix, "matrix")
            object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in row) for row in M))
            object.__setattr__(self, "out_dim", M.shape[0])
        else:
            raise InvalidArgument(f"unknown feature map kind {self.kind!r}")
        if not 0 < self.holder_alpha <= 1:
            raise InvalidArgument("holder_alpha must lie in (0, 1]")
        check_nonneg(self.lip_f, "lip_f")
        check_nonneg(self.f_inf, "f_inf")

    def apply(self, X):
        X = as_matrix(X, "latents")
        if self.kind == "zero_pad":
            if X.shape[1] > self.out_dim:
                raise InvalidArgument("zero_pad out_dim smaller than latent dim")
            out = np.zeros((X.shape[0], self.out_dim))
            out[:, :X.shape[1]] = X
            return out
        M = np.asarray(self.matrix)
        if M.shape[1] != X.shape[1]:
            raise InvalidArgument("linear feature map columns must equal latent dim")
        return X @ M.T

    def to_dict(self):
        d = {"kind": self.kind, "out_dim": self.out_dim, "lip_f": self.lip_f,
             "holder_alpha": self.holder_alpha, "f_inf": self.f_inf}
        if self.matrix is not None:
            d["matrix"] = [list(r) for r in self.matrix]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class RgmSpec:
    kernel: KernelSpec
    latent: LatentSpec
    feature: FeatureMapSpec
    class_label: int = 0

    def __post_init__(self):
        if self.kernel.pre_shift is not None and len(self.kernel.pre_shift) != self.latent.dim:
            raise InvalidArgument("kernel shift and latent dims differ")
        if self.feature.kind == "zero_pad" and self.feature.out_dim < self.latent.dim:
            raise InvalidArgument("feature out_dim smaller than latent dim")
        if self.feature.kind == "linear" and len(self.feature.matrix[0]) != self.latent.dim:
            raise InvalidArgument("feature matrix does not match latent dim")

    def to_dict(self):
        return {"kernel": self.kernel.to_dict(), "latent": self.latent.to_dict(),
                "feature": self.feature.to_dict(), "class_label": self.class_label}

    @classmethod
    def from_dict(cls, d):
        return cls(KernelSpec.from_dict(d["kernel"]), LatentSpec.from_dict(d["latent"]),
                   FeatureMapSpec.from_dict(d["feature"]), int(d.get("class_label", 0)))


@dataclass
class Graph:
    n: int
    adjacency: np.ndarray
    signals: np.ndarray
    latents: np.ndarray = None
    label: int = 0
    binary: bool = False

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=float)
        if A.shape != (self.n, self.n):
            raise InvalidArgument(f"adjacency must be {self.n}x{self.n}")
        if not np.array_equal(A, A.T):
            raise InvalidArgument("adjacency must be symmetric")
        if self.binary and not np.all((A == 0) | (A == 1)):
            raise InvalidArgument("binary graph with non 0/1 entries")
        self.adjacency = A
        self.signals = as_matrix(self.signals, "signals")
        if self.signals.shape[0] != self.n:
            raise InvalidArgument("signals need one row per node")
        if self.latents is not None:
            self.latents = as_matrix(self.latents, "latents")
        self.label = int(self.label)


@dataclass(frozen=True)
class DeformationSpec:
    """Affine deformation tau(x) = scale * x + shift."""
    scale: float = 0.0
    shift: tuple = None
    n_p_tau: float = 0.0
    c_p_tau: float = 1.0

    def __post_init__(self):
        if abs(self.scale) > 0.5:
            raise ConstraintViolation("deformation gradient norm must be <= 1/2")
        check_nonneg(self.n_p_tau, "n_p_tau")
        if self.c_p_tau < 1:
            raise InvalidArgument("c_p_tau must be >= 1")
        if self.shift is not None:
            object.__setattr__(self, "shift", tuple(float(v) for v in as_vector(self.shift, "shift")))

    @property
    def grad_tau_inf(self):
        return abs(self.scale)


# ---------------------------------------------------------------------------


def sample_latents(latent: LatentSpec, n, seed=None):
    n = check_positive_int(n, "n")
    rng = make_rng(seed)
    mean = np.asarray(latent.mean)
    sd = np.sqrt(np.asarray(latent.cov_diag))
    return mean + sd * rng.standard_normal((n, latent.dim))


def eval_kernel(kernel: KernelSpec, x, y):
    x = as_vector(x, "x")
    y = as_vector(y, "y", dim=x.shape[0])
    return float(kernel.matrix(x[None, :], y[None, :])[0, 0])


def _bernoulli(P, rng):
    n = P.shape[0]
    iu = np.triu_indices(n)
    draws = (rng.random(len(iu[0])) < np.clip(P[iu], 0.0, 1.0)).astype(float)
    A = np.zeros((n, n))
    A[iu] = draws
    return np.triu(A) + np.triu(A, 1).T


def graph_from_latents(rgm: RgmSpec, X, realize_bernoulli=False, seed=None):
    X = as_matrix(X, "latents", ncols=rgm.latent.dim)
    A = rgm.kernel.matrix(X)
    if realize_bernoulli:
        A = _bernoulli(A, make_rng(seed))
    return Graph(X.shape[0], A, rgm.feature.apply(X), X, rgm.class_label, bool(realize_bernoulli))


def sample_graph(rgm: RgmSpec, n, realize_bernoulli=False, seed=None):
    rng = make_rng(seed)
    X = sample_latents(rgm.latent, n, rng)
    return graph_from_latents(rgm, X, realize_bernoulli, rng)


def _graph_size(n_per_graph, rng):
    if isinstance(n_per_graph, (tuple, list)):
        lo, hi = (check_positive_int(v, "n_per_graph") for v in n_per_graph)
        if hi < lo:
            raise InvalidArgument("n_per_graph range must satisfy lo <= hi")
        return int(rng.integers(lo, hi + 1))
    return check_positive_int(n_per_graph, "n_per_graph")


def generate_dataset(class_rgms, n_per_graph, m_per_class, seed=None, realize_bernoulli=False):
    """Graphs for every class, ordered by class then index; sizes fixed or uniform on [lo, hi]."""
    class_rgms = list(class_rgms)
    if not class_rgms:
        raise InvalidArgument("need at least one class")
    if len({r.latent.dim for r in class_rgms}) != 1:
        raise InvalidArgument("all classes must share the latent dimension")
    if np.isscalar(m_per_class):
        m_per_class = [int(m_per_class)] * len(class_rgms)
    if len(m_per_class) != len(class_rgms):
        raise InvalidArgument("m_per_class needs one count per class")
    for m in m_per_class:
        check_positive_int(m, "m_per_class", minimum=0)
    seeds = spawn_seeds(seed, sum(m_per_class))
    out, k = [], 0
    for rgm, m in zip(class_rgms, m_per_class):
        for _ in range(m):
            rng = np.random.default_rng(seeds[k])
            k += 1
            out.append(sample_graph(rgm, _graph_size(n_per_graph, rng), realize_bernoulli, rng))
    return out


def induced_prefix(graph: Graph, n):
    """Subgraph on the first ``n`` nodes.

    Latents are iid and edges conditionally independent, so the prefix of a
    sampled graph is itself a draw of the same model at size ``n``.
    """
    n = check_positive_int(n, "n")
    if n > graph.n:
        raise InvalidArgument(f"prefix size {n} exceeds graph size {graph.n}")
    lat = None if graph.latents is None else graph.latents[:n]
    return Graph(n, graph.adjacency[:n, :n], graph.signals[:n], lat, graph.label, graph.binary)


def discrete_kernel_degree(kernel: KernelSpec, x, points):
    points = as_matrix(points, "points")
    if points.shape[0] == 0:
        raise InvalidArgument("need at least one point")
    x = as_vector(x, "x", dim=points.shape[1])
    return float(np.mean(kernel.matrix(x[None, :], points)))


def continuous_kernel_degree(kernel: KernelSpec, x, latent: LatentSpec, mc_samples=10_000, seed=None):
    """Monte-Carlo estimate of the continuous degree and its standard error."""
    mc_samples = check_positive_int(mc_samples, "mc_samples")
    x = as_vector(x, "x", dim=latent.dim)
    if kernel.kind == "constant":
        return float(kernel.p), 0.0
    w = kernel.matrix(x[None, :], sample_latents(latent, mc_samples, seed))[0]
    se = float(w.std(ddof=1) / math.sqrt(mc_samples)) if mc_samples > 1 else math.inf
    return float(w.mean()), se


def apply_deformation(rgm: RgmSpec, tau: DeformationSpec) -> RgmSpec:
    """Deformed model: kernel W(x - tau(x), y - tau(y)) and latent law pushed through Id - tau."""
    D = rgm.latent.dim
    b = np.zeros(D) if tau.shift is None else as_vector(tau.shift, "shift", dim=D)
    a = 1.0 - tau.scale
    k = rgm.kernel
    old_shift = np.zeros(D) if k.pre_shift is None else np.asarray(k.pre_shift)
    # W(a0 (a x - b) - s0) = W(a0 a x - (a0 b + s0))
    new_scale = k.pre_scale * a
    new_shift = k.pre_scale * b + old_shift
    kernel = replace(k, pre_scale=new_scale, pre_shift=None if not np.any(new_shift) else tuple(new_shift),
                     lip_w_inf=k.lip_w_inf * abs(a))
    mean = a * np.asarray(rgm.latent.mean) - b
    cov = a ** 2 * np.asarray(rgm.latent.cov_diag)
    if np.any(cov <= 0):
        raise ConstraintViolation("deformation collapses the latent distribution")
    latent = replace(rgm.latent, mean=tuple(mean), cov_diag=tuple(cov))
    return replace(rgm, kernel=kernel, latent=latent)


def shift_rgm(rgm: RgmSpec, s) -> RgmSpec:
    """Same model with every latent mean coordinate moved by ``s`` (scalar or vector)."""
    s = np.broadcast_to(np.asarray(s, dtype=float), (rgm.latent.dim,))
    return replace(rgm, latent=replace(rgm.latent, mean=tuple(np.asarray(rgm.latent.mean) + s)))


def gaussian_class_rgms(means, kernel: KernelSpec, feature: FeatureMapSpec, var=1.0):
    """One Gaussian-latent model per class mean, labels 0..C-1."""
    return [RgmSpec(kernel, LatentSpec.isotropic(m, var), feature, j) for j, m in enumerate(means)]
