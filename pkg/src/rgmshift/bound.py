"""Constants and terms of the domain adaptation generalization bound.

Layer-indexed lists are 0-based in Python and hold layers 1..T. Constants that are
defined for l = 0..T are returned as length T+1 arrays. Empty products are 1.
Natural logarithms throughout.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from math import comb, fsum, sqrt
from typing import Sequence

import numpy as np

from ._validation import ConstraintViolation, InvalidArgument
from .transport import DivergenceInputs, delta_d as _delta_d, gaussian_w2


# ---------------------------------------------------------------------------
# inputs


@dataclass
class MpnnRegularity:
    lip_phi: list
    lip_psi: list
    bias_phi: list = None
    bias_psi: list = None

    def __post_init__(self):
        T = len(self.lip_phi)
        if len(self.lip_psi) != T:
            raise InvalidArgument("lip_phi and lip_psi need one entry per layer")
        if self.bias_phi is None:
            self.bias_phi = [0.0] * T
        if self.bias_psi is None:
            self.bias_psi = [0.0] * T
        for name in ("lip_phi", "lip_psi", "bias_phi", "bias_psi"):
            vals = [float(v) for v in getattr(self, name)]
            if len(vals) != T or any(v < 0 for v in vals):
                raise InvalidArgument(f"{name} must hold {T} nonnegative values")
            setattr(self, name, vals)

    @property
    def T(self):
        return len(self.lip_phi)


@dataclass
class ClassifierRegularity:
    lip_sigma: list
    sv_max: list
    frob: list = None
    delta_ratio: list = None
    alpha_act: float = 1.0
    beta_act: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        L = len(self.sv_max)
        if len(self.lip_sigma) != L:
            raise InvalidArgument("lip_sigma and sv_max need one entry per layer")
        if self.frob is None:
            self.frob = list(self.sv_max)
        if self.delta_ratio is None:
            self.delta_ratio = [0.0] * L
        for name in ("lip_sigma", "sv_max", "frob", "delta_ratio"):
            vals = [float(v) for v in getattr(self, name)]
            if len(vals) != L or any(v < 0 for v in vals):
                raise InvalidArgument(f"{name} must hold {L} nonnegative values")
            setattr(self, name, vals)
        if self.kappa < 1:
            raise InvalidArgument("kappa must be >= 1")
        if self.alpha_act > self.beta_act:
            raise InvalidArgument("alpha_act must be <= beta_act")

    @property
    def L(self):
        return len(self.sv_max)


@dataclass
class PerturbRegularity:
    """Per-(layer t, MLP sublayer k) weight norms and relative perturbations."""
    theta_phi: list
    ratio_phi: list
    theta_psi: list
    ratio_psi: list
    hidden_h: list
    hidden_f: list
    lip_sigma: float = 1.0
    alpha_act: float = 1.0
    beta_act: float = 1.0
    kappa: float = 1.0
    c_grad_w: float = 0.0
    grad_tau_inf: float = 0.0
    n_p_tau: float = 0.0
    c_p_tau: float = 1.0
    delta_opt: float = 0.0

    def __post_init__(self):
        T = len(self.theta_phi)
        for name in ("theta_phi", "ratio_phi", "theta_psi", "ratio_psi"):
            rows = [[float(v) for v in row] for row in getattr(self, name)]
            if len(rows) != T or any(v < 0 for row in rows for v in row):
                raise InvalidArgument(f"{name} must hold {T} rows of nonnegative values")
            setattr(self, name, rows)
        for t in range(T):
            if len(self.ratio_phi[t]) != len(self.theta_phi[t]) or len(self.ratio_psi[t]) != len(self.theta_psi[t]):
                raise InvalidArgument("ratio and theta rows must align")
            for th, r in zip(self.theta_phi[t] + self.theta_psi[t], self.ratio_phi[t] + self.ratio_psi[t]):
                if th == 0 and r != 0:
                    raise InvalidArgument("nonzero perturbation ratio on a zero-norm matrix")
        if len(self.hidden_h) != T or len(self.hidden_f) != T:
            raise InvalidArgument("hidden_h and hidden_f need one entry per layer")
        if self.grad_tau_inf > 0.5:
            raise ConstraintViolation("grad_tau_inf must be <= 1/2")
        for name in ("c_grad_w", "grad_tau_inf", "n_p_tau", "delta_opt"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if self.kappa < 1 or self.alpha_act <= 0 or self.alpha_act > self.beta_act:
            raise InvalidArgument("activation bounds need 0 < alpha_act <= beta_act and kappa >= 1")

    @property
    def T(self):
        return len(self.theta_phi)


@dataclass
class RgmConstants:
    w_inf: float = 1.0
    w_max: float = 1.0
    d_min: float = 1.0
    lip_w_inf: float = 1.0
    c_x: float = 1.0
    d_x_cover: float = 1.0
    lip_f: float = 1.0
    f_inf: float = 1.0
    holder_alpha: float = 1.0
    L2_kernel: float = 1.0

    def __post_init__(self):
        if not self.d_min > 0:
            raise InvalidArgument("d_min must be > 0")
        if self.c_x <= 0:
            raise InvalidArgument("c_x must be > 0")
        if not 0 < self.holder_alpha <= 1:
            raise InvalidArgument("holder_alpha must lie in (0, 1]")
        for name in ("w_inf", "w_max", "lip_w_inf", "d_x_cover", "lip_f", "f_inf", "L2_kernel"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")


@dataclass
class BoundInputs:
    source_risk: float
    class_count: int
    lambda_r: float
    rho: float
    N: int
    mpnn: MpnnRegularity
    cls: ClassifierRegularity
    pert: PerturbRegularity
    rgm: RgmConstants
    eps3: float = 0.0
    eps4: float = 0.0
    delta_d: float = None
    w2_hat: list = None
    n_nodes_source: int = None
    n_nodes_target: int = None
    m_per_class_source: list = None
    m_per_class_target: list = None
    latent_dim: int = None

    def __post_init__(self):
        if self.lambda_r <= 0:
            raise InvalidArgument("lambda_r must be > 0")
        if not 0 < self.rho < 1:
            raise InvalidArgument("rho must lie in (0, 1)")
        if self.class_count < 1:
            raise InvalidArgument("class_count must be >= 1")
        for name in ("eps3", "eps4", "source_risk"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if self.mpnn.T != self.pert.T:
            raise InvalidArgument("mpnn and pert regularities disagree on depth T")
        if self.delta_d is None and self.w2_hat is None:
            raise InvalidArgument("need delta_d or w2_hat")

    def divergence_inputs(self):
        C = self.class_count
        n_s = self.n_nodes_source or self.N
        n_t = self.n_nodes_target or self.N
        return DivergenceInputs(
            class_count=C, L2_kernel=self.rgm.L2_kernel, lip_f=self.rgm.lip_f,
            holder_alpha=self.rgm.holder_alpha, c_x=self.rgm.c_x, d_x_cover=self.rgm.d_x_cover,
            rho=self.rho, n_nodes_source=n_s, n_nodes_target=n_t,
            m_per_class_source=list(self.m_per_class_source or [1]),
            m_per_class_target=list(self.m_per_class_target or [1]),
            w2_hat=list(self.w2_hat))

    def resolved_delta_d(self):
        if self.delta_d is not None:
            return float(self.delta_d)
        return _delta_d(self.divergence_inputs())["delta_d"]

    # serialization ----------------------------------------------------
    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mpnn"] = MpnnRegularity(**d["mpnn"])
        d["cls"] = ClassifierRegularity(**d["cls"])
        d["pert"] = PerturbRegularity(**d["pert"])
        d["rgm"] = RgmConstants(**d.get("rgm", {}))
        return cls(**d)


def illustration_defaults(hidden=16, source_risk=0.1, shift=2.0):
    """Default configuration for bound illustration sweeps.

    Three classes, 150 nodes, 1e5 graphs per class, 4-D latent space with unit
    covering constant, two-layer MLPs with 0.5-Lipschitz layers, 10% weight
    changes, unit deformation mass and |grad tau| = 1/2.
    """
    T, L = 2, 2
    lay = 0.5 * 0.5  # two 0.5-Lipschitz layers with 1-Lipschitz activations
    C = 3
    latent_dim = 4
    w2 = gaussian_w2(np.zeros(latent_dim), np.ones(latent_dim),
                     np.full(latent_dim, shift), np.ones(latent_dim))
    return BoundInputs(
        source_risk=source_risk, class_count=C, lambda_r=0.1, rho=0.9, N=150,
        mpnn=MpnnRegularity([lay] * T, [lay] * T, [0.0] * T, [0.0] * T),
        cls=ClassifierRegularity([1.0] * L, [0.5] * L, [0.5] * L, [0.1] * L,
                                 alpha_act=1.0, beta_act=1.2, kappa=1.1),
        pert=PerturbRegularity(
            theta_phi=[[0.5] * L for _ in range(T)], ratio_phi=[[0.1] * L for _ in range(T)],
            theta_psi=[[0.5] * L for _ in range(T)], ratio_psi=[[0.1] * L for _ in range(T)],
            hidden_h=[hidden] * T, hidden_f=[hidden] * T, lip_sigma=1.0,
            alpha_act=1.0, beta_act=1.2, kappa=1.1,
            c_grad_w=1.0, grad_tau_inf=0.5, n_p_tau=1.0, c_p_tau=1.0, delta_opt=0.0),
        rgm=RgmConstants(w_inf=0.5, w_max=0.5, d_min=1.0, lip_w_inf=1.0, c_x=1.0, d_x_cover=4.0,
                         lip_f=0.5, f_inf=0.5, holder_alpha=1.0, L2_kernel=1.0),
        w2_hat=[w2] * C, n_nodes_source=150, n_nodes_target=150,
        m_per_class_source=[100000] * C, m_per_class_target=[100000] * C, latent_dim=latent_dim)


# ---------------------------------------------------------------------------
# classifier


def classifier_constants(cls: ClassifierRegularity):
    """(L_NN, G_NN) of the MLP classifier."""
    if cls.alpha_act == 0:
        raise InvalidArgument("alpha_act must be > 0")
    L_NN = float(np.prod([s * l for s, l in zip(cls.lip_sigma, cls.sv_max)]))
    amp = (cls.beta_act / cls.alpha_act * cls.kappa ** 2) ** cls.L
    G_NN = amp * (float(np.prod([1.0 + r for r in cls.delta_ratio])) - 1.0)
    return L_NN, G_NN


# ---------------------------------------------------------------------------
# convergence constants


@dataclass
class LayerConstants:
    C1: np.ndarray
    C2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    D3: np.ndarray
    A: np.ndarray  # A[0] unused (nan)

    def as_dict(self):
        return {k: [float(x) for x in getattr(self, k)] for k in ("C1", "C2", "D1", "D2", "D3", "A")}


def layer_constants(mpnn: MpnnRegularity, rgm: RgmConstants) -> LayerConstants:
    """Recursive evaluation of the layerwise norm and Lipschitz constants."""
    T = mpnn.T
    if rgm.d_min <= 0:
        raise InvalidArgument("d_min must be > 0")
    W, d, LW = rgm.w_inf, rgm.d_min, rgm.lip_w_inf
    C1 = np.zeros(T + 1)
    C2 = np.ones(T + 1)
    D1 = np.zeros(T + 1)
    D2 = np.zeros(T + 1)
    D3 = np.ones(T + 1)
    A = np.full(T + 1, np.nan)
    for l in range(1, T + 1):
        lphi, lpsi = mpnn.lip_phi[l - 1], mpnn.lip_psi[l - 1]
        b_phi, b_psi = mpnn.bias_phi[l - 1], mpnn.bias_psi[l - 1]
        grow = lpsi * (1.0 + lphi)
        C1[l] = grow * C1[l - 1] + (lpsi * b_phi + b_psi)
        C2[l] = grow * C2[l - 1]
        grow_d = lpsi * (1.0 + W / d * lphi)
        lip_part = lpsi * lphi * LW / d + lpsi * lphi * W * LW / d ** 2
        D1[l] = grow_d * D1[l - 1] + fsum([
            lpsi * LW / d * b_phi, lpsi * b_phi * LW / d ** 2, C1[l - 1] * lip_part])
        D2[l] = grow_d * D2[l - 1] + C2[l - 1] * lip_part
        D3[l] = 1.0 + W / d * lphi
        A[l] = lpsi * sqrt(1.0 + 8.0 * W ** 2 * lphi ** 2 / d ** 2)
    return LayerConstants(C1, C2, D1, D2, D3, A)


def _suffix_products(A, T):
    """P[l] = prod_{l'=l+1}^{T} A[l'] for l = 1..T."""
    P = np.ones(T + 2)
    for l in range(T - 1, 0, -1):
        P[l] = P[l + 1] * A[l + 1]
    return P


def k_constants(lc: LayerConstants, mpnn: MpnnRegularity, rgm: RgmConstants, N):
    T = mpnn.T
    W, d, LW, cx, D = rgm.w_inf, rgm.d_min, rgm.lip_w_inf, rgm.c_x, rgm.d_x_cover
    P = _suffix_products(lc.A, T)
    root = sqrt(math.log(cx)) if cx > 1 else 0.0
    cover = root + sqrt(D)
    s_bias, s_c2, s5, s6, s7 = [], [], [], [], []
    for l in range(1, T + 1):
        lphi, lpsi, b_phi = mpnn.lip_phi[l - 1], mpnn.lip_psi[l - 1], mpnn.bias_phi[l - 1]
        s_bias.append(lpsi * (lphi * lc.C1[l - 1] + b_phi) * P[l])
        s_c2.append(lpsi * lphi * lc.C2[l - 1] * P[l])
        s5.append(lpsi * (2.0 * W * lphi * lc.D1[l - 1] + LW * lphi * lc.C1[l - 1] + LW * b_phi) * P[l])
        s6.append(lpsi * (W * lphi * lc.C1[l - 1] + LW * lphi * lc.C2[l - 1]) * P[l])
        s7.append(lpsi * lphi * lc.D3[l - 1] * P[l])
    sb, sc = fsum(s_bias), fsum(s_c2)
    tail = sqrt(2.0) * W + LW
    return {
        "K1": 2.0 * LW * W * cover / d ** 2 * sb,
        "K2": 2.0 * tail * W / d ** 2 * sb,
        "K3": 2.0 * LW * cover * W / d ** 2 * sc,
        "K4": 2.0 * tail * W / (d ** 2 * sqrt(N)) * sc,
        "K5": 2.0 / d * fsum(s5),
        "K6": 2.0 / d * fsum(s6),
        "K7": 2.0 * W / d * fsum(s7),
        "K8": cx * W / (sqrt(2.0) * d) * sb,
        "K9": cx * W / (sqrt(2.0) * d) * sc,
    }


def rst_constants(K, lc: LayerConstants, rgm: RgmConstants):
    cx, D, Lf = rgm.c_x, rgm.d_x_cover, rgm.lip_f
    logc = math.log(cx)
    C1T, C2T = lc.C1[-1], lc.C2[-1]
    D1T, D3T = lc.D1[-1], lc.D3[-1]
    frac = D / (2.0 * (D + 1.0))
    out = {f"R{i}": 14.0 * K[f"K{i}"] ** 2 for i in range(1, 5)}
    out["S1"] = fsum([14 * K["K5"] ** 2, 14 * K["K8"] ** 2 * logc, 56 * D1T ** 2, 7 * cx ** 2 * C1T ** 2 * logc])
    out["S2"] = fsum([14 * K["K6"] ** 2, 14 * K["K9"] ** 2 * logc, 56 * D3T ** 2, 7 * cx ** 2 * C2T ** 2 * logc])
    out["S3"] = fsum([14 * K["K7"] ** 2, 56 * D3T ** 2 * Lf ** 2])
    out["S4"] = fsum([14 * K["K8"] ** 2, 7 * cx ** 2 * C1T ** 2])
    out["S5"] = fsum([14 * K["K9"] ** 2, 7 * cx ** 2 * C2T ** 2])
    out["T1"] = fsum([14 * K["K8"] ** 2, 7 * cx ** 2 * C1T ** 2]) * frac
    out["T2"] = fsum([14 * K["K9"] ** 2, 7 * cx ** 2 * C2T ** 2]) * frac
    return out


def delta_n(N, rho, rst, f_inf, lip_f, d_x_cover):
    """Discrete-to-continuous convergence error term."""
    if N < 2:
        raise InvalidArgument("N must be >= 2")
    if not 0 < rho < 1:
        raise InvalidArgument("rho must lie in (0, 1)")
    f2 = f_inf ** 2
    root = N ** (1.0 / (d_x_cover + 1.0))
    lg = math.log(N)
    return fsum([
        (rst["R1"] + rst["R2"] * f2) / N,
        fsum([rst["S1"], rst["S2"] * f2, rst["S3"] * lip_f ** 2, (rst["T1"] + rst["T2"] * f2) * lg]) / root,
        ((rst["R3"] + rst["R4"] * f2) / N + (rst["S4"] + rst["S5"] * f2) / root) * math.log(2.0 / rho),
    ])


# ---------------------------------------------------------------------------
# perturbation constants


@dataclass
class PerturbConstants:
    delta_phi: np.ndarray      # index 1..T
    delta_psi: np.ndarray
    lt_phi: np.ndarray         # index 0..T, lt_phi[0] = 0
    lt_psi: np.ndarray
    dt_phi0: np.ndarray
    dt_psi0: np.ndarray
    ct1: np.ndarray            # 0..T
    ct2: np.ndarray            # 0..T
    c_phi: np.ndarray          # 1..T
    ct_phi: np.ndarray         # 1..T
    ct5: np.ndarray            # 0..T, ct5[0] = |f|
    c_t2: np.ndarray           # 1..T
    c_t3: np.ndarray           # 1..T, c_t3[1] never enters a product
    c_t4: np.ndarray           # 1..T
    ct3: float

    def as_dict(self):
        out = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            out[f_.name] = float(v) if np.isscalar(v) else [float(x) for x in v]
        return out


def _amp(pert: PerturbRegularity, L):
    return (pert.beta_act / pert.alpha_act * pert.kappa ** 2) ** L


def perturb_constants(pert: PerturbRegularity, mpnn: MpnnRegularity, lc: LayerConstants,
                      rgm: RgmConstants) -> PerturbConstants:
    T = mpnn.T
    W, d, Wmax, f = rgm.w_inf, rgm.d_min, rgm.w_max, rgm.f_inf
    nan = np.nan
    dphi = np.full(T + 1, nan)
    dpsi = np.full(T + 1, nan)
    lt_phi = np.zeros(T + 1)
    lt_psi = np.zeros(T + 1)
    dt_phi0 = np.full(T + 1, nan)
    dt_psi0 = np.full(T + 1, nan)
    for t in range(1, T + 1):
        th_phi, r_phi = pert.theta_phi[t - 1], pert.ratio_phi[t - 1]
        th_psi, r_psi = pert.theta_psi[t - 1], pert.ratio_psi[t - 1]
        dphi[t] = sqrt(pert.hidden_h[t - 1]) * _amp(pert, len(th_phi)) * (float(np.prod([1 + r for r in r_phi])) - 1.0)
        dpsi[t] = sqrt(pert.hidden_f[t - 1]) * _amp(pert, len(th_psi)) * (float(np.prod([1 + r for r in r_psi])) - 1.0)
        lt_phi[t] = pert.lip_sigma ** len(th_phi) * float(np.prod([r * th + th for th, r in zip(th_phi, r_phi)]))
        lt_psi[t] = pert.lip_sigma ** len(th_psi) * float(np.prod([r * th + th for th, r in zip(th_psi, r_psi)]))
        dt_phi0[t] = (dphi[t] + 1.0) * mpnn.bias_phi[t - 1]
        dt_psi0[t] = (dpsi[t] + 1.0) * mpnn.bias_psi[t - 1]
    ct1 = np.zeros(T + 1)
    ct2 = np.ones(T + 1)
    for l in range(1, T + 1):
        grow = lt_psi[l] * (1.0 + lt_phi[l])
        ct1[l] = grow * ct1[l - 1] + (lt_psi[l] * dt_phi0[l] + dt_psi0[l])
        ct2[l] = grow * ct2[l - 1]
    c_phi = np.full(T + 1, nan)
    ct_phi = np.full(T + 1, nan)
    ct5 = np.full(T + 1, nan)
    ct5[0] = f
    c_t2 = np.full(T + 1, nan)
    c_t3 = np.full(T + 1, nan)
    c_t4 = np.full(T + 1, nan)
    for l in range(1, T + 1):
        lphi, lpsi = mpnn.lip_phi[l - 1], mpnn.lip_psi[l - 1]
        c_phi[l] = lphi * (lc.C1[l - 1] + lc.C2[l - 1] * f) + mpnn.bias_phi[l - 1]
        ct_phi[l] = lphi * (ct1[l - 1] + ct2[l - 1] * f) + mpnn.bias_phi[l - 1]
        ct5[l] = max(ct1[l] + ct2[l] * f, W / d * (dphi[l] + 1.0) * ct_phi[l])
        c_t2[l] = lpsi * dphi[l] * c_phi[l] * W / d
        c_t3[l] = lpsi * lt_phi[l - 1] * W / d
        c_t4[l] = dpsi[l] * lpsi * ct5[l - 1] + dpsi[l] * mpnn.bias_psi[l - 1]
    ct3 = (1.0 / d + Wmax / d ** 2) * fsum(
        lt_psi[l] * (lt_phi[l] * (ct1[l - 1] + ct2[l - 1] * f) + dt_phi0[l]) for l in range(1, T + 1))
    return PerturbConstants(dphi, dpsi, lt_phi, lt_psi, dt_phi0, dt_psi0, ct1, ct2,
                            c_phi, ct_phi, ct5, c_t2, c_t3, c_t4, ct3)


def delta_gamma_theta(pc: PerturbConstants, pert: PerturbRegularity, mpnn: MpnnRegularity, rgm: RgmConstants):
    """Construction-stability term and its three-part breakdown."""
    T = mpnn.T
    weight_terms = []
    for l in range(1, T + 1):
        prod = 1.0
        for lp in range(l + 1, T + 1):
            prod *= mpnn.lip_psi[lp - 1] + pc.c_t3[lp]
        weight_terms.append((pc.c_t2[l] + pc.c_t4[l]) * prod)
    weight_change = fsum(weight_terms)
    mixed = pc.ct3 * pert.c_grad_w * pert.grad_tau_inf
    deformation = (pc.ct1[T] + pc.ct2[T] * rgm.f_inf) * pert.n_p_tau
    total = fsum([weight_change, mixed, deformation])
    return total, {"weight_change": weight_change, "mixed": mixed, "rgm_deformation": deformation}


# ---------------------------------------------------------------------------
# assembly


@dataclass
class BoundReport:
    L_NN: float
    G_NN: float
    layer: dict
    K: dict
    RST: dict
    delta_n: float
    perturb: dict
    delta_gamma_theta: float
    dgt_breakdown: dict
    delta_d: float
    xi_amplitude: float
    transfer_penalty: float
    eps_t_upper: float
    source_risk: float

    def to_dict(self):
        return asdict(self)


def assemble_bound(inputs: BoundInputs, delta_n_value=None, dgt_value=None) -> BoundReport:
    """Evaluate every term and the assembled target-risk upper bound."""
    if inputs.lambda_r <= 0:
        raise InvalidArgument("lambda_r must be > 0")
    rgm, mpnn = inputs.rgm, inputs.mpnn
    L_NN, G_NN = classifier_constants(inputs.cls)
    lc = layer_constants(mpnn, rgm)
    K = k_constants(lc, mpnn, rgm, inputs.N)
    rst = rst_constants(K, lc, rgm)
    dn = delta_n(inputs.N, inputs.rho, rst, rgm.f_inf, rgm.lip_f, rgm.d_x_cover) if delta_n_value is None else delta_n_value
    pc = perturb_constants(inputs.pert, mpnn, lc, rgm)
    dgt, parts = delta_gamma_theta(pc, inputs.pert, mpnn, rgm)
    if dgt_value is not None:
        dgt = dgt_value
    dd = inputs.resolved_delta_d()
    xi = fsum([sqrt(dn), dgt + inputs.pert.delta_opt, inputs.eps3, inputs.eps4])
    penalty = sqrt(inputs.class_count * dd / inputs.lambda_r) * (L_NN * xi + G_NN)
    for name, v in (("delta_n", dn), ("delta_gamma_theta", dgt), ("delta_d", dd), ("penalty", penalty)):
        if not np.isfinite(v):
            raise InvalidArgument(f"{name} is not finite")
    return BoundReport(L_NN, G_NN, lc.as_dict(), K, rst, dn, pc.as_dict(), dgt, parts, dd, xi,
                       penalty, inputs.source_risk + penalty, inputs.source_risk)


# ---------------------------------------------------------------------------
# sufficient condition (zero formal bias regime)


def _binom_sum(L, r):
    return fsum(comb(L, k) * r ** k for k in range(1, L + 1))


def sufficient_condition(inputs: BoundInputs, xi: float):
    """Check the four sufficient conditions for eps_T <= (1 + xi) eps_S."""
    if xi <= 0:
        raise InvalidArgument("xi must be > 0")
    mpnn, cls, pert, rgm = inputs.mpnn, inputs.cls, inputs.pert, inputs.rgm
    if any(mpnn.bias_phi) or any(mpnn.bias_psi):
        raise InvalidArgument("sufficient condition assumes zero formal biases")
    if inputs.eps3 or inputs.eps4:
        raise InvalidArgument("sufficient condition assumes eps3 = eps4 = 0")
    if inputs.w2_hat is None:
        raise InvalidArgument("sufficient condition needs per-class w2_hat")
    T = mpnn.T
    Lc = cls.L
    Lm = max(len(r) for r in pert.theta_phi + pert.theta_psi)
    W, Wmax, d, LW = rgm.w_inf, rgm.w_max, rgm.d_min, rgm.lip_w_inf
    cx, D, Lf, f = rgm.c_x, rgm.d_x_cover, rgm.lip_f, rgm.f_inf
    logc = math.log(cx)
    C = inputs.class_count
    L_sig = max(cls.lip_sigma)
    lam_M = max(cls.sv_max)
    L_P = max(mpnn.lip_phi + mpnn.lip_psi)
    dM = max(cls.delta_ratio)
    dT = max(v for row in pert.ratio_phi + pert.ratio_psi for v in row)
    DT = max(v for row in pert.theta_phi + pert.theta_psi for v in row)
    amp_cls = (cls.beta_act / cls.alpha_act * cls.kappa ** 2) ** Lc
    amp_m = (pert.beta_act * pert.kappa ** 2 / pert.alpha_act) ** Lm
    sM = _binom_sum(Lc, dM)
    sT = _binom_sum(Lm, dT)

    U = {}
    U["U_LNN"] = L_sig ** Lc * lam_M ** Lc
    U["U_GNN"] = amp_cls * sM
    a8 = 1.0 + 8.0 * W ** 2 * L_P ** 2 / d ** 2
    growP = L_P ** (T + 2) * (1 + L_P) ** T
    U["U_K6"] = 2 * T * growP * LW * sqrt(a8) ** (T - 1) / d
    U["U_K7"] = 2 * T * L_P ** 2 * W * (1 + W * L_P / d) / d * a8 ** ((T - 1) / 2)
    U["U_K9"] = 0.8 * T * growP * cx * W * sqrt(a8) ** (T - 1) / d
    cover = (sqrt(logc) if cx > 1 else 0.0) + sqrt(D)
    grow2 = L_P ** (2 * T + 4) * (1 + L_P) ** (2 * T)
    U["U_R3"] = 56 * T ** 2 * grow2 * a8 ** (T - 1) * LW ** 2 * cover ** 2 * W ** 2 / d ** 4
    U["U_R4"] = 56 * T * grow2 * (sqrt(2) * W + LW) ** 2 * W ** 2 * a8 ** (T - 1) / d ** 4
    cT = L_P ** (2 * T) * (1 + L_P) ** (2 * T)
    U["U_S2"] = fsum([14 * U["U_K6"] ** 2, 14 * U["U_K9"] ** 2 * logc, 56 * (1 + W * L_P / d) ** 2,
                      7 * cT * cx ** 2 * logc])
    U["U_S3"] = 14 * U["U_K7"] ** 2 + 56 * (1 + W * L_P / d) ** 2 * Lf ** 2
    U["U_S5"] = 14 * U["U_K9"] ** 2 + 7 * cx ** 2 * cT
    U["U_T2"] = (14 * U["U_K9"] ** 2 + 7 * cx ** 2 * cT) * D / (2 * (D + 1))
    U["Q1"] = U["U_T2"] * f ** 2 + 1.5 * (U["U_S2"] * f ** 2 + U["U_S3"] * Lf ** 2)
    U["Q2"] = 1.5 * U["U_S5"] * f ** 2 + U["U_R3"] + 0.5 * U["U_R4"] * f ** 2
    G = pert.lip_sigma ** Lm * DT ** Lm * (1 + dT) ** Lm
    U["Q3"] = max(G, G ** T)
    U["U_Ct3"] = (d + Wmax) / d ** 2 * U["Q3"] * (1 + G) ** (T + 2) * f
    Ql = [G ** l * (1 + G) ** l * f for l in range(T + 1)]
    U["Q_l"] = Ql
    U_c5, U_ct2, U_ct4 = [], [], []
    for l in range(T):  # entries for layer l+1
        H, F = pert.hidden_h[l], pert.hidden_f[l]
        c5 = Ql[l] * max(1.0, W / d * (sqrt(H) * amp_m * sT + 1.0) * L_P)
        U_c5.append(c5)
        U_ct2.append(sqrt(H) * amp_m * L_P ** (l + 2) * (1 + L_P) ** l * W * f / d)
        U_ct4.append(sqrt(F) * amp_m * L_P * c5)
    U_ct3 = L_P * G * W / d
    U["U_C5"] = U_c5
    U["U_CT2"] = U_ct2
    U["U_CT3"] = U_ct3
    U["U_CT4"] = U_ct4
    U["Q4"] = fsum((U_ct2[l - 1] + U_ct4[l - 1]) * (1 + U_ct3) ** (T - l) for l in range(1, T + 1))

    B = max(1.0, cx ** (-D))
    w2max = max(inputs.w2_hat)
    core = sqrt(2 * rgm.L2_kernel) * Lf * (w2max + 2 * B * 1.1 * 27 ** (D / 4)) ** rgm.holder_alpha
    U["U_sqrt_delta_d"] = C * core
    budget = xi * inputs.source_risk * sqrt(inputs.lambda_r) / (C ** 1.5 * core)
    eta = (budget - U["U_GNN"]) * L_sig ** (-Lc) * lam_M ** (-Lc)
    U["eta"] = eta
    N, rho = inputs.N, inputs.rho
    rate = math.log(N) / N ** (1 / (D + 1))
    U["U_delta_n"] = rate * (U["Q1"] + U["Q2"] * math.log(2 / rho))
    grad = pert.c_grad_w * pert.grad_tau_inf
    U["U_delta_gamma_theta"] = L_P * U["Q3"] * grad * sT + U["U_Ct3"] * grad + Ql[T] * pert.n_p_tau

    conds = {}

    def _cond(name, lhs, rhs):
        slack = rhs - lhs
        conds[name] = {"lhs": lhs, "rhs": rhs, "pass": bool(lhs <= rhs),
                       "rel_slack": slack / abs(rhs) if rhs != 0 else (math.inf if slack > 0 else -math.inf)}

    _cond("classifier_perturbation", sM, budget / amp_cls)
    structural = eta <= 0
    if structural:
        for name in ("graph_size", "feature_extractor_perturbation", "rgm_deformation"):
            conds[name] = {"lhs": math.nan, "rhs": math.nan, "pass": False, "rel_slack": -math.inf}
    else:
        _cond("graph_size", rate, 0.25 * eta ** 2 / (U["Q1"] + U["Q2"] * math.log(2 / rho)))
        _cond("feature_extractor_perturbation", L_P * U["Q3"] * grad * sT + Ql[T] * pert.n_p_tau, 0.5 * eta)
        _cond("rgm_deformation", grad, (0.5 * eta - Ql[T] * pert.n_p_tau) / (L_P * sT * U["Q3"] + U["U_Ct3"]))

    m_cls = [int(v) for v in (inputs.m_per_class_source or [1])]
    m_tgt = [int(v) for v in (inputs.m_per_class_target or [1])]
    M = max((inputs.n_nodes_source or N) * max(m_cls), (inputs.n_nodes_target or N) * max(m_tgt))
    if D > 4:
        thr = math.log((1 + math.log(1 / rho) ** 0.25) / (0.1 * 27 ** (D / 4))) / math.log(D / 4)
        m_cond = {"M": M, "threshold": thr, "pass": bool(M >= thr), "vacuous": False}
    else:
        m_cond = {"M": M, "threshold": math.nan, "pass": None, "vacuous": True}
    binding = min(conds, key=lambda k: conds[k]["rel_slack"])
    return {"conditions": conds, "structural_failure": structural, "binding": binding,
            "M_condition": m_cond, "all_pass": all(c["pass"] for c in conds.values()), "constants": U}


# ---------------------------------------------------------------------------
# sweeps


SWEEP_FACTORS = ("ratio_cls", "ratio_mpnn", "L_W_inf", "W_inf", "d_min", "L_f", "f_inf", "D_X",
                 "L_mpnn", "T", "s", "C", "N", "delta_d", "lambda_r")


def _with_depth(inputs, T):
    mp, pt = inputs.mpnn, inputs.pert
    rep = lambda xs: [xs[0]] * T
    mpnn = MpnnRegularity(rep(mp.lip_phi), rep(mp.lip_psi), rep(mp.bias_phi), rep(mp.bias_psi))
    pert = replace(pt, theta_phi=[list(pt.theta_phi[0]) for _ in range(T)],
                   ratio_phi=[list(pt.ratio_phi[0]) for _ in range(T)],
                   theta_psi=[list(pt.theta_psi[0]) for _ in range(T)],
                   ratio_psi=[list(pt.ratio_psi[0]) for _ in range(T)],
                   hidden_h=rep(pt.hidden_h), hidden_f=rep(pt.hidden_f))
    return replace(inputs, mpnn=mpnn, pert=pert)


def apply_factor(inputs: BoundInputs, factor: str, value) -> BoundInputs:
    """Copy of ``inputs`` with one named factor set to ``value``."""
    x = copy.deepcopy(inputs)
    if factor == "ratio_cls":
        x.cls = replace(x.cls, delta_ratio=[float(value)] * x.cls.L)
    elif factor == "ratio_mpnn":
        x.pert = replace(x.pert, ratio_phi=[[float(value)] * len(r) for r in x.pert.ratio_phi],
                         ratio_psi=[[float(value)] * len(r) for r in x.pert.ratio_psi])
    elif factor == "L_W_inf":
        x.rgm = replace(x.rgm, lip_w_inf=float(value))
    elif factor == "W_inf":
        x.rgm = replace(x.rgm, w_inf=float(value), w_max=float(value))
    elif factor == "d_min":
        x.rgm = replace(x.rgm, d_min=float(value))
    elif factor == "L_f":
        x.rgm = replace(x.rgm, lip_f=float(value))
    elif factor == "f_inf":
        x.rgm = replace(x.rgm, f_inf=float(value))
    elif factor == "D_X":
        x.rgm = replace(x.rgm, d_x_cover=float(value))
    elif factor == "L_mpnn":
        x.mpnn = MpnnRegularity([float(value)] * x.mpnn.T, [float(value)] * x.mpnn.T,
                                x.mpnn.bias_phi, x.mpnn.bias_psi)
    elif factor == "T":
        x = _with_depth(x, int(value))
    elif factor == "s":
        dim = x.latent_dim or int(x.rgm.d_x_cover)
        w2 = gaussian_w2(np.zeros(dim), np.ones(dim), np.full(dim, float(value)), np.ones(dim))
        x.w2_hat = [w2] * x.class_count
        x.delta_d = None
    elif factor == "C":
        C = int(value)
        base = (x.w2_hat or [0.0])[0]
        x.class_count = C
        x.w2_hat = [base] * C
        x.m_per_class_source = [(x.m_per_class_source or [1])[0]] * C
        x.m_per_class_target = [(x.m_per_class_target or [1])[0]] * C
        x.delta_d = None
    elif factor == "N":
        x.N = int(value)
    elif factor == "delta_d":
        x.delta_d = float(value)
    elif factor == "lambda_r":
        x.lambda_r = float(value)
    else:
        raise InvalidArgument(f"unknown sweep factor {factor!r}; known: {', '.join(SWEEP_FACTORS)}")
    x.__post_init__()
    return x


def _log10(v):
    return math.log10(v) if v > 0 else -math.inf


def bound_sweep(inputs: BoundInputs, factor: str, grid: Sequence):
    """Re-evaluate the bound at every grid value; invalid points are flagged, not fatal."""
    if factor not in SWEEP_FACTORS:
        raise InvalidArgument(f"unknown sweep factor {factor!r}")
    rows = []
    for v in grid:
        row = {"factor": factor, "value": float(v), "log10_value": _log10(float(v))}
        try:
            rep = assemble_bound(apply_factor(inputs, factor, v))
        except (InvalidArgument, ConstraintViolation, ValueError, ZeroDivisionError, OverflowError) as exc:
            row.update(transfer_penalty=math.nan, eps_t_upper=math.nan, delta_n=math.nan,
                       delta_gamma_theta=math.nan, delta_d=math.nan, log10_penalty=math.nan,
                       log10_eps_t=math.nan, flag=f"invalid: {exc}")
        else:
            row.update(transfer_penalty=rep.transfer_penalty, eps_t_upper=rep.eps_t_upper,
                       delta_n=rep.delta_n, delta_gamma_theta=rep.delta_gamma_theta, delta_d=rep.delta_d,
                       log10_penalty=_log10(rep.transfer_penalty), log10_eps_t=_log10(rep.eps_t_upper),
                       flag="")
        rows.append(row)
    return rows


def max_curvature_point(x, y, log_x=False, log_y=False, unit_box=True):
    """Grid point with the largest curvature of the (optionally log) curve.

    Curvature kappa = |v''| / (1 + v'^2)^{3/2} from centred differences on the
    transformed coordinates. With ``unit_box`` both axes are first rescaled to
    [0, 1], i.e. curvature as seen on a plot of the sweep window. Endpoints are
    excluded. Returns (x at the maximum, curvature array).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise InvalidArgument("need matching x, y with at least 3 points")
    u = np.log10(x) if log_x else x.copy()
    v = np.log10(y) if log_y else y.copy()
    if unit_box:
        u = (u - u.min()) / (u.max() - u.min())
        span = v.max() - v.min()
        v = (v - v.min()) / span if span > 0 else v * 0.0
    d1 = np.gradient(v, u)
    d2 = np.gradient(d1, u)
    kappa = np.abs(d2) / (1.0 + d1 ** 2) ** 1.5
    kappa[0] = kappa[-1] = -np.inf
    i = int(np.argmax(kappa))
    return float(x[i]), kappa


def elbow_readouts(x, y):
    """Elbow of a sweep curve read on linear axes and on log10-log10 axes."""
    lin, _ = max_curvature_point(x, y, log_x=False, log_y=False)
    loglog = None  # undefined when either axis touches zero
    if np.all(np.asarray(x, dtype=float) > 0) and np.all(np.asarray(y, dtype=float) > 0):
        loglog, _ = max_curvature_point(x, y, log_x=True, log_y=True)
    return {"linear": lin, "log10": loglog}
