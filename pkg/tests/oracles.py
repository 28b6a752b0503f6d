"""Straight-line reference formulas for the bound constants.

Everything here is written as explicit sums of products over layer indices,
with no recursion and no shared helpers from the package, so it serves as an
independent check of ``rgmshift.bound``. Layer lists are 1-based via a
leading ``None`` pad. Empty products are 1, empty sums 0.
"""
import math


def _pad(xs):
    return [None] + list(xs)


def _prod(vals):
    out = 1.0
    for v in vals:
        out *= v
    return out


def classifier(lip_sigma, sv_max, delta_ratio, alpha, beta, kappa):
    L = len(sv_max)
    L_NN = _prod(lip_sigma[k] * sv_max[k] for k in range(L))
    G_NN = (beta / alpha * kappa ** 2) ** L * (_prod(1 + delta_ratio[k] for k in range(L)) - 1)
    return L_NN, G_NN


def layer(lip_phi, lip_psi, b_phi, b_psi, W, d, LW):
    T = len(lip_phi)
    LP, LS, BP, BS = _pad(lip_phi), _pad(lip_psi), _pad(b_phi), _pad(b_psi)

    def C1(l):
        return sum((LS[t] * BP[t] + BS[t]) * _prod(LS[k] * (1 + LP[k]) for k in range(t + 1, l + 1))
                   for t in range(1, l + 1))

    def C2(l):
        return _prod(LS[t] * (1 + LP[t]) for t in range(1, l + 1))

    def D1(l):
        return sum((LS[t] * LW / d * BP[t] + LS[t] * BP[t] * LW / d ** 2
                    + C1(t - 1) * (LS[t] * LP[t] * LW / d + LS[t] * LP[t] * W * LW / d ** 2))
                   * _prod(LS[k] * (1 + W / d * LP[k]) for k in range(t + 1, l + 1))
                   for t in range(1, l + 1))

    def D2(l):
        return sum(C2(t - 1) * (LS[t] * LP[t] * LW / d + LS[t] * LP[t] * W * LW / d ** 2)
                   * _prod(LS[k] * (1 + W / d * LP[k]) for k in range(t + 1, l + 1))
                   for t in range(1, l + 1))

    def D3(l):
        return 1 + W / d * LP[l] if l >= 1 else 1.0

    def A(l):
        return LS[l] * math.sqrt(1 + 8 * W ** 2 * LP[l] ** 2 / d ** 2)

    return {
        "C1": [C1(l) for l in range(T + 1)], "C2": [C2(l) for l in range(T + 1)],
        "D1": [D1(l) for l in range(T + 1)], "D2": [D2(l) for l in range(T + 1)],
        "D3": [D3(l) for l in range(T + 1)], "A": [math.nan] + [A(l) for l in range(1, T + 1)],
    }


def k_consts(lc, lip_phi, lip_psi, b_phi, W, d, LW, cx, D, N):
    T = len(lip_phi)
    LP, LS, BP = _pad(lip_phi), _pad(lip_psi), _pad(b_phi)
    C1, C2, D1, D3, A = lc["C1"], lc["C2"], lc["D1"], lc["D3"], lc["A"]

    def tail(l):
        return _prod(A[k] for k in range(l + 1, T + 1))

    cover = (math.sqrt(math.log(cx)) if cx > 1 else 0.0) + math.sqrt(D)
    sb = sum(LS[l] * (LP[l] * C1[l - 1] + BP[l]) * tail(l) for l in range(1, T + 1))
    sc = sum(LS[l] * LP[l] * C2[l - 1] * tail(l) for l in range(1, T + 1))
    return {
        "K1": 2 * LW * W * cover / d ** 2 * sb,
        "K2": 2 * (math.sqrt(2) * W + LW) * W / d ** 2 * sb,
        "K3": 2 * LW * cover * W / d ** 2 * sc,
        "K4": 2 * (math.sqrt(2) * W + LW) * W / (d ** 2 * math.sqrt(N)) * sc,
        "K5": 2 / d * sum(LS[l] * (2 * W * LP[l] * D1[l - 1] + LW * LP[l] * C1[l - 1] + LW * BP[l]) * tail(l)
                          for l in range(1, T + 1)),
        "K6": 2 / d * sum(LS[l] * (W * LP[l] * C1[l - 1] + LW * LP[l] * C2[l - 1]) * tail(l)
                          for l in range(1, T + 1)),
        "K7": 2 * W / d * sum(LS[l] * LP[l] * D3[l - 1] * tail(l) for l in range(1, T + 1)),
        "K8": cx * W / (math.sqrt(2) * d) * sb,
        "K9": cx * W / (math.sqrt(2) * d) * sc,
    }


def rst(K, lc, cx, D, Lf):
    lg = math.log(cx)
    C1, C2, D1, D3 = lc["C1"][-1], lc["C2"][-1], lc["D1"][-1], lc["D3"][-1]
    fr = D / (2 * (D + 1))
    return {
        "R1": 14 * K["K1"] ** 2, "R2": 14 * K["K2"] ** 2, "R3": 14 * K["K3"] ** 2, "R4": 14 * K["K4"] ** 2,
        "S1": 14 * K["K5"] ** 2 + 14 * K["K8"] ** 2 * lg + 56 * D1 ** 2 + 7 * cx ** 2 * C1 ** 2 * lg,
        "S2": 14 * K["K6"] ** 2 + 14 * K["K9"] ** 2 * lg + 56 * D3 ** 2 + 7 * cx ** 2 * C2 ** 2 * lg,
        "S3": 14 * K["K7"] ** 2 + 56 * D3 ** 2 * Lf ** 2,
        "S4": 14 * K["K8"] ** 2 + 7 * cx ** 2 * C1 ** 2,
        "S5": 14 * K["K9"] ** 2 + 7 * cx ** 2 * C2 ** 2,
        "T1": (14 * K["K8"] ** 2 + 7 * cx ** 2 * C1 ** 2) * fr,
        "T2": (14 * K["K9"] ** 2 + 7 * cx ** 2 * C2 ** 2) * fr,
    }


def delta_n(N, rho, r, f, Lf, D):
    root = N ** (1 / (D + 1))
    return ((r["R1"] + r["R2"] * f ** 2) / N
            + (r["S1"] + r["S2"] * f ** 2 + r["S3"] * Lf ** 2 + (r["T1"] + r["T2"] * f ** 2) * math.log(N)) / root
            + ((r["R3"] + r["R4"] * f ** 2) / N + (r["S4"] + r["S5"] * f ** 2) / root) * math.log(2 / rho))


def perturb(theta_phi, ratio_phi, theta_psi, ratio_psi, H, F, lip_sigma, alpha, beta, kappa,
            lip_phi, lip_psi, b_phi, b_psi, lc, W, d, Wmax, f, c_grad_w, grad_tau, n_p_tau):
    """Weight-perturbation constants and the construction-stability total."""
    T = len(lip_phi)
    LP, LS, BP, BS = _pad(lip_phi), _pad(lip_psi), _pad(b_phi), _pad(b_psi)
    C1, C2 = lc["C1"], lc["C2"]

    def amp(L):
        return (beta / alpha * kappa ** 2) ** L

    dphi = [None] + [math.sqrt(H[t]) * amp(len(ratio_phi[t])) * (_prod(1 + r for r in ratio_phi[t]) - 1)
                     for t in range(T)]
    dpsi = [None] + [math.sqrt(F[t]) * amp(len(ratio_psi[t])) * (_prod(1 + r for r in ratio_psi[t]) - 1)
                     for t in range(T)]
    # perturbed Lipschitz constant: product of (|dTheta| + |Theta|) with |dTheta| = ratio * |Theta|
    ltphi = [0.0] + [lip_sigma ** len(theta_phi[t]) * _prod(r * th + th for r, th in zip(ratio_phi[t], theta_phi[t]))
                     for t in range(T)]
    ltpsi = [0.0] + [lip_sigma ** len(theta_psi[t]) * _prod(r * th + th for r, th in zip(ratio_psi[t], theta_psi[t]))
                     for t in range(T)]
    dtphi = [None] + [(dphi[t] + 1) * BP[t] for t in range(1, T + 1)]
    dtpsi = [None] + [(dpsi[t] + 1) * BS[t] for t in range(1, T + 1)]

    def ct1(l):
        return sum((ltpsi[t] * dtphi[t] + dtpsi[t]) * _prod(ltpsi[k] * (1 + ltphi[k]) for k in range(t + 1, l + 1))
                   for t in range(1, l + 1))

    def ct2(l):
        return _prod(ltpsi[t] * (1 + ltphi[t]) for t in range(1, l + 1))

    def c_phi(l):
        return LP[l] * (C1[l - 1] + C2[l - 1] * f) + BP[l]

    def ct_phi(l):
        return LP[l] * (ct1(l - 1) + ct2(l - 1) * f) + BP[l]

    def ct5(l):
        if l == 0:
            return f
        return max(ct1(l) + ct2(l) * f, W / d * (dphi[l] + 1) * ct_phi(l))

    def c_t2(l):
        return LS[l] * dphi[l] * c_phi(l) * W / d

    def c_t3(l):
        return LS[l] * ltphi[l - 1] * W / d

    def c_t4(l):
        return dpsi[l] * LS[l] * ct5(l - 1) + dpsi[l] * BS[l]

    ct3 = (1 / d + Wmax / d ** 2) * sum(ltpsi[l] * (ltphi[l] * (ct1(l - 1) + ct2(l - 1) * f) + dtphi[l])
                                         for l in range(1, T + 1))
    weight = sum((c_t2(l) + c_t4(l)) * _prod(LS[k] + c_t3(k) for k in range(l + 1, T + 1)) for l in range(1, T + 1))
    mixed = ct3 * c_grad_w * grad_tau
    deform = (ct1(T) + ct2(T) * f) * n_p_tau
    return {
        "delta_phi": dphi[1:], "delta_psi": dpsi[1:], "lt_phi": ltphi, "lt_psi": ltpsi,
        "ct1": [ct1(l) for l in range(T + 1)], "ct2": [ct2(l) for l in range(T + 1)],
        "c_phi": [c_phi(l) for l in range(1, T + 1)], "ct_phi": [ct_phi(l) for l in range(1, T + 1)],
        "ct5": [ct5(l) for l in range(T + 1)], "c_t2": [c_t2(l) for l in range(1, T + 1)],
        "c_t3": [c_t3(l) for l in range(1, T + 1)], "c_t4": [c_t4(l) for l in range(1, T + 1)],
        "ct3": ct3, "weight_change": weight, "mixed": mixed, "rgm_deformation": deform,
        "total": weight + mixed + deform,
    }


def penalty(C, delta_d, lambda_r, L_NN, G_NN, dn, dgt, delta_opt, eps3, eps4):
    xi = math.sqrt(dn) + dgt + delta_opt + eps3 + eps4
    return math.sqrt(C * delta_d / lambda_r) * (L_NN * xi + G_NN)
