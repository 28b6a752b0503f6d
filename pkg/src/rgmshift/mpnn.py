"""Mean-aggregation MPNN with an MLP classifier, trained by hand-written backprop.

Weights are stored as (out, in) matrices. Every matrix has a string key:
``phi{t}.{k}`` and ``psi{t}.{k}`` for sublayer k of the message / update MLP of
MPNN layer t (t from 1), ``cls.{k}`` for the classifier. The logical layer order
used by the regularizers and norm products is: phi1, psi1, phi2, psi2, ..., cls.
Biases never enter norms or penalties.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (DegenerateGraph, InvalidArgument, NumericError, TrainingFailure,
                          check_nonneg, check_positive, check_positive_int, make_rng)
from .rgm import Graph, RgmSpec, sample_graph

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")


def _act(name, slope, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.maximum(x, slope * x) if slope <= 1 else np.minimum(x, slope * x)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name, slope, pre, out):
    if name == "relu":
        return (pre > 0).astype(float)
    if name == "leaky_relu":
        g = (pre > 0).astype(float)
        g *= 1.0 - slope
        g += slope
        return g
    if name == "tanh":
        return 1.0 - out ** 2
    return np.ones_like(pre)


@dataclass
class Mlp:
    """Dense layers x -> act(W x + b); the last layer skips the activation unless ``act_last``."""
    weights: list
    biases: list = None
    activation: str = "leaky_relu"
    slope: float = 0.1
    act_last: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        if not self.weights:
            raise InvalidArgument("an MLP needs at least one layer")
        if self.biases is None:
            self.biases = [np.zeros(W.shape[0]) for W in self.weights]
        self.biases = [None if b is None else np.asarray(b, dtype=float) for b in self.biases]
        for l in range(1, len(self.weights)):
            if self.weights[l].shape[1] != self.weights[l - 1].shape[0]:
                raise InvalidArgument(f"layer {l} input dim does not chain")
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or (b is not None and b.shape != (W.shape[0],)):
                raise InvalidArgument("bad weight or bias shape")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def depth(self):
        return len(self.weights)

    def _layer_act(self, l):
        last = l == len(self.weights) - 1
        return "identity" if last and not self.act_last else self.activation

    @property
    def nonlinearity_bounds(self):
        """(alpha_act, beta_act, lip_sigma) of the activation."""
        if self.activation == "leaky_relu":
            return min(self.slope, 1.0), max(self.slope, 1.0), max(self.slope, 1.0)
        if self.activation == "identity":
            return 1.0, 1.0, 1.0
        return 0.0, 1.0, 1.0

    def forward(self, x, start=0, cache=None):
        h = np.asarray(x, dtype=float)
        for l in range(start, len(self.weights)):
            W, b = self.weights[l], self.biases[l]
            pre = h @ W.T
            if b is not None:
                pre = pre + b
            out = _act(self._layer_act(l), self.slope, pre)
            if cache is not None:
                cache.append((h, pre, out))
            h = out
        return h

    def backward(self, cache, g, start=0):
        """Gradients for layers start.. given cached activations; returns (dW, db, g_in)."""
        n_layers = len(self.weights)
        dW = [None] * n_layers
        db = [None] * n_layers
        for l in range(n_layers - 1, start - 1, -1):
            h, pre, out = cache[l - start]
            gp = g * _act_grad(self._layer_act(l), self.slope, pre, out)
            flat_g = gp.reshape(-1, gp.shape[-1])
            flat_h = h.reshape(-1, h.shape[-1])
            dW[l] = flat_g.T @ flat_h
            db[l] = flat_g.sum(axis=0) if self.biases[l] is not None else None
            g = gp @ self.weights[l]
        return dW, db, g


def mlp_forward(mlp: Mlp, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.in_dim:
        raise InvalidArgument(f"input dim {x.shape[-1]} != {mlp.in_dim}")
    return mlp.forward(x)


def spectral_norm(W, iters=200, seed=0):
    """Largest singular value by power iteration on W^T W."""
    W = np.asarray(W, dtype=float)
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = W @ v
        s_new = np.linalg.norm(u)
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
        if abs(s_new - s) <= 1e-15 * max(s_new, 1.0):
            s = s_new
            break
        s = s_new
    return float(np.linalg.norm(W @ v))


def mlp_lipschitz_upper(mlp: Mlp, proxy="power"):
    """Product of activation Lipschitz constants and per-layer weight norms."""
    if proxy not in ("power", "frobenius"):
        raise InvalidArgument("proxy must be 'power' or 'frobenius'")
    lip_sigma = mlp.nonlinearity_bounds[2]
    out = 1.0
    for l, W in enumerate(mlp.weights):
        s = spectral_norm(W) if proxy == "power" else float(np.linalg.norm(W))
        out *= (1.0 if mlp._layer_act(l) == "identity" else lip_sigma) * s
    return out


# ---------------------------------------------------------------------------
# MPNN model


@dataclass
class MpnnModel:
    phis: list
    psis: list
    cls: Mlp
    output_scaling: bool = True

    def __post_init__(self):
        if len(self.phis) != len(self.psis):
            raise InvalidArgument("need one message and one update MLP per layer")
        for t, (phi, psi) in enumerate(zip(self.phis, self.psis), start=1):
            F = phi.in_dim // 2
            if phi.in_dim != 2 * F:
                raise InvalidArgument(f"message MLP {t} input must be 2*F")
            if psi.in_dim != F + phi.out_dim:
                raise InvalidArgument(f"update MLP {t} input must be F + H")
            if t < len(self.phis) and self.phis[t].in_dim != 2 * psi.out_dim:
                raise InvalidArgument(f"layer {t + 1} input does not chain")
        if self.cls.in_dim != self.out_dim_features:
            raise InvalidArgument("classifier input must equal final feature dim")

    @property
    def T(self):
        return len(self.phis)

    @property
    def in_dim(self):
        return self.phis[0].in_dim // 2 if self.phis else self.cls.in_dim

    @property
    def out_dim_features(self):
        return self.psis[-1].out_dim if self.psis else self.cls.in_dim

    @property
    def n_classes(self):
        return self.cls.out_dim

    def blocks(self):
        """(prefix, mlp) pairs in logical order."""
        out = []
        for t in range(self.T):
            out.append((f"phi{t + 1}", self.phis[t]))
            out.append((f"psi{t + 1}", self.psis[t]))
        out.append(("cls", self.cls))
        return out

    def matrix_keys(self):
        return [f"{p}.{k}" for p, m in self.blocks() for k in range(m.depth)]

    def _locate(self, key):
        prefix, _, k = key.partition(".")
        for p, m in self.blocks():
            if p == prefix and k.isdigit() and int(k) < m.depth:
                return m, int(k)
        raise InvalidArgument(f"no weight matrix {key!r}")

    def get_matrix(self, key):
        m, k = self._locate(key)
        return m.weights[k]

    def set_matrix(self, key, W):
        m, k = self._locate(key)
        W = np.asarray(W, dtype=float)
        if W.shape != m.weights[k].shape:
            raise InvalidArgument(f"shape mismatch for {key}")
        m.weights[k] = W

    def copy(self):
        return copy.deepcopy(self)

    # serialization -----------------------------------------------------
    def to_dict(self):
        def mlp_d(m):
            return {"weights": [W.tolist() for W in m.weights],
                    "biases": [None if b is None else b.tolist() for b in m.biases],
                    "activation": m.activation, "slope": m.slope, "act_last": m.act_last}
        d = {"phis": [mlp_d(m) for m in self.phis], "psis": [mlp_d(m) for m in self.psis],
             "cls": mlp_d(self.cls), "output_scaling": self.output_scaling}
        d["shapes"] = {k: list(self.get_matrix(k).shape) for k in self.matrix_keys()}
        return d

    @classmethod
    def from_dict(cls, d):
        mk = lambda m: Mlp(**m)
        return cls([mk(m) for m in d["phis"]], [mk(m) for m in d["psis"]], mk(d["cls"]),
                   bool(d.get("output_scaling", True)))


def init_model(in_dim, hidden=16, depth=3, n_classes=2, mlp_layers=1, seed=0, activation="leaky_relu",
               slope=0.1, output_scaling=True, cls_layers=2):
    """Glorot-normal initialised model with ``depth`` message/update pairs of width ``hidden``."""
    in_dim = check_positive_int(in_dim, "in_dim")
    hidden = check_positive_int(hidden, "hidden")
    depth = check_positive_int(depth, "depth", minimum=0)
    rng = make_rng(seed)

    def dense(dims, act_last):
        Ws = [rng.standard_normal((o, i)) * math.sqrt(2.0 / (i + o)) for i, o in zip(dims[:-1], dims[1:])]
        return Mlp(Ws, [np.zeros(o) for o in dims[1:]], activation, slope, act_last)

    phis, psis = [], []
    F = in_dim
    for _ in range(depth):
        phis.append(dense([2 * F] + [hidden] * mlp_layers, True))
        psis.append(dense([F + hidden] + [hidden] * mlp_layers, True))
        F = hidden
    cls = dense([F] + [hidden] * (cls_layers - 1) + [n_classes], False)
    return MpnnModel(phis, psis, cls, output_scaling)


# ---------------------------------------------------------------------------
# forward


def _normalized_adjacency(graph):
    A = graph.adjacency
    deg = A.sum(axis=1)
    if np.any(deg <= 0):
        raise DegenerateGraph("zero row degree: mean aggregation undefined")
    return A / deg[:, None]


def _check_finite(x, layer):
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite activation", layer)


def _phi_pairs(phi: Mlp, Z, cache=None):
    """Message MLP on all ordered pairs (z_i, z_j) with the first layer split."""
    F = Z.shape[1]
    W = phi.weights[0]
    a = Z @ W[:, :F].T
    b = Z @ W[:, F:].T
    pre = a[:, None, :] + b[None, :, :]
    if phi.biases[0] is not None:
        pre = pre + phi.biases[0]
    out = _act(phi._layer_act(0), phi.slope, pre)
    if cache is not None:
        cache.append((Z, pre, out))
    return phi.forward(out, start=1, cache=cache)


def mean_aggregate(graph: Graph, phi: Mlp, features=None):
    """m_i = sum_j a_ij / (sum_k a_ik) * phi(z_i, z_j)."""
    Z = graph.signals if features is None else np.asarray(features, dtype=float)
    if Z.shape[0] != graph.n or phi.in_dim != 2 * Z.shape[1]:
        raise InvalidArgument("feature shape does not match graph or message MLP")
    An = _normalized_adjacency(graph)
    return _aggregate(An, _phi_pairs(phi, Z))


def _aggregate(An, P):
    """sum_j An[i, j] P[i, j, :] as a batched matrix product."""
    return np.matmul(An[:, None, :], P)[:, 0, :]


def _mean_aggregate_chunked(An, phi, Z, chunk):
    out = np.empty((Z.shape[0], phi.out_dim))
    F = Z.shape[1]
    W = phi.weights[0]
    a = Z @ W[:, :F].T
    b = Z @ W[:, F:].T
    bias = 0.0 if phi.biases[0] is None else phi.biases[0]
    for s in range(0, Z.shape[0], chunk):
        pre = a[s:s + chunk, None, :] + b[None, :, :] + bias
        h = phi.forward(_act(phi._layer_act(0), phi.slope, pre), start=1)
        out[s:s + chunk] = _aggregate(An[s:s + chunk], h)
    return out


def node_features(model: MpnnModel, graph: Graph, chunk=None):
    """Final node states z^(T); ``chunk`` bounds memory for large graphs."""
    Z = graph.signals
    if Z.shape[1] != model.in_dim:
        raise InvalidArgument(f"signals have {Z.shape[1]} columns, model expects {model.in_dim}")
    An = _normalized_adjacency(graph)
    for t in range(model.T):
        if chunk:
            M = _mean_aggregate_chunked(An, model.phis[t], Z, chunk)
        else:
            M = _aggregate(An, _phi_pairs(model.phis[t], Z))
        _check_finite(M, f"phi{t + 1}")
        Z = model.psis[t].forward(np.concatenate([Z, M], axis=1))
        _check_finite(Z, f"psi{t + 1}")
    return Z


def mpnn_forward(model: MpnnModel, graph: Graph, chunk=None):
    """Graph embedding: mean of the final node states."""
    return node_features(model, graph, chunk).mean(axis=0)


def _scale(s):
    nrm = float(np.linalg.norm(s))
    return s / max(1.0, nrm)


def classify(model: MpnnModel, embedding):
    emb = np.asarray(embedding, dtype=float)
    if emb.shape[-1] != model.cls.in_dim:
        raise InvalidArgument("embedding dim does not match classifier")
    s = model.cls.forward(emb)
    if model.output_scaling:
        if s.ndim == 1:
            return _scale(s)
        return s / np.maximum(1.0, np.linalg.norm(s, axis=-1, keepdims=True))
    return s


def predict_scores(model: MpnnModel, graphs):
    return np.stack([classify(model, mpnn_forward(model, g)) for g in graphs])


def cmpnn_forward_mc(model: MpnnModel, rgm: RgmSpec, mc_samples=1000, seed=None, n_batches=4, chunk=None):
    """Continuous-model embedding estimated on one large sampled graph.

    The standard error comes from splitting the node states into ``n_batches``
    groups and comparing the group means.
    """
    mc_samples = check_positive_int(mc_samples, "mc_samples", minimum=max(2, n_batches))
    g = sample_graph(rgm, mc_samples, False, seed)
    if chunk is None:
        chunk = max(1, int(4e6 // (mc_samples * max(m.out_dim for m in model.phis) if model.phis else 1)))
    Zt = node_features(model, g, chunk=chunk)
    est = Zt.mean(axis=0)
    parts = np.array_split(Zt, n_batches)
    means = np.stack([p.mean(axis=0) for p in parts])
    stderr = means.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return est, stderr


# ---------------------------------------------------------------------------
# regularizers


REG_SCHEMES = ("none", "l2", "front", "back", "fixed_budget")


def reg_coefficients(scheme, param, L, direction="front"):
    """Per-logical-layer penalty weights c_l for l = 1..L."""
    L = check_positive_int(L, "L")
    if scheme in ("none",):
        return np.zeros(L)
    if scheme == "l2":
        return np.ones(L)
    if param is None or not param > 0:
        raise InvalidArgument("regularizer parameter must be > 0")
    l = np.arange(1, L + 1, dtype=float)
    if scheme == "front" or (scheme == "fixed_budget" and direction == "front"):
        c = float(param) ** (-(l - 1.0))
    elif scheme == "back" or (scheme == "fixed_budget" and direction == "back"):
        c = float(param) ** (l - L)
    else:
        raise InvalidArgument(f"unknown regularizer {scheme!r} / direction {direction!r}")
    if scheme == "fixed_budget":
        c = L * c / math.fsum(c)
    return c


def reg_penalty(model: MpnnModel, scheme, lam, param=None, direction="front"):
    keys = model.matrix_keys()
    c = reg_coefficients(scheme, param, len(keys), direction)
    return lam * math.fsum(ci * float(np.sum(model.get_matrix(k) ** 2)) for ci, k in zip(c, keys))


# ---------------------------------------------------------------------------
# loss and gradients


@dataclass
class TrainConfig:
    loss: str = "cross_entropy"
    reg: str = "none"
    reg_lambda: float = 0.0
    reg_param: float = None
    reg_direction: str = "front"
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 200
    patience: int = 50
    batch: int = 4
    seed: int = 0
    val_frac: float = 0.2
    lr_factor: float = 0.5
    lr_patience: int = 20
    min_lr: float = 1e-4

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "l1_risk"):
            raise InvalidArgument(f"unknown loss {self.loss!r}")
        if self.reg not in REG_SCHEMES:
            raise InvalidArgument(f"unknown regularizer {self.reg!r}")
        check_nonneg(self.reg_lambda, "reg_lambda")
        check_positive(self.lr, "lr")
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch, "batch")
        check_positive_int(self.patience, "patience")
        if self.patience > self.epochs:
            raise InvalidArgument("patience must be <= epochs")
        if self.reg in ("front", "back", "fixed_budget") and not (self.reg_param and self.reg_param > 0):
            raise InvalidArgument("front/back/fixed_budget need reg_param > 0")
        if not 0 <= self.val_frac < 1:
            raise InvalidArgument("val_frac must lie in [0, 1)")


def _loss_terms(scores, label, loss):
    """Per-graph loss and its gradient with respect to the (scaled) scores."""
    if loss == "cross_entropy":
        z = scores - scores.max()
        p = np.exp(z)
        p /= p.sum()
        g = p.copy()
        g[label] -= 1.0
        return float(-z[label] + math.log(np.exp(z).sum())), g
    y = np.zeros_like(scores)
    y[label] = 1.0
    diff = scores - y
    return float(np.abs(diff).sum()), np.sign(diff)


def _graph_backward(model: MpnnModel, graph: Graph, loss, grads):
    """Forward and reverse pass on one graph, accumulating into ``grads``."""
    An = _normalized_adjacency(graph)
    Z = graph.signals
    if Z.shape[1] != model.in_dim:
        raise InvalidArgument("signals do not match model input dim")
    layer_caches = []
    for t in range(model.T):
        phi_cache = []
        P = _phi_pairs(model.phis[t], Z, phi_cache)
        M = _aggregate(An, P)
        _check_finite(M, f"phi{t + 1}")
        psi_cache = []
        Znew = model.psis[t].forward(np.concatenate([Z, M], axis=1), cache=psi_cache)
        _check_finite(Znew, f"psi{t + 1}")
        layer_caches.append((Z, phi_cache, psi_cache))
        Z = Znew
    emb = Z.mean(axis=0)
    cls_cache = []
    s = model.cls.forward(emb, cache=cls_cache)
    _check_finite(s, "cls")
    if model.output_scaling:
        nrm = float(np.linalg.norm(s))
        out = s / max(1.0, nrm)
    else:
        out = s
    val, g = _loss_terms(out, graph.label, loss)
    if model.output_scaling and nrm > 1.0:
        u = s / nrm
        g = (g - u * float(u @ g)) / nrm
    dW, db, g_emb = model.cls.backward(cls_cache, g)
    _accumulate(grads, "cls", dW, db)
    gZ = np.broadcast_to(g_emb / graph.n, Z.shape).copy()
    for t in range(model.T - 1, -1, -1):
        Zin, phi_cache, psi_cache = layer_caches[t]
        phi, psi = model.phis[t], model.psis[t]
        dW, db, g_in = psi.backward(psi_cache, gZ)
        _accumulate(grads, f"psi{t + 1}", dW, db)
        F = Zin.shape[1]
        gZin = g_in[:, :F].copy()
        gM = g_in[:, F:]
        gP = An[:, :, None] * gM[:, None, :]
        dW, db, g_h1 = phi.backward(phi_cache[1:], gP, start=1) if phi.depth > 1 else ([None], [None], gP)
        Zc, pre1, out1 = phi_cache[0]
        gp1 = g_h1 * _act_grad(phi._layer_act(0), phi.slope, pre1, out1)
        row = gp1.sum(axis=1)
        col = gp1.sum(axis=0)
        W0 = phi.weights[0]
        dW = list(dW)
        db = list(db)
        dW[0] = np.concatenate([row.T @ Zc, col.T @ Zc], axis=1)
        db[0] = gp1.sum(axis=(0, 1)) if phi.biases[0] is not None else None
        _accumulate(grads, f"phi{t + 1}", dW, db)
        gZ = gZin + row @ W0[:, :F] + col @ W0[:, F:]
    return val


def _accumulate(grads, prefix, dW, db):
    for k, (w, b) in enumerate(zip(dW, db)):
        if w is None:
            continue
        key = f"{prefix}.{k}"
        grads["W"][key] = grads["W"].get(key, 0.0) + w
        if b is not None:
            grads["b"][key] = grads["b"].get(key, 0.0) + b


def loss_and_grad(model: MpnnModel, batch, config: TrainConfig):
    """Mean batch loss plus penalty, with gradients {"W": {key: array}, "b": {key: array}}."""
    batch = list(batch)
    if not batch:
        raise InvalidArgument("empty batch")
    grads = {"W": {}, "b": {}}
    vals = [_graph_backward(model, g, config.loss, grads) for g in batch]
    m = len(batch)
    for part in ("W", "b"):
        for k in grads[part]:
            grads[part][k] = grads[part][k] / m
    loss = math.fsum(vals) / m
    if config.reg != "none" and config.reg_lambda > 0:
        keys = model.matrix_keys()
        c = reg_coefficients(config.reg, config.reg_param, len(keys), config.reg_direction)
        pen = []
        for ci, k in zip(c, keys):
            W = model.get_matrix(k)
            pen.append(ci * float(np.sum(W ** 2)))
            grads["W"][k] = grads["W"][k] + 2.0 * config.reg_lambda * ci * W
        loss += config.reg_lambda * math.fsum(pen)
    return loss, grads


def evaluate(model: MpnnModel, graphs, loss="cross_entropy"):
    """(mean loss, accuracy) without penalty."""
    vals, hits = [], 0
    for g in graphs:
        out = classify(model, mpnn_forward(model, g))
        vals.append(_loss_terms(out, g.label, loss)[0])
        hits += int(np.argmax(out) == g.label)
    return math.fsum(vals) / len(vals), hits / len(vals)


# ---------------------------------------------------------------------------
# training


def _params(model):
    out = []
    for prefix, m in model.blocks():
        for k in range(m.depth):
            out.append((f"{prefix}.{k}", m, k))
    return out


def split_indices(n, val_frac, rng, labels=None):
    """Stratified shuffle split; every class keeps at least one training graph."""
    if labels is None:
        idx = rng.permutation(n)
        n_val = int(round(val_frac * n))
        return np.sort(idx[n_val:]), np.sort(idx[:n_val])
    labels = np.asarray(labels)
    tr, va = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = min(int(round(val_frac * len(idx))), len(idx) - 1)
        va.extend(idx[:n_val])
        tr.extend(idx[n_val:])
    return np.sort(np.array(tr, dtype=int)), np.sort(np.array(va, dtype=int))


def train(model: MpnnModel, dataset, config: TrainConfig, monitor=None):
    """SGD with momentum, plateau learning-rate halving and early stopping.

    ``monitor(model) -> float`` is called after every epoch and logged as
    ``"monitor"``; it never affects model selection.
    Returns a trained copy and the per-epoch history (list of dicts).
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidArgument("empty dataset")
    if max(g.label for g in dataset) >= model.n_classes:
        raise InvalidArgument("labels exceed classifier output dim")
    model = model.copy()
    rng = make_rng(config.seed)
    tr_idx, va_idx = split_indices(len(dataset), config.val_frac, rng, [g.label for g in dataset])
    train_set = [dataset[i] for i in tr_idx]
    val_set = [dataset[i] for i in va_idx] or train_set
    params = _params(model)
    vel_W = {k: np.zeros_like(m.weights[i]) for k, m, i in params}
    vel_b = {k: np.zeros_like(m.biases[i]) for k, m, i in params if m.biases[i] is not None}
    lr = config.lr
    history = []
    best_score, best_model, since_best = None, model.copy(), 0
    plateau_best, since_plateau = math.inf, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        batch_losses = []
        for s in range(0, len(order), config.batch):
            batch = [train_set[i] for i in order[s:s + config.batch]]
            try:
                loss, grads = loss_and_grad(model, batch, config)
            except NumericError as exc:
                raise TrainingFailure(f"diverged at epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingFailure(f"loss became non-finite at epoch {epoch}")
            batch_losses.append(loss * len(batch))
            for k, m, i in params:
                vel_W[k] = config.momentum * vel_W[k] - lr * grads["W"][k]
                m.weights[i] = m.weights[i] + vel_W[k]
                if k in vel_b:
                    vel_b[k] = config.momentum * vel_b[k] - lr * grads["b"][k]
                    m.biases[i] = m.biases[i] + vel_b[k]
        train_loss = math.fsum(batch_losses) / len(train_set)
        try:
            val_loss, val_acc = evaluate(model, val_set, config.loss)
        except NumericError as exc:
            raise TrainingFailure(f"diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(val_loss):
            raise TrainingFailure(f"validation loss non-finite at epoch {epoch}")
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_acc": val_acc, "lr": lr}
        if monitor is not None:
            rec["monitor"] = float(monitor(model))
        history.append(rec)
        score = (val_acc, -val_loss) if config.loss == "cross_entropy" else (-val_loss,)
        if best_score is None or score > best_score:
            best_score, best_model, since_best = score, model.copy(), 0
        else:
            since_best += 1
        if val_loss < plateau_best - 1e-12:
            plateau_best, since_plateau = val_loss, 0
        else:
            since_plateau += 1
            if since_plateau >= config.lr_patience and lr > config.min_lr:
                lr = max(config.min_lr, lr * config.lr_factor)
                since_plateau = 0
        if since_best >= config.patience:
            break
    return best_model, history


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
    for h in history:
        w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_loss"])),
                    repr(float(h["val_acc"])), repr(float(h["lr"]))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# norms and perturbations


def layerwise_norms(model: MpnnModel):
    """Frobenius norms C_l per logical layer and downstream products P_l = prod_{j>=l} C_j."""
    keys = model.matrix_keys()
    C = np.array([float(np.linalg.norm(model.get_matrix(k))) for k in keys])
    P = np.cumprod(C[::-1])[::-1].copy()
    return {"keys": keys, "C": C, "P": P}


@dataclass
class PerturbationSpec:
    """Relative Frobenius perturbations per matrix key.

    Either ``ratios`` with random directions drawn from ``seed``, or explicit
    ``deltas``. After application ``applied`` holds the recomputed ratios.
    """
    ratios: dict = None
    deltas: dict = None
    seed: int = 0
    applied: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ratios is None and self.deltas is None:
            raise InvalidArgument("need ratios or deltas")
        for k, r in (self.ratios or {}).items():
            if r < 0:
                raise InvalidArgument(f"negative ratio for {k}")


def random_direction(shape, rng):
    d = rng.standard_normal(shape)
    return d / np.linalg.norm(d)


def perturb_weights(model: MpnnModel, spec: PerturbationSpec):
    """Return a perturbed copy W + Delta and the deltas used.

    The copy remembers the pre-perturbation matrices, so applying exactly the
    negated deltas afterwards restores the original bits instead of relying on
    floating-point cancellation.
    """
    new = model.copy()
    undo = dict(getattr(model, "_undo", {}))
    rng = make_rng(spec.seed)
    deltas = {}
    if spec.deltas is not None:
        deltas = {k: np.asarray(v, dtype=float) for k, v in spec.deltas.items()}
    else:
        for k in sorted(spec.ratios):
            W = model.get_matrix(k)
            nrm = float(np.linalg.norm(W))
            if nrm == 0:
                raise InvalidArgument(f"relative perturbation of zero matrix {k} is undefined")
            deltas[k] = spec.ratios[k] * nrm * random_direction(W.shape, rng)
    applied = {}
    for k, D in deltas.items():
        W = model.get_matrix(k)
        if D.shape != W.shape:
            raise InvalidArgument(f"delta shape mismatch for {k}")
        nrm = float(np.linalg.norm(W))
        if nrm == 0 and np.any(D):
            raise InvalidArgument(f"relative perturbation of zero matrix {k} is undefined")
        prev = undo.get(k)
        if prev is not None and np.array_equal(-D, prev[1]):
            new.set_matrix(k, prev[0])
            del undo[k]
        else:
            new.set_matrix(k, W + D)
            undo[k] = (W.copy(), D.copy())
        applied[k] = float(np.linalg.norm(D)) / nrm if nrm > 0 else 0.0
    new._undo = undo
    spec.applied = applied
    return new, deltas


def weight_perturbation_amplitude(ratios, alpha_act, beta_act, kappa):
    """(beta/alpha kappa^2)^L (prod(1 + r_k) - 1) for an L-layer MLP."""
    if alpha_act <= 0:
        raise InvalidArgument("alpha_act must be > 0")
    L = len(ratios)
    return (beta_act / alpha_act * kappa ** 2) ** L * (float(np.prod([1.0 + r for r in ratios])) - 1.0)


def condition_number(W):
    s = np.linalg.svd(np.asarray(W, dtype=float), compute_uv=False)
    return math.inf if s[-1] == 0 else float(s[0] / s[-1])


def perturbation_sensitivity(model: MpnnModel, dataset, layer, eps_list, n_dirs=8, seed=0,
                             loss="cross_entropy"):
    """Loss change when one matrix moves by eps * ||W||_F along random unit directions.

    The same directions are reused for every eps. The matrix is restored by
    reassignment after each probe.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidArgument("empty dataset")
    W0 = model.get_matrix(layer)
    nrm = float(np.linalg.norm(W0))
    if nrm == 0:
        raise InvalidArgument(f"layer {layer} has zero norm")
    probe = model.copy()
    base, _ = evaluate(probe, dataset, loss)
    rng = make_rng(seed)
    dirs = [random_direction(W0.shape, rng) for _ in range(check_positive_int(n_dirs, "n_dirs"))]
    rows = []
    for eps in eps_list:
        check_nonneg(eps, "eps")
        for j, d in enumerate(dirs):
            D = eps * nrm * d
            probe.set_matrix(layer, W0 + D)
            val, _ = evaluate(probe, dataset, loss)
            probe.set_matrix(layer, W0)
            rows.append({"eps": float(eps), "direction": j, "delta_loss": val - base,
                         "applied_norm": float(np.linalg.norm(D)), "target_norm": eps * nrm})
    summary = []
    for eps in eps_list:
        dl = np.array([r["delta_loss"] for r in rows if r["eps"] == float(eps)])
        summary.append({"eps": float(eps), "mean_abs": float(np.mean(np.abs(dl))),
                        "signed_mean": float(np.mean(dl)), "std": float(np.std(dl))})
    return {"layer": layer, "base_loss": base, "rows": rows, "summary": summary}


def config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(model: MpnnModel, path, config=None):
    d = model.to_dict()
    d["config_hash"] = config_hash(config or {})
    with open(path, "w") as fh:
        json.dump(d, fh, sort_keys=True)


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    d.pop("shapes", None)
    d.pop("config_hash", None)
    return MpnnModel.from_dict(d)


# ---------------------------------------------------------------------------
# estimator


def _check_graphs(X):
    if isinstance(X, Graph):
        X = [X]
    X = list(X)
    if not X or not all(isinstance(g, Graph) for g in X):
        raise InvalidArgument("expected a non-empty sequence of Graph objects")
    return X


class MpnnClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper: fit on graphs, predict labels, transform to embeddings."""

    def __init__(self, hidden=16, depth=3, mlp_layers=1, cls_layers=2, activation="leaky_relu", slope=0.1,
                 output_scaling=True, loss="cross_entropy", reg="none", reg_lambda=0.0, reg_param=None,
                 reg_direction="front", lr=0.05, momentum=0.9, epochs=200, patience=50, batch=4,
                 val_frac=0.2, seed=0):
        self.hidden = hidden
        self.depth = depth
        self.mlp_layers = mlp_layers
        self.cls_layers = cls_layers
        self.activation = activation
        self.slope = slope
        self.output_scaling = output_scaling
        self.loss = loss
        self.reg = reg
        self.reg_lambda = reg_lambda
        self.reg_param = reg_param
        self.reg_direction = reg_direction
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.patience = patience
        self.batch = batch
        self.val_frac = val_frac
        self.seed = seed

    def _config(self):
        return TrainConfig(loss=self.loss, reg=self.reg, reg_lambda=self.reg_lambda, reg_param=self.reg_param,
                           reg_direction=self.reg_direction, lr=self.lr, momentum=self.momentum,
                           epochs=self.epochs, patience=min(self.patience, self.epochs), batch=self.batch,
                           seed=self.seed, val_frac=self.val_frac)

    def fit(self, X, y=None):
        graphs = _check_graphs(X)
        if y is not None:
            y = np.asarray(y)
            if y.shape[0] != len(graphs):
                raise InvalidArgument("y length does not match number of graphs")
            graphs = [Graph(g.n, g.adjacency, g.signals, g.latents, int(lbl), g.binary) for g, lbl in zip(graphs, y)]
        labels = np.array([g.label for g in graphs])
        self.classes_ = np.arange(int(labels.max()) + 1)
        model = init_model(graphs[0].signals.shape[1], self.hidden, self.depth, len(self.classes_),
                           self.mlp_layers, self.seed, self.activation, self.slope, self.output_scaling,
                           self.cls_layers)
        self.model_, self.history_ = train(model, graphs, self._config())
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return predict_scores(self.model_, _check_graphs(X))

    def predict_proba(self, X):
        s = self.decision_function(X)
        z = np.exp(s - s.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return np.stack([mpnn_forward(self.model_, g) for g in _check_graphs(X)])
