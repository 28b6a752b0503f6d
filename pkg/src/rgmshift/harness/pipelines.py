"""Experiment pipelines behind the CLI.

Every pipeline takes a config dict, a seed list and an output directory, writes
CSV/JSON artifacts there and returns a JSON-safe summary. Outputs are
deterministic in (config, seeds): sorted JSON keys, repr floats, no timestamps.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import io as rio
from .._validation import InvalidArgument, RgmShiftError
from ..bound import (SWEEP_FACTORS, BoundInputs, apply_factor, assemble_bound, bound_sweep,
                     elbow_readouts, illustration_defaults)
from ..lsm import graph_representation, lsm_fit_joint, principal_align, subsample_positions
from ..mpnn import (MpnnModel, TrainConfig, evaluate, history_csv, init_model, layerwise_norms,
                    mpnn_forward, perturbation_sensitivity, reg_coefficients, save_checkpoint, train)
from ..rgm import FeatureMapSpec, KernelSpec, LatentSpec, RgmSpec, generate_dataset, induced_prefix
from ..spectral import dot_product_gram, rank_table_csv, spectrum_report, tail_fractions, wl_gram
from ..transport import PointCloud, classwise_latent_wd
from .stats import off_diagonal_pairs, pearson, spearman


class ConfigError(RgmShiftError):
    """Bad or missing configuration (CLI exit code 2)."""


class PipelineFailure(RgmShiftError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage, msg):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineFailure:
        raise
    except (RgmShiftError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise PipelineFailure(name, str(exc)) from exc


def _pmap(fn, items, workers):
    """Ordered map, threaded when more than one worker is allowed."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _get(cfg, key, default=None, kind=None):
    v = cfg.get(key, default)
    if kind is not None and v is not None:
        try:
            v = kind(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config field {key!r}: {exc}") from exc
    return v


def _train_config(cfg, seed):
    allowed = {f.name for f in fields(TrainConfig)}
    extra = set(cfg) - allowed
    if extra:
        raise ConfigError(f"unknown train fields: {sorted(extra)}")
    try:
        return TrainConfig(**{**cfg, "seed": int(seed)})
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(f"train config: {exc}") from exc


def _model_kw(cfg):
    allowed = ("hidden", "depth", "mlp_layers", "cls_layers", "activation", "slope", "output_scaling")
    extra = set(cfg) - set(allowed)
    if extra:
        raise ConfigError(f"unknown model fields: {sorted(extra)}")
    return dict(cfg)


def _seed_seq(*parts):
    return np.random.SeedSequence([int(p) for p in parts])


# ---------------------------------------------------------------------------
# model families


def _feature(cfg, dim):
    return FeatureMapSpec.from_dict(cfg) if cfg else FeatureMapSpec("zero_pad", out_dim=2 * dim)


def class_rgms_from_config(cfg, shift=0.0):
    """Class models from an explicit ``classes`` list or the Gaussian ``family`` shorthand.

    Family fields: means (list of vectors), var, kernels (one kernel dict per
    class or a single dict), feature (optional).
    """
    try:
        if "classes" in cfg:
            out = [RgmSpec.from_dict(c) for c in cfg["classes"]]
        else:
            fam = cfg["family"]
            means = [np.asarray(m, dtype=float) for m in fam["means"]]
            kern = fam["kernels"]
            kern = kern if isinstance(kern, list) else [kern] * len(means)
            if len(kern) != len(means):
                raise ConfigError("family needs one kernel per class mean")
            feat = _feature(fam.get("feature"), means[0].shape[0])
            var = float(fam.get("var", 1.0))
            out = [RgmSpec(KernelSpec.from_dict(k), LatentSpec.isotropic(m, var), feat, j)
                   for j, (m, k) in enumerate(zip(means, kern))]
    except KeyError as exc:
        raise ConfigError(f"missing config field {exc}") from exc
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(f"bad class models: {exc}") from exc
    if shift:
        from ..rgm import shift_rgm
        out = [shift_rgm(r, shift) for r in out]
    return out


def synthetic_domains(cfg, seed):
    """Domain family k = 0..K-1: class means moved by k * delta, latent scale 1 + k * spread.

    Returns a list of datasets (one per domain). Used by exp1 and exp3 when no
    ingested domains are configured.
    """
    from dataclasses import replace as dc_replace
    K = _get(cfg, "domains", 4, int)
    delta = _get(cfg, "delta", 0.5, float)
    spread = _get(cfg, "spread", 0.15, float)
    n = cfg.get("n", [16, 24])
    m = _get(cfg, "m_per_class", 20, int)
    base = class_rgms_from_config(cfg)
    datasets = []
    for k in range(K):
        rgms = []
        for r in base:
            mean = np.asarray(r.latent.mean) + k * delta
            cov = np.asarray(r.latent.cov_diag) * (1.0 + k * spread) ** 2
            rgms.append(dc_replace(r, latent=dc_replace(r.latent, mean=tuple(mean), cov_diag=tuple(cov))))
        datasets.append(generate_dataset(rgms, n if isinstance(n, int) else tuple(n), m,
                                         seed=_seed_seq(seed, 1000 + k), realize_bernoulli=True))
    return datasets


def _domains(cfg, seed):
    if "domain_files" in cfg:
        bins = cfg.get("degree_feature_bins")
        return [_stage("ingest", rio.ingest_dataset, p, bins) for p in cfg["domain_files"]]
    if "synthetic" not in cfg:
        raise ConfigError("need 'synthetic' or 'domain_files'")
    return _stage("generate", synthetic_domains, cfg["synthetic"], seed)


def _domain_labels(cfg, K):
    labels = cfg.get("domain_labels") or [f"D{k}" for k in range(K)]
    if len(labels) != K:
        raise ConfigError("domain_labels length must equal the domain count")
    return labels


def _n_classes(datasets):
    return 1 + max(g.label for ds in datasets for g in ds)


# ---------------------------------------------------------------------------
# gen / train


def run_gen(cfg, seeds, out):
    out = Path(out)
    n = cfg.get("n", 20)
    n = n if isinstance(n, int) else tuple(n)
    m = cfg.get("m_per_class", 10)
    rb = bool(cfg.get("realize_bernoulli", True))
    rgms = class_rgms_from_config(cfg, _get(cfg, "shift", 0.0, float))
    files = []
    for s in seeds:
        ds = _stage("generate", generate_dataset, rgms, n, m, seed=_seed_seq(s), realize_bernoulli=rb)
        path = out / f"dataset_seed{s}.jsonl"
        rio.write_dataset(path, ds)
        files.append({"seed": s, "path": path.name, "graphs": len(ds)})
    rio.write_json(out / "gen_summary.json", {"files": files, "classes": [r.to_dict() for r in rgms]})
    return {"files": files}


def _load_train_data(cfg, seed):
    if "data" in cfg:
        path = str(cfg["data"]).replace("{seed}", str(seed))
        return _stage("ingest", rio.ingest_dataset, path, cfg.get("degree_feature_bins"))
    if "dataset" in cfg:
        d = cfg["dataset"]
        n = d.get("n", 20)
        return _stage("generate", generate_dataset, class_rgms_from_config(d), n if isinstance(n, int) else tuple(n),
                      d.get("m_per_class", 10), seed=_seed_seq(seed), realize_bernoulli=bool(d.get("realize_bernoulli", True)))
    raise ConfigError("train needs 'data' (path) or 'dataset' (generator config)")


def run_train(cfg, seeds, out, workers=1):
    out = Path(out)

    def one(s):
        data = _load_train_data(cfg, s)
        C = 1 + max(g.label for g in data)
        model = init_model(data[0].signals.shape[1], n_classes=C, seed=s, **_model_kw(cfg.get("model", {})))
        tc = _train_config(cfg.get("train", {}), s)
        best, hist = _stage("train", train, model, data, tc)
        loss, acc = evaluate(best, data, tc.loss)
        return s, best, hist, tc, loss, acc

    rows = []
    for s, best, hist, tc, loss, acc in _pmap(one, seeds, workers):
        save_checkpoint(best, out / f"model_seed{s}.json", config={"train": tc.__dict__, "model": cfg.get("model", {})})
        rio.write_text(out / f"history_seed{s}.csv", history_csv(hist))
        rows.append({"seed": s, "epochs": len(hist), "train_set_loss": loss, "train_set_acc": acc})
    rio.write_csv(out / "train_summary.csv", rows)
    return {"runs": rows}


# ---------------------------------------------------------------------------
# exp1: latent Wasserstein shift vs transfer loss


def _lsm_clouds(datasets, lcfg, seed):
    """Per (domain, class) point clouds of graph representations."""
    d = _get(lcfg, "d", 2, int)
    iters = _get(lcfg, "iters", 300, int)
    lr = _get(lcfg, "lr", 0.05, float)
    n_keep = _get(lcfg, "n_keep", 16, int)
    covariates = lcfg.get("covariates", "signals")
    if covariates not in ("signals", "none"):
        raise ConfigError("lsm covariates must be signals or none")
    clouds, fits = [], []
    for k, ds in enumerate(datasets):
        per_class = {}
        for c in sorted({g.label for g in ds}):
            gs = [g for g in ds if g.label == c]
            feats = [g.signals if covariates == "signals" else np.zeros((g.n, 1)) for g in gs]
            fit = _stage("lsm", lsm_fit_joint, [(g.adjacency != 0).astype(float) for g in gs], feats,
                         d=d, lr=lr, iters=iters, seed=_seed_seq(seed, k, c), fix_beta=covariates == "none")
            sub_seeds = _seed_seq(seed, k, c, 7).spawn(len(fit.positions))
            reps = np.stack([graph_representation(subsample_positions(principal_align(Z), n_keep,
                                                                      np.random.default_rng(ss)))
                             for Z, ss in zip(fit.positions, sub_seeds)])
            per_class[c] = PointCloud(reps)
            fits.append({"domain": k, "class": c, "graphs": len(gs), "loglik": fit.final_loglik,
                         "alpha": fit.alpha, "iterations": fit.iterations, "converged": fit.converged})
        clouds.append(per_class)
    return clouds, fits


def _train_per_domain(datasets, cfg, seed):
    C = _n_classes(datasets)
    models = []
    for k, ds in enumerate(datasets):
        model = init_model(ds[0].signals.shape[1], n_classes=C, seed=int(_seed_seq(seed, k).generate_state(1)[0]),
                           **_model_kw(cfg.get("model", {})))
        tc = _train_config(cfg.get("train", {}), seed)
        best, _ = _stage("train", train, model, ds, tc)
        models.append(best)
    return models


def run_exp1(cfg, seeds, out, workers=1):
    out = Path(out)
    ot = cfg.get("sinkhorn", {})
    reg_eps = _get(ot, "reg_eps", 0.1, float)
    iters = _get(ot, "iters", 1000, int)
    cap = _get(ot, "cap", 2000, int)

    def one(s):
        datasets = _domains(cfg, s)
        K = len(datasets)
        if K < 3:
            raise ConfigError("exp1 needs at least 3 domains")
        models = _train_per_domain(datasets, cfg, s)
        loss = np.array([[evaluate(models[i], datasets[j])[0] for j in range(K)] for i in range(K)])
        clouds, fits = _lsm_clouds(datasets, cfg.get("lsm", {}), s)
        for per in clouds:
            for c, pc in per.items():
                if pc.n > cap:
                    per[c] = PointCloud(pc.points[:cap])
        wd = np.zeros((K, K))
        for i in range(K):
            for j in range(K):
                if i != j:
                    wd[i, j] = _stage("sinkhorn", classwise_latent_wd, clouds[i], clouds[j], "sinkhorn", "sum",
                                      reg_eps=reg_eps, iters=iters)
        return loss, wd, fits

    runs = _pmap(one, seeds, workers)
    loss = np.mean([r[0] for r in runs], axis=0)
    wd = np.mean([r[1] for r in runs], axis=0)
    K = loss.shape[0]
    labels = _domain_labels(cfg, K)
    x, y = off_diagonal_pairs(wd, loss)
    if x.size != K * (K - 1):
        raise PipelineFailure("correlate", "off-diagonal pair count mismatch")
    pcc, p_p = _stage("correlate", pearson, x, y)
    src, p_s = _stage("correlate", spearman, x, y)
    mat_rows = lambda M: [{"source": labels[i], **{labels[j]: M[i, j] for j in range(K)}} for i in range(K)]
    rio.write_csv(out / "loss_matrix.csv", mat_rows(loss), ["source"] + labels)
    rio.write_csv(out / "wd_matrix.csv", mat_rows(wd), ["source"] + labels)
    pairs = [{"source": labels[i], "target": labels[j], "wd": wd[i, j], "loss": loss[i, j]}
             for i in range(K) for j in range(K) if i != j]
    rio.write_csv(out / "pairs.csv", pairs)
    rio.write_csv(out / "lsm_fits.csv", [dict(f, seed=s) for s, r in zip(seeds, runs) for f in r[2]])
    summary = {"domains": labels, "pairs": len(pairs), "pcc": pcc, "pcc_p": p_p, "src": src, "src_p": p_s,
               "seeds": list(seeds), "sinkhorn": {"reg_eps": reg_eps, "iters": iters, "cap": cap},
               "reference": {"note": "non-binding real-data reference values",
                             "pcc_a": 0.726, "src_a": 0.769, "pcc_b": 0.751, "src_b": 0.580}}
    rio.write_json(out / "exp1_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# exp2: Gram spectra


def _exp2_graphs(cfg, seed):
    if "data" in cfg:
        return _stage("ingest", rio.ingest_dataset, str(cfg["data"]).replace("{seed}", str(seed)),
                      cfg.get("degree_feature_bins"))
    d = cfg.get("dataset")
    if d is None:
        raise ConfigError("exp2 needs 'data' or 'dataset'")
    n = d.get("n", [15, 30])
    return _stage("generate", generate_dataset, class_rgms_from_config(d), n if isinstance(n, int) else tuple(n),
                  d.get("m_per_class", 100), seed=_seed_seq(seed), realize_bernoulli=bool(d.get("realize_bernoulli", True)))


def run_exp2(cfg, seeds, out, workers=1):
    out = Path(out)
    eps_list = [float(e) for e in cfg.get("eps", [0.1, 0.01, 0.001])]
    depths = [int(h) for h in cfg.get("depths", [3])]
    methods = cfg.get("methods", ["wl"])
    n_bins = _get(cfg, "n_bins", 10, int)
    unknown = set(methods) - {"wl", "mpnn"}
    if unknown:
        raise ConfigError(f"unknown exp2 methods {sorted(unknown)}")
    graphs_by_seed = _pmap(lambda s: _exp2_graphs(cfg, s), seeds, workers)
    rows, curves = [], []
    for method in methods:
        for h in depths:
            grams = []
            for s, graphs in zip(seeds, graphs_by_seed):
                if method == "wl":
                    grams.append(_stage("wl", wl_gram, graphs, h, n_bins=n_bins))
                else:
                    model = init_model(graphs[0].signals.shape[1], depth=h, n_classes=_n_classes([graphs]), seed=s,
                                       **_model_kw(cfg.get("model", {})))
                    if cfg.get("train"):
                        model, _ = _stage("train", train, model, graphs, _train_config(cfg["train"], s))
                    E = np.stack([mpnn_forward(model, g) for g in graphs])
                    grams.append(dot_product_gram(E))
            rep = _stage("spectrum", spectrum_report, grams, eps_list, method, h, bool(cfg.get("normalize", True)))
            rows.extend(rep["rows"])
            for s, spec in zip(seeds, rep["spectra"]):
                tail = tail_fractions(spec)
                for i, lam in enumerate(spec.eigenvalues, start=1):
                    curves.append({"method": method, "depth": h, "seed": s, "rank": i, "eigenvalue": float(lam),
                                   "tail": float(tail[i])})
    rio.write_text(out / "rank_table.csv", rank_table_csv(rows))
    rio.write_csv(out / "decay_curves.csv", curves)
    summary = {"rows": rows, "seeds": list(seeds),
               "reference": {"note": "non-binding", "gin_imdb_multi_h5_r": [3.8, 0.75]}}
    rio.write_json(out / "exp2_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# exp3: layerwise products, sensitivity, fixed-budget alpha family

_METHOD_REGS = {"l2": ("l2", None), "front": ("front", "alpha"), "back": ("back", "alpha")}


def _exp3_train(datasets, cfg, seed, reg, param, direction="front"):
    """One model per source domain with the given regularizer."""
    base = dict(cfg.get("train", {}))
    base.update(reg=reg, reg_param=param, reg_direction=direction, reg_lambda=float(cfg.get("reg_lambda", 1e-3)))
    C = _n_classes(datasets)
    out = []
    for k, ds in enumerate(datasets):
        model = init_model(ds[0].signals.shape[1], n_classes=C, seed=int(_seed_seq(seed, k).generate_state(1)[0]),
                           **_model_kw(cfg.get("model", {})))
        best, _ = _stage("train", train, model, ds, _train_config(base, seed))
        out.append(best)
    return out


def _directions(K, cfg):
    pairs = cfg.get("pairs")
    if pairs is None:
        return [(i, j) for i in range(K) for j in range(K) if i != j]
    return [tuple(p) for p in pairs]


def run_exp3a(cfg, seeds, out, workers=1):
    out = Path(out)
    alpha = _get(cfg, "alpha", 2.0, float)
    methods = cfg.get("methods", ["l2", "front", "back"])
    if "l2" not in methods:
        raise ConfigError("exp3a needs the l2 baseline")

    def one(s):
        datasets = _domains(cfg, s)
        rows = []
        for meth in methods:
            if meth not in _METHOD_REGS:
                raise ConfigError(f"unknown method {meth!r}")
            reg, p = _METHOD_REGS[meth]
            models = _exp3_train(datasets, cfg, s, reg, alpha if p else None)
            for i, j in _directions(len(datasets), cfg):
                norms = layerwise_norms(models[i])
                _, acc = evaluate(models[i], datasets[j])
                row = {"method": meth, "source": i, "target": j, "seed": s, "acc": acc, "P1": float(norms["P"][0])}
                row.update({f"C_{k}": float(c) for k, c in zip(norms["keys"], norms["C"])})
                row.update({f"P_{k}": float(c) for k, c in zip(norms["keys"], norms["P"])})
                rows.append(row)
        return rows

    rows = [r for rs in _pmap(one, seeds, workers) for r in rs]
    rio.write_csv(out / "products.csv", rows)
    base = {(r["source"], r["target"], r["seed"]): r for r in rows if r["method"] == "l2"}
    paired, stats = [], {}
    for meth in methods:
        if meth == "l2":
            continue
        dp, da = [], []
        for r in rows:
            if r["method"] != meth:
                continue
            b = base[(r["source"], r["target"], r["seed"])]
            d_p, d_a = r["P1"] - b["P1"], r["acc"] - b["acc"]
            paired.append({"method": meth, "source": r["source"], "target": r["target"], "seed": r["seed"],
                           "dP1": d_p, "dAcc": d_a})
            dp.append(d_p)
            da.append(d_a)
        try:
            rho, p = spearman(dp, da)
        except InvalidArgument as exc:
            rho, p = math.nan, math.nan
            stats[meth] = {"note": str(exc)}
        stats.setdefault(meth, {}).update(spearman=rho, p=p, pairs=len(dp), mean_dP1=float(np.mean(dp)),
                                          mean_dAcc=float(np.mean(da)))
    rio.write_csv(out / "paired.csv", paired)
    summary = {"alpha": alpha, "contrasts": stats, "seeds": list(seeds)}
    rio.write_json(out / "exp3a_summary.json", summary)
    return summary


def run_exp3b(cfg, seeds, out, workers=1):
    out = Path(out)
    eps_list = [float(e) for e in cfg.get("eps", [0.002, 0.005, 0.01, 0.02, 0.05])]
    n_dirs = _get(cfg, "directions", 8, int)
    methods = cfg.get("methods", ["l2"])
    alpha = _get(cfg, "alpha", 2.0, float)

    def one(s):
        datasets = _domains(cfg, s)
        rows = []
        for meth in methods:
            if meth not in _METHOD_REGS:
                raise ConfigError(f"unknown method {meth!r}")
            reg, p = _METHOD_REGS[meth]
            models = _exp3_train(datasets, cfg, s, reg, alpha if p else None)
            for i, j in _directions(len(datasets), cfg):
                layers = cfg.get("layers") or models[i].matrix_keys()
                for li, layer in enumerate(layers):
                    rep = _stage("perturb", perturbation_sensitivity, models[i], datasets[j], layer, eps_list,
                                 n_dirs, seed=_seed_seq(s, i, j, li))
                    for r in rep["rows"]:
                        rows.append({"method": meth, "source": i, "target": j, "seed": s, "layer": layer, **r})
        return rows

    rows = [r for rs in _pmap(one, seeds, workers) for r in rs]
    rio.write_csv(out / "sensitivity.csv", rows)
    summary_rows = []
    keys = sorted({(r["method"], r["layer"]) for r in rows})
    for meth, layer in keys:
        for eps in eps_list:
            dl = np.array([r["delta_loss"] for r in rows if r["method"] == meth and r["layer"] == layer
                           and r["eps"] == eps])
            summary_rows.append({"method": meth, "layer": layer, "eps": eps, "mean_abs": float(np.mean(np.abs(dl))),
                                 "signed_mean": float(np.mean(dl)), "std": float(np.std(dl)), "count": int(dl.size)})
    rio.write_csv(out / "sensitivity_summary.csv", summary_rows)
    pooled = []
    for eps in eps_list:
        dl = np.array([r["delta_loss"] for r in rows if r["eps"] == eps])
        pooled.append({"eps": eps, "mean_abs": float(np.mean(np.abs(dl)))})
    monotone = all(a["mean_abs"] <= b["mean_abs"] for a, b in zip(pooled, pooled[1:]))
    max_norm_err = max((abs(r["applied_norm"] - r["target_norm"]) for r in rows), default=0.0)
    summary = {"pooled": pooled, "nondecreasing": monotone, "max_norm_error": max_norm_err, "seeds": list(seeds)}
    rio.write_json(out / "exp3b_summary.json", summary)
    return summary


def run_exp3c(cfg, seeds, out, workers=1):
    out = Path(out)
    alphas = [float(a) for a in cfg.get("alphas", [0.5, 0.7, 1.0, 1.4, 2.0])]
    directions = cfg.get("directions", ["front", "back"])

    def one(s):
        datasets = _domains(cfg, s)
        rows = []
        for direction in directions:
            for a in alphas:
                models = _exp3_train(datasets, cfg, s, "fixed_budget", a, direction)
                L = len(models[0].matrix_keys())
                c = reg_coefficients("fixed_budget", a, L, direction)
                for i, j in _directions(len(datasets), cfg):
                    loss, acc = evaluate(models[i], datasets[j])
                    rows.append({"direction": direction, "alpha": a, "source": i, "target": j, "seed": s,
                                 "acc": acc, "loss": loss, "L": L, "coef_sum": math.fsum(c)})
        return rows

    rows = [r for rs in _pmap(one, seeds, workers) for r in rs]
    for r in rows:
        if abs(r["coef_sum"] - r["L"]) > 1e-12:
            raise PipelineFailure("audit", f"coefficient budget {r['coef_sum']} != {r['L']}")
    rio.write_csv(out / "alpha_sweep.csv", rows)
    gains = []
    for direction in directions:
        tasks = sorted({(r["source"], r["target"]) for r in rows})
        for i, j in tasks:
            mean_acc = {a: float(np.mean([r["acc"] for r in rows if r["direction"] == direction and r["alpha"] == a
                                          and r["source"] == i and r["target"] == j])) for a in alphas}
            best = max(alphas, key=lambda a: (mean_acc[a], -abs(a - 1.0)))
            uni = mean_acc.get(1.0, math.nan)
            gains.append({"direction": direction, "source": i, "target": j, "best_alpha": best,
                          "best_acc": mean_acc[best], "uniform_acc": uni, "gain": mean_acc[best] - uni})
    rio.write_csv(out / "best_vs_uniform.csv", gains)
    summary = {"alphas": alphas, "directions": directions, "mean_gain": float(np.mean([g["gain"] for g in gains])),
               "seeds": list(seeds)}
    rio.write_json(out / "exp3c_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# simulations


def _sim_rgms(cfg, shift):
    means = [np.asarray(m, dtype=float) for m in cfg["means"]]
    kern = cfg["kernels"]
    kern = kern if isinstance(kern, list) else [kern] * len(means)
    feat = _feature(cfg.get("feature"), means[0].shape[0])
    var = float(cfg.get("var", 1.0))
    return [RgmSpec(KernelSpec.from_dict(k), LatentSpec.isotropic(m + shift, var), feat, j)
            for j, (m, k) in enumerate(zip(means, kern))]


def run_sim(cfg, seeds, out, vary, workers=1):
    """Target loss versus source graph size or latent shift.

    Common random numbers: for one seed the model initialisation, the
    mini-batch order and the target sample are shared across grid points
    (for the shift sweep the source set too, and targets differ only by the
    translation of their latents).
    With ``nested_sizes`` (default) the size-n source graphs are the first n
    nodes of one set of max(grid)-node graphs, so grid points differ only in n.
    ``selection`` picks the reported loss per run: ``best_target`` (minimum
    target loss over epochs) or ``final`` (the model chosen on source
    validation).
    """
    out = Path(out)
    if vary not in ("size", "shift"):
        raise ConfigError("vary must be size or shift")
    try:
        grid = [float(v) for v in cfg["grid"]]
        _sim_rgms(cfg, 0.0)
    except KeyError as exc:
        raise ConfigError(f"missing config field {exc}") from exc
    except (InvalidArgument, TypeError, ValueError) as exc:
        raise ConfigError(f"bad simulation config: {exc}") from exc
    if not grid:
        raise ConfigError("grid must be non-empty")
    s_fixed = _get(cfg, "s", 3.0, float)
    n_fixed = _get(cfg, "n", 20, int)
    n_target = _get(cfg, "target_n", n_fixed, int)
    m_src = _get(cfg, "m_per_class", 10, int)
    m_tgt = _get(cfg, "m_target", 5, int)
    rb = bool(cfg.get("realize_bernoulli", True))
    nested = bool(cfg.get("nested_sizes", True))
    n_max = int(max(grid))
    selection = cfg.get("selection", "best_target")
    if selection not in ("best_target", "final"):
        raise ConfigError("selection must be best_target or final")

    def one(task):
        s, gi = task
        x = grid[gi]
        n = int(x) if vary == "size" else n_fixed
        shift = s_fixed if vary == "size" else x
        if vary == "size" and nested:
            full = generate_dataset(_sim_rgms(cfg, 0.0), n_max, m_src, seed=_seed_seq(s, 11), realize_bernoulli=rb)
            src = [induced_prefix(g, n) for g in full]
        elif vary == "size":
            src = generate_dataset(_sim_rgms(cfg, 0.0), n, m_src, seed=_seed_seq(s, 11, gi), realize_bernoulli=rb)
        else:
            src = generate_dataset(_sim_rgms(cfg, 0.0), n, m_src, seed=_seed_seq(s, 11), realize_bernoulli=rb)
        # same seed at every grid point: shifted targets are translated copies of one latent draw
        tgt = generate_dataset(_sim_rgms(cfg, shift), n_target if vary == "size" else n, m_tgt,
                               seed=_seed_seq(s, 12), realize_bernoulli=rb)
        model = init_model(src[0].signals.shape[1], n_classes=len(cfg["means"]), seed=s,
                           **_model_kw(cfg.get("model", {})))
        tc = _train_config(cfg.get("train", {}), s)
        try:
            mon = (lambda m: evaluate(m, tgt, tc.loss)[0]) if selection == "best_target" else None
            best, hist = train(model, src, tc, monitor=mon)
        except (RgmShiftError, ValueError, ArithmeticError) as exc:
            return {"seed": s, "x": x, "loss": math.nan, "final_loss": math.nan, "flag": f"failed: {exc}"}
        final = evaluate(best, tgt, tc.loss)[0]
        loss = min(h["monitor"] for h in hist) if selection == "best_target" else final
        return {"seed": s, "x": x, "loss": loss, "final_loss": final, "epochs": len(hist), "flag": ""}

    tasks = [(s, gi) for s in seeds for gi in range(len(grid))]
    per_run = _pmap(one, tasks, workers)
    per_run.sort(key=lambda r: (grid.index(r["x"]), seeds.index(r["seed"])))
    series = []
    for x in grid:
        vals = np.array([r["loss"] for r in per_run if r["x"] == x and np.isfinite(r["loss"])])
        series.append({"x": x, "y": float(vals.mean()) if vals.size else math.nan,
                       "err": float(vals.std()) if vals.size else math.nan, "group": vary, "runs": int(vals.size)})
    rio.write_csv(out / f"sim_{vary}_runs.csv", per_run, ["seed", "x", "loss", "final_loss", "epochs", "flag"])
    rio.write_csv(out / f"sim_{vary}_series.csv", series, ["x", "y", "err", "group", "runs"])
    ys = [r["y"] for r in series]
    ok = [i for i, y in enumerate(ys) if np.isfinite(y)]
    rho = spearman([grid[i] for i in ok], [ys[i] for i in ok])[0] if len(ok) >= 3 else math.nan
    fin = []
    for x in grid:
        v = np.array([r["final_loss"] for r in per_run if r["x"] == x])
        v = v[np.isfinite(v)]
        fin.append(float(v.mean()) if v.size else math.nan)
    okf = [i for i, y in enumerate(fin) if np.isfinite(y)]
    rho_f = spearman([grid[i] for i in okf], [fin[i] for i in okf])[0] if len(okf) >= 3 else math.nan
    summary = {"vary": vary, "grid": grid, "mean_loss": ys, "spearman": rho,
               "mean_final_loss": fin, "spearman_final": rho_f,
               "argmin": grid[int(np.nanargmin(ys))] if ok else None, "selection": selection, "seeds": list(seeds),
               "failed_runs": sum(1 for r in per_run if r["flag"])}
    rio.write_json(out / f"sim_{vary}_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# bound


def bound_inputs_from_config(cfg):
    if "inputs" in cfg:
        try:
            return BoundInputs.from_dict(cfg["inputs"])
        except (TypeError, KeyError, InvalidArgument) as exc:
            raise ConfigError(f"bad bound inputs: {exc}") from exc
    d = cfg.get("defaults", {})
    try:
        x = illustration_defaults(**d)
        for factor, value in cfg.get("overrides", {}).items():
            x = apply_factor(x, factor, value)
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"bad bound defaults: {exc}") from exc
    return x


def run_bound(cfg, seeds, out):
    out = Path(out)
    inputs = bound_inputs_from_config(cfg)
    rep = _stage("bound", assemble_bound, inputs)
    text = rio.dumps({"inputs": inputs.to_dict(), "report": rep.to_dict()})
    rio.write_text(out / "bound_report.json", text)
    result = {"eps_t_upper": rep.eps_t_upper, "transfer_penalty": rep.transfer_penalty, "golden": "none"}
    golden = cfg.get("golden")
    if golden:
        g = Path(golden)
        if g.exists():
            if g.read_text() != text:
                raise PipelineFailure("golden", f"report differs from {g}")
            result["golden"] = "match"
        else:
            rio.write_text(g, text)
            result["golden"] = "archived"
    return result


def _grid(spec):
    if isinstance(spec, dict):
        if "logspace" in spec:
            lo, hi, num = spec["logspace"]
            return list(np.logspace(float(lo), float(hi), int(num)))
        if "linspace" in spec:
            lo, hi, num = spec["linspace"]
            return list(np.linspace(float(lo), float(hi), int(num)))
        raise ConfigError("grid dict needs logspace or linspace")
    return [float(v) for v in spec]


def run_bound_sweep(cfg, seeds, out):
    out = Path(out)
    inputs = bound_inputs_from_config(cfg)
    sweeps = cfg.get("sweeps") or [{"factor": cfg.get("factor"), "grid": cfg.get("grid")}]
    summary = {}
    for sw in sweeps:
        factor = sw.get("factor")
        if factor not in SWEEP_FACTORS:
            raise ConfigError(f"unknown sweep factor {factor!r}")
        if sw.get("grid") is None:
            raise ConfigError("sweep needs a grid")
        grid = _grid(sw["grid"])
        rows = _stage("sweep", bound_sweep, inputs, factor, grid)
        rio.write_csv(out / f"sweep_{factor}.csv", rows)
        ok = [r for r in rows if not r["flag"]]
        entry = {"points": len(rows), "invalid": len(rows) - len(ok)}
        if len(ok) >= 3:
            el = elbow_readouts([r["value"] for r in ok], [r["eps_t_upper"] for r in ok])
            entry["elbow"] = el
        if factor == "d_min":
            N = inputs.N
            entry["reference"] = {"log10N_over_N": math.log10(N) / N, "lnN_over_N": math.log(N) / N}
        summary[factor] = entry
    rio.write_json(out / "sweep_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# selftest


def run_selftest(cfg, seeds, out):
    """Quick internal consistency checks; raises PipelineFailure on any miss."""
    from ..mpnn import loss_and_grad
    from ..rgm import Graph
    from ..transport import exact_w2, sinkhorn_w2
    out = Path(out)
    checks = []
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((8, 3)), rng.standard_normal((8, 3)) + 0.5
    ex = exact_w2(a, b)
    sk = sinkhorn_w2(a, b, reg_eps=0.01, iters=2000).distance
    checks.append({"check": "sinkhorn_vs_exact", "value": abs(sk - ex) / ex, "limit": 0.02})
    for d in ("front", "back"):
        c = reg_coefficients("fixed_budget", 1.4, 5, d)
        checks.append({"check": f"budget_{d}", "value": abs(math.fsum(c) - 5), "limit": 1e-12})
    x = illustration_defaults()
    x.delta_d, x.w2_hat = 0.0, None
    rep = assemble_bound(x)
    checks.append({"check": "zero_divergence", "value": abs(rep.eps_t_upper - x.source_risk), "limit": 0.0})
    model = init_model(3, hidden=4, depth=1, n_classes=2, seed=0, output_scaling=False)
    A = np.ones((4, 4))
    g = Graph(4, A, rng.standard_normal((4, 3)), None, 1)
    tc = TrainConfig(reg="l2", reg_lambda=0.01)
    _, grads = loss_and_grad(model, [g], tc)
    key = model.matrix_keys()[0]
    W = model.get_matrix(key)
    h = 1e-5
    num = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        for sgn in (1, -1):
            Wp = W.copy()
            Wp[idx] += sgn * h
            model.set_matrix(key, Wp)
            num[idx] += sgn * loss_and_grad(model, [g], tc)[0] / (2 * h)
    model.set_matrix(key, W)
    err = float(np.max(np.abs(num - grads["W"][key])) / max(np.max(np.abs(num)), 1e-12))
    checks.append({"check": "gradient", "value": err, "limit": 1e-4})
    for c in checks:
        c["pass"] = bool(c["value"] <= c["limit"])
    rio.write_csv(out / "selftest.csv", checks, ["check", "value", "limit", "pass"])
    failed = [c["check"] for c in checks if not c["pass"]]
    if failed:
        raise PipelineFailure("selftest", f"failed checks: {failed}")
    return {"checks": len(checks), "failed": failed}


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg
