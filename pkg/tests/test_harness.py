import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgmshift import io as rio
from rgmshift._validation import InvalidArgument
from rgmshift.harness import cli
from rgmshift.harness import pipelines as P
from rgmshift.harness import stats
from rgmshift.rgm import Graph

FAMILY = {"means": [[-1.0, 0.0], [1.0, 0.0]], "var": 0.25,
          "kernels": {"kind": "gaussian_ti", "sigma": 1.0, "scale": 1.0},
          "feature": {"kind": "zero_pad", "out_dim": 3}}
SMALL_TRAIN = {"lr": 0.05, "epochs": 3, "patience": 3, "batch": 4}


def _write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


# ---------------------------------------------------------------------------
# statistics


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_ranks(v):
    # average rank for ties, 1-based
    return [sum(1 for w in v if w < a) + (sum(1 for w in v if w == a) + 1) / 2 for a in v]


def test_correlations_match_hand_formula():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(12).tolist()
    y = (np.array(x) * 0.5 + rng.standard_normal(12)).tolist()
    assert stats.pearson(x, y)[0] == pytest.approx(brute_pearson(x, y), abs=1e-12)
    y[3] = y[4]  # force a tie
    assert stats.spearman(x, y)[0] == pytest.approx(brute_pearson(brute_ranks(x), brute_ranks(y)), abs=1e-12)


def test_t_pvalue_close_to_permutation_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(12)
    y = 0.6 * x + rng.standard_normal(12)
    for method, fn in (("pearson", stats.pearson), ("spearman", stats.spearman)):
        _, p = fn(x, y)
        p_perm = stats.permutation_pvalue(x, y, method, n_perm=4000, seed=0)
        # monte carlo error of the permutation p-value is about sqrt(p/4000)
        assert abs(p - p_perm) < 0.03


def test_perfect_correlation_and_errors():
    r, p = stats.spearman([1, 2, 3, 4], [1, 4, 9, 16])
    assert r == pytest.approx(1.0, abs=1e-12) and p < 1e-12
    with pytest.raises(InvalidArgument):
        stats.pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(InvalidArgument):
        stats.pearson([1, 2], [1, 2])
    with pytest.raises(InvalidArgument):
        stats.spearman([1, 2, 3], [1, 2])
    with pytest.raises(InvalidArgument):
        stats.permutation_pvalue([1, 2, 3], [3, 2, 1], method="kendall")


def test_off_diagonal_pairs_row_major():
    wd = np.arange(9.0).reshape(3, 3)
    x, y = stats.off_diagonal_pairs(wd, -wd)
    assert x.tolist() == [1, 2, 3, 5, 6, 7]
    assert y.tolist() == [-1, -2, -3, -5, -6, -7]
    with pytest.raises(InvalidArgument):
        stats.off_diagonal_pairs(np.zeros((2, 3)), np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(data=st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=20))
def test_correlation_bounds_and_symmetry(data):
    x = [a for a, _ in data]
    y = [b for _, b in data]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    try:
        r, p = stats.pearson(x, y)
    except InvalidArgument:
        return  # variance underflow on near-constant input
    assert -1 <= r <= 1 and 0 <= p <= 1
    assert stats.pearson(y, x)[0] == pytest.approx(r, abs=1e-12)
    # ranks are unchanged by a strictly increasing map
    s, _ = stats.spearman(x, y)
    assert stats.spearman(x, [2.0 * v for v in y])[0] == pytest.approx(s, abs=1e-12)


# ---------------------------------------------------------------------------
# ingestion


def test_ingest_fixture_and_roundtrip(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"n": 3, "edges": [[0, 1], [1, 2, 2.0]], "features": [[1], [0], [1]], "label": 1}\n\n'
                 '{"n": 2, "edges": [[0, 1, 1.0]], "features": [], "label": 0, "binary": true}\n')
    with pytest.raises(InvalidArgument, match="line 3"):
        rio.ingest_dataset(p)
    gs = rio.ingest_dataset(p, degree_feature_bins=2)
    assert gs[0].adjacency.tolist() == [[0, 1, 0], [1, 0, 2], [0, 2, 0]]
    assert gs[0].label == 1 and gs[1].binary
    assert gs[1].signals.shape == (2, 2)
    q = tmp_path / "e.jsonl"
    rio.write_dataset(q, gs)
    back = rio.ingest_dataset(q)
    for a, b in zip(gs, back):
        assert np.array_equal(a.adjacency, b.adjacency) and np.array_equal(a.signals, b.signals)


@pytest.mark.parametrize("line, msg", [
    ('{"n": 2, "edges": [[0, 5]], "features": [[0], [0]]}', "out of range"),
    ('{"n": 2, "edges": [[0, 1, 1.0], [1, 0, 2.0]], "features": [[0], [0]]}', "asymmetric"),
    ('{"edges": []}', "malformed"),
    ('not json', "invalid JSON"),
])
def test_ingest_errors(tmp_path, line, msg):
    p = tmp_path / "bad.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(InvalidArgument, match=msg):
        rio.ingest_dataset(p)


def test_clouds_roundtrip(tmp_path):
    from rgmshift.transport import PointCloud
    clouds = {0: PointCloud(np.array([[0.0, 1.0], [2.0, 3.0]])), 1: PointCloud(np.ones((1, 2)))}
    rio.write_clouds(tmp_path / "c.jsonl", clouds)
    back = rio.read_clouds(tmp_path / "c.jsonl")
    assert np.array_equal(back[0].points, clouds[0].points)


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("RGMSHIFT_THREADS", raising=False)
    assert rio.thread_cap() == 1
    monkeypatch.setenv("RGMSHIFT_THREADS", "3")
    assert rio.thread_cap() == 3
    monkeypatch.setenv("RGMSHIFT_THREADS", "0")
    with pytest.raises(InvalidArgument):
        rio.thread_cap()


def test_pmap_preserves_order():
    assert P._pmap(lambda x: x * x, [3, 1, 2], 3) == [9, 1, 4]


def test_seed_parsing():
    assert cli.parse_seeds([["1,2", "3"], ["4"]]) == [1, 2, 3, 4]
    with pytest.raises(P.ConfigError):
        cli.parse_seeds([["x"]])
    with pytest.raises(P.ConfigError):
        cli.parse_seeds([["-1"]])


# ---------------------------------------------------------------------------
# CLI exit codes and pipelines


def test_exit_code_config_errors(tmp_path):
    assert cli.main(["bound", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["bound", "--config", str(bad), "--out", str(tmp_path)]) == 2
    cfg = _write(tmp_path, "g.json", {"n": 5})
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path)]) == 2
    cfg = _write(tmp_path, "s.json", {"seeds": [], "family": FAMILY})
    assert cli.main(["gen", "--config", cfg, "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["nosuch"])
    assert exc.value.code == 2


def test_exit_code_pipeline_failure(tmp_path):
    # a golden file that disagrees with the computed report
    golden = tmp_path / "golden.json"
    golden.write_text(json.dumps({"eps_t_upper": 0.0}))
    cfg = _write(tmp_path, "b.json", {"defaults": {"hidden": 16, "source_risk": 0.1, "shift": 2.0},
                                      "golden": str(golden)})
    assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    # training on graphs with an isolated node fails inside the pipeline
    data = tmp_path / "iso.jsonl"
    rio.write_dataset(data, [Graph(2, np.array([[0.0, 0.0], [0.0, 1.0]]), np.zeros((2, 1)), label=0),
                             Graph(2, np.ones((2, 2)), np.zeros((2, 1)), label=1)])
    cfg = _write(tmp_path, "t.json", {"data": str(data), "train": SMALL_TRAIN})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 3


def test_selftest_passes(tmp_path):
    assert cli.main(["selftest", "--out", str(tmp_path)]) == 0
    assert "True" in (tmp_path / "selftest.csv").read_text()


def test_gen_train_and_reruns_identical(tmp_path):
    gen = _write(tmp_path, "gen.json", {"family": FAMILY, "n": [6, 9], "m_per_class": 4})
    for d in ("a", "b"):
        assert cli.main(["gen", "--config", gen, "--seed-list", "0,1", "--out", str(tmp_path / d)]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert len(rio.ingest_dataset(tmp_path / "a" / "dataset_seed1.jsonl")) == 8
    tr = _write(tmp_path, "tr.json", {"data": str(tmp_path / "a" / "dataset_seed{seed}.jsonl"),
                                      "model": {"hidden": 4, "depth": 1}, "train": SMALL_TRAIN})
    for d in ("ta", "tb"):
        assert cli.main(["train", "--config", tr, "--seed-list", "0", "--out", str(tmp_path / d)]) == 0
    assert _files(tmp_path / "ta") == _files(tmp_path / "tb")


def test_bound_and_sweep_outputs(tmp_path):
    cfg = _write(tmp_path, "b.json", {"defaults": {"hidden": 16, "source_risk": 0.1, "shift": 2.0}})
    assert cli.main(["bound", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "bound_report.json").read_text())["report"]
    assert rep["eps_t_upper"] > 0.1
    sw = _write(tmp_path, "s.json", {"defaults": {"hidden": 16, "source_risk": 0.1, "shift": 2.0},
                                     "sweeps": [{"factor": "d_min", "grid": {"logspace": [-3, 1, 12]}}]})
    assert cli.main(["bound-sweep", "--config", sw, "--out", str(tmp_path / "s")]) == 0
    assert any(p.suffix == ".csv" for p in (tmp_path / "s").iterdir())
    bad = _write(tmp_path, "x.json", {"defaults": {"hidden": 16}, "sweeps": [{"factor": "nope", "grid": [1, 2]}]})
    assert cli.main(["bound-sweep", "--config", bad, "--out", str(tmp_path / "x")]) == 2


def _domains_cfg(**extra):
    cfg = {"synthetic": {"family": FAMILY, "domains": 3, "n": [6, 8], "m_per_class": 4, "delta": 0.5},
           "model": {"hidden": 4, "depth": 1}, "train": SMALL_TRAIN}
    cfg.update(extra)
    return cfg


def test_exp2_small(tmp_path):
    cfg = _write(tmp_path, "e2.json", {"dataset": {"family": FAMILY, "n": [6, 10], "m_per_class": 10},
                                       "depths": [1, 3], "methods": ["wl", "mpnn"], "model": {"hidden": 4}})
    assert cli.main(["exp2", "--config", cfg, "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "exp2_summary.json").read_text())
    assert len(s["rows"]) == 2 * 2 * 3
    bad = _write(tmp_path, "e2b.json", {"dataset": {"family": FAMILY}, "methods": ["svd"]})
    assert cli.main(["exp2", "--config", bad, "--out", str(tmp_path)]) == 2


def test_exp3_small(tmp_path):
    cfg = _write(tmp_path, "e3a.json", _domains_cfg(pairs=[[0, 1], [1, 2], [2, 0]]))
    assert cli.main(["exp3a", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert "front" in json.loads((tmp_path / "a" / "exp3a_summary.json").read_text())["contrasts"]
    cfg = _write(tmp_path, "e3b.json", _domains_cfg(pairs=[[0, 1]], eps=[0.0, 0.01, 0.05], directions=3,
                                                    layers=["cls.0"]))
    assert cli.main(["exp3b", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    s = json.loads((tmp_path / "b" / "exp3b_summary.json").read_text())
    assert s["pooled"][0]["mean_abs"] == 0.0 and s["max_norm_error"] < 1e-12
    cfg = _write(tmp_path, "e3c.json", _domains_cfg(pairs=[[0, 1]], alphas=[0.5, 1.0, 2.0]))
    assert cli.main(["exp3c", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "best_vs_uniform.csv").exists()
    cfg = _write(tmp_path, "e3x.json", _domains_cfg(methods=["front"]))
    assert cli.main(["exp3a", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_exp1_small(tmp_path):
    cfg = _domains_cfg(lsm={"d": 2, "iters": 20, "covariates": "none", "n_keep": 4},
                       sinkhorn={"reg_eps": 0.1, "iters": 200})
    path = _write(tmp_path, "e1.json", cfg)
    assert cli.main(["exp1", "--config", path, "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "exp1_summary.json").read_text())
    assert s["pairs"] == 6 and -1 <= s["src"] <= 1
    cfg["synthetic"]["domains"] = 2
    path = _write(tmp_path, "e1b.json", cfg)
    assert cli.main(["exp1", "--config", path, "--out", str(tmp_path)]) == 2


def test_sim_small(tmp_path):
    cfg = {"grid": [6, 8], "target_n": 8, "m_per_class": 3, "m_target": 2, "means": [[0.5, 0], [-0.5, 0]],
           "kernels": {"kind": "gaussian_ti", "sigma": 1.0, "scale": 1.0}, "feature": {"kind": "zero_pad", "out_dim": 3},
           "model": {"hidden": 4, "depth": 1}, "train": SMALL_TRAIN}
    path = _write(tmp_path, "sim.json", cfg)
    assert cli.main(["sim-size", "--config", path, "--seed-list", "0", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["sim-size", "--config", path, "--seed-list", "0", "1", "--out", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "sim_size_summary.json").read_text())["failed_runs"] == 0
    cfg["grid"], cfg["n"] = [0.0, 1.0], 6
    path = _write(tmp_path, "sim2.json", cfg)
    rc = cli.main(["sim-shift", "--config", path, "--seed-list", "0", "--out", str(tmp_path / "c")])
    assert rc == 0
    s = json.loads((tmp_path / "c" / "sim_shift_summary.json").read_text())
    assert s["failed_runs"] == 0 and len(s["mean_loss"]) == 2
