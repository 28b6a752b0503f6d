import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgmshift import bound as B
from rgmshift._validation import ConstraintViolation, InvalidArgument
from rgmshift.harness import pipelines as P

import bound_cases as bc
import oracles as O

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def test_random_configs_match_oracle():
    rng = np.random.default_rng(2024)
    for i in range(100):
        x = bc.random_inputs(rng)
        assert bc.compare(x) == [], f"config {i}"


def test_comparator_catches_a_wrong_constant(monkeypatch):
    x = bc.random_inputs(np.random.default_rng(5))
    real = B.k_constants

    def off(*a, **k):
        K = real(*a, **k)
        K["K4"] *= 1 + 1e-6
        return K

    monkeypatch.setattr(B, "k_constants", off)
    names = [b[0].split("[")[0] for b in bc.compare(x)]
    assert "K4" in names


def test_hand_values_single_layer():
    # T = 1, zero biases: C1 = 0, C2 = LPsi(1 + LPhi), A = LPsi sqrt(1 + 8 W^2 LPhi^2 / d^2)
    m = B.MpnnRegularity([0.5], [2.0])
    r = B.RgmConstants(w_inf=1.0, d_min=2.0, lip_w_inf=1.0)
    lc = B.layer_constants(m, r)
    assert lc.C1.tolist() == [0.0, 0.0]
    assert lc.C2.tolist() == [1.0, 3.0]
    assert lc.D3[1] == pytest.approx(1.25)
    assert lc.A[1] == pytest.approx(2.0 * math.sqrt(1 + 8 * 0.25 / 4))
    # D2^(1) = C2^(0) (LPsi LPhi LW / d + LPsi LPhi W LW / d^2) = 0.5 + 0.25
    assert lc.D2[1] == pytest.approx(0.75)


def test_classifier_constants_hand():
    c = B.ClassifierRegularity([1.0, 0.5], [2.0, 3.0], None, [0.1, 0.2], alpha_act=0.5, beta_act=1.0, kappa=1.0)
    L_NN, G_NN = B.classifier_constants(c)
    assert L_NN == pytest.approx(3.0)
    assert G_NN == pytest.approx(4.0 * (1.1 * 1.2 - 1))


def test_zero_divergence_gives_source_risk_exactly():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = bc.random_inputs(rng)
        x.delta_d = 0.0
        rep = B.assemble_bound(x)
        assert rep.transfer_penalty == 0.0
        assert rep.eps_t_upper == x.source_risk


def test_penalty_scaling_in_divergence_and_lambda():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = bc.random_inputs(rng)
        x.delta_d = 0.7
        base = B.assemble_bound(x).transfer_penalty
        for k in (0.25, 4.0, 9.0):
            y = copy.deepcopy(x)
            y.delta_d = 0.7 * k
            assert B.assemble_bound(y).transfer_penalty == pytest.approx(base * math.sqrt(k), rel=1e-12)
            z = copy.deepcopy(x)
            z.lambda_r = x.lambda_r * k
            assert B.assemble_bound(z).transfer_penalty == pytest.approx(base / math.sqrt(k), rel=1e-12)


def test_override_terms():
    x = bc.random_inputs(np.random.default_rng(3))
    rep = B.assemble_bound(x, delta_n_value=0.0, dgt_value=0.0)
    L_NN, G_NN = B.classifier_constants(x.cls)
    want = O.penalty(x.class_count, x.delta_d, x.lambda_r, L_NN, G_NN, 0.0, 0.0, x.pert.delta_opt, x.eps3, x.eps4)
    assert rep.transfer_penalty == pytest.approx(want, rel=1e-12)


def test_invalid_inputs():
    x = B.illustration_defaults()
    with pytest.raises(InvalidArgument):
        B.apply_factor(x, "lambda_r", 0.0)
    with pytest.raises(InvalidArgument):
        B.apply_factor(x, "d_min", -1.0)
    with pytest.raises(InvalidArgument):
        B.apply_factor(x, "nope", 1.0)
    with pytest.raises(ConstraintViolation):
        B.PerturbRegularity([[1.0]], [[0.1]], [[1.0]], [[0.1]], [4], [4], grad_tau_inf=0.6)
    with pytest.raises(InvalidArgument):
        B.PerturbRegularity([[0.0]], [[0.1]], [[1.0]], [[0.1]], [4], [4])


def test_delta_n_decreases_in_N():
    x = B.illustration_defaults()
    vals = [B.assemble_bound(B.apply_factor(x, "N", n)).delta_n for n in (50, 150, 1000, 10000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_shift_sweep_increasing():
    rows = B.bound_sweep(B.illustration_defaults(), "s", np.linspace(0.5, 4, 8))
    ys = [r["eps_t_upper"] for r in rows]
    assert all(a < b for a, b in zip(ys, ys[1:]))


def test_sweep_flags_invalid_points():
    rows = B.bound_sweep(B.illustration_defaults(), "lambda_r", [0.1, 0.0, 1.0])
    assert rows[1]["flag"].startswith("invalid")
    assert math.isnan(rows[1]["eps_t_upper"])
    assert rows[0]["flag"] == "" and rows[2]["flag"] == ""


def test_depth_sweep_builds_consistent_inputs():
    x = B.apply_factor(B.illustration_defaults(), "T", 4)
    assert x.mpnn.T == 4 and x.pert.T == 4
    assert bc.compare(x) == []


def test_max_curvature_on_known_curve():
    # y = |x - 0.5| sampled finely has its kink at 0.5
    x = np.linspace(0, 1, 101)
    xm, _ = B.max_curvature_point(x, np.abs(x - 0.5) + 1)
    assert xm == pytest.approx(0.5)


def test_sufficient_condition_structure():
    x = B.illustration_defaults()
    out = B.sufficient_condition(x, xi=1.0)
    assert set(out["conditions"]) == {"classifier_perturbation", "graph_size",
                                      "feature_extractor_perturbation", "rgm_deformation"}
    assert out["binding"] in out["conditions"]
    assert out["M_condition"]["vacuous"] is True
    with pytest.raises(InvalidArgument):
        B.sufficient_condition(x, xi=0.0)


def test_golden_report(tmp_path):
    cfg = json.loads((FIXTURES.parent.parent / "configs" / "bound.json").read_text())
    cfg["golden"] = str(FIXTURES / "bound_golden.json")
    assert P.run_bound(cfg, [0], tmp_path)["golden"] == "match"


def test_golden_mismatch_is_pipeline_failure(tmp_path):
    g = tmp_path / "g.json"
    g.write_text("{}")
    with pytest.raises(P.PipelineFailure):
        P.run_bound({"golden": str(g)}, [0], tmp_path)


def test_report_roundtrip():
    x = B.illustration_defaults()
    y = B.BoundInputs.from_dict(json.loads(json.dumps(x.to_dict())))
    assert B.assemble_bound(y).eps_t_upper == B.assemble_bound(x).eps_t_upper


pos = st.floats(0.05, 2.0)


@settings(max_examples=40, deadline=None)
@given(lp=pos, ls=pos, w=pos, d=pos, lw=st.floats(0, 2), k=st.floats(1.01, 10))
def test_layer_constants_monotone_in_d_min(lp, ls, w, d, lw, k):
    # every layer constant is nonincreasing as the minimal degree grows
    m = B.MpnnRegularity([lp, lp], [ls, ls], [0.3, 0.3], [0.2, 0.2])
    a = B.layer_constants(m, B.RgmConstants(w_inf=w, d_min=d, lip_w_inf=lw))
    b = B.layer_constants(m, B.RgmConstants(w_inf=w, d_min=d * k, lip_w_inf=lw))
    for name in ("D1", "D2", "D3"):
        assert np.all(getattr(b, name) <= getattr(a, name) * (1 + 1e-12) + 1e-15)
    assert np.array_equal(a.C1, b.C1) and np.array_equal(a.C2, b.C2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_terms_nonnegative(seed):
    rep = B.assemble_bound(bc.random_inputs(np.random.default_rng(seed)))
    assert rep.delta_gamma_theta >= 0 and rep.transfer_penalty >= 0 and rep.G_NN >= 0
    assert rep.eps_t_upper >= rep.source_risk
