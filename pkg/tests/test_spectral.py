import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rgmshift import spectral as S
from rgmshift._validation import InvalidArgument
from rgmshift.rgm import Graph


def _graph(edges, n):
    A = np.zeros((n, n))
    for i, j in edges:
        A[i, j] = A[j, i] = 1
    return Graph(n, A, np.zeros((n, 1)), binary=True)


def test_wl_hand_example():
    # path 0-1-2 versus triangle, all nodes start with the same label
    path = _graph([(0, 1), (1, 2)], 3)
    tri = _graph([(0, 1), (1, 2), (0, 2)], 3)
    lab = [0, 0, 0]
    # h = 0: both graphs have three nodes of one label
    assert S.wl_kernel(path, tri, 0, lab, lab) == 9.0
    # h = 1: path has signatures {0|0}, {0|0,0}, {0|0}; triangle has {0|0,0} x3
    assert S.wl_kernel(path, tri, 1, lab, lab) == 9.0 + 1 * 3
    assert S.wl_kernel(path, path, 1, lab, lab) == 9.0 + 2 * 2 + 1 * 1


def test_wl_gram_matches_pairwise_kernel():
    gs = [_graph([(0, 1), (1, 2)], 3), _graph([(0, 1), (1, 2), (0, 2)], 3), _graph([(0, 1)], 4)]
    K = S.wl_gram(gs, 2)
    for i in range(3):
        for j in range(3):
            assert K[i, j] == S.wl_kernel(gs[i], gs[j], 2)


def test_wl_isomorphic_graphs_identical_features():
    g1 = _graph([(0, 1), (1, 2), (2, 3)], 4)
    g2 = _graph([(3, 2), (2, 0), (0, 1)], 4)
    X = S.wl_feature_matrix([g1, g2], 3)
    assert np.array_equal(X[0], X[1])


def test_degree_bins_edges():
    assert S.degree_bins([0, 5, 10], 10, 0, 10).tolist() == [0, 5, 9]
    assert S.degree_bins([3, 3]).tolist() == [0, 0]


def test_jacobi_matches_eigvalsh():
    rng = np.random.default_rng(0)
    for n in (1, 2, 5, 20):
        M = rng.standard_normal((n, n))
        M = M + M.T
        lam, _ = S.jacobi_eigenvalues(M, tol=1e-14)
        assert np.allclose(np.sort(lam), np.linalg.eigvalsh(M), atol=1e-9)


def test_normalize_gram_and_errors():
    K = np.array([[4.0, 2.0], [2.0, 9.0]])
    Kn = S.normalize_gram(K)
    assert np.allclose(Kn, [[1, 1 / 3], [1 / 3, 1]])
    with pytest.raises(InvalidArgument):
        S.normalize_gram(np.array([[0.0, 0.0], [0.0, 1.0]]))


def test_truncation_rank_hand():
    spec = S.Spectrum(np.array([0.5, 0.3, 0.15, 0.05]), 4)
    assert S.truncation_rank(spec, 0.5) == 1
    assert S.truncation_rank(spec, 0.2) == 2
    assert S.truncation_rank(spec, 0.05) == 3
    assert S.truncation_rank(spec, 0.0) == 4
    with pytest.raises(InvalidArgument):
        S.truncation_rank(spec, 1.5)


def test_empirical_spectrum_trace_and_negatives():
    K = np.diag([3.0, 1.0, -1e-6])
    spec = S.empirical_spectrum(K)
    assert spec.eigenvalues.tolist() == pytest.approx([1.0, 1 / 3, -1e-6 / 3])
    assert spec.has_negative
    assert spec.negative_mass == pytest.approx(1e-6 / 3)


def test_spectrum_report_rows():
    rng = np.random.default_rng(1)
    E = rng.standard_normal((10, 3))
    rep = S.spectrum_report([S.dot_product_gram(E)], eps_list=(0.1, 1e-9))
    assert rep["rows"][1]["mean"] <= 3
    assert rep["rows"][0]["mean"] <= rep["rows"][1]["mean"]


def test_estimator_api():
    gs = [_graph([(0, 1), (1, 2)], 3), _graph([(0, 1), (1, 2), (0, 2)], 3), _graph([(0, 1)], 4)]
    est = S.WlSpectrum(h=1).fit(gs)
    assert est.spectrum_.eigenvalues.sum() == pytest.approx(1.0)
    assert est.transform(gs).shape[0] == 3
    assert 1 <= est.truncation_rank(0.01) <= 3


sym = arrays(np.float64, (6, 6), elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(M=sym)
def test_jacobi_property(M):
    M = M + M.T
    lam, _ = S.jacobi_eigenvalues(M, tol=1e-13)
    assert np.allclose(np.sort(lam), np.linalg.eigvalsh(M), atol=1e-8 * max(1.0, np.abs(M).max()))


@settings(max_examples=30, deadline=None)
@given(E=arrays(np.float64, (8, 3), elements=st.floats(0.1, 3)))
def test_rank_nonincreasing_in_eps(E):
    spec = S.empirical_spectrum(S.normalize_gram(S.dot_product_gram(E)))
    assert spec.eigenvalues.sum() == pytest.approx(1.0, abs=1e-10)
    ranks = [S.truncation_rank(spec, e) for e in (0.0, 0.001, 0.01, 0.1, 0.5, 1.0)]
    assert all(a >= b for a, b in zip(ranks, ranks[1:]))
