import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spatial_ldf import reweight as rw
from spatial_ldf.data import DataError
from oracles import brute_nearest_counts, kmm_grid_minimum

small_ints = st.integers(-6, 6).map(float)


def test_kernel_eval_examples():
    cfg = rw.KernelConfig("rbf", gamma=1.0)
    assert rw.kernel_eval([1.0, 2.0], [1.0, 2.0], cfg) == 1.0
    assert rw.kernel_eval([0.0, 0.0], [1.0, 0.0], cfg) == pytest.approx(math.exp(-1), abs=1e-15)
    poly = rw.KernelConfig("poly", gamma=1.0, degree=2, coef0=1.0)
    assert rw.kernel_eval([1.0, 0.0], [1.0, 5.0], poly) == 4.0
    with pytest.raises(ValueError):
        rw.kernel_eval([1.0], [1.0, 2.0], cfg)


def test_kernel_config_validation():
    with pytest.raises(ValueError):
        rw.KernelConfig("linear")
    with pytest.raises(ValueError):
        rw.KernelConfig(gamma=0.0)


@given(arrays(np.float64, (4, 2), elements=small_ints), arrays(np.float64, (3, 2), elements=small_ints))
def test_kernel_matrix_matches_eval(A, B):
    for cfg in (rw.KernelConfig("rbf", 0.3), rw.KernelConfig("poly", 0.5, 3, 1.0)):
        K = rw.kernel_matrix(A, B, cfg)
        for i in range(4):
            for j in range(3):
                assert K[i, j] == pytest.approx(rw.kernel_eval(A[i], B[j], cfg), rel=1e-12, abs=1e-12)


def test_weight_vector_validation():
    with pytest.raises(rw.ReweightError):
        rw.WeightVector(np.array([1.0, -1.0]))
    with pytest.raises(rw.ReweightError):
        rw.WeightVector(np.array([np.nan]))
    w = rw.WeightVector.uniform(3)
    assert len(w) == 3 and w.method_tag == "uniform"
    with pytest.raises(ValueError):
        w.weights[0] = 2.0


# -- NNW ----------------------------------------------------------------------


def test_nnw_example():
    w = rw.nnw_weights([0.0, 10.0], [0.1, 0.2, 9.9])
    np.testing.assert_allclose(w.weights, [4 / 3, 2 / 3], rtol=1e-15)


def test_nnw_identical_sets_and_all_neighbors(rng):
    X = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(rw.nnw_weights(X, X).weights, 1.0)
    T = rng.normal(size=(7, 3))
    np.testing.assert_allclose(rw.nnw_weights(X, T, n_neighbors=30).weights, 1.0)


def test_nnw_errors():
    with pytest.raises(DataError):
        rw.nnw_weights([0.0], [1.0], n_neighbors=2)
    with pytest.raises(DataError):
        rw.nnw_weights([0.0], np.zeros((0, 1)))


@given(
    arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=small_ints),
    arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=small_ints),
    st.integers(1, 4),
)
def test_nnw_matches_brute_force(S, T, k):
    k = min(k, len(S))
    np.testing.assert_array_equal(rw.nearest_counts(S, T, k), brute_nearest_counts(S, T, k))
    w = rw.nnw_weights(S, T, k).weights
    assert w.mean() == pytest.approx(1.0, abs=1e-12)


# -- KLIEP ----------------------------------------------------------------------


def test_kliep_identical_sets(rng):
    X = rng.normal(size=(100, 2))
    w = rw.kliep_weights(X, X, rw.KernelConfig("rbf", 0.5)).weights
    assert abs(w.mean() - 1) < 1e-6
    assert w.std() < 0.2


def test_kliep_ratio_direction(rng):
    src = rng.uniform(0, 2, size=500)
    tgt = rng.uniform(0, 1, size=500)
    w = rw.kliep_weights(src, tgt, rw.KernelConfig("rbf", 0.5)).weights
    assert w[src < 1].mean() > w[src > 1].mean()


def test_kliep_history_non_decreasing(rng):
    res = rw.kliep_weights(rng.normal(size=(60, 2)), rng.normal(0.5, 1, size=(40, 2)))
    h = np.array(res.history)
    assert np.all(np.diff(h) >= 0) and len(h) > 1


def test_kliep_odd_poly_rejected(rng):
    with pytest.raises(ValueError):
        rw.kliep_weights(rng.normal(size=(5, 1)), rng.normal(size=(5, 1)), rw.KernelConfig("poly", degree=3))


# -- KMM ----------------------------------------------------------------------


def test_project_box_band_is_feasible_and_optimal(rng):
    for _ in range(20):
        v = rng.normal(0, 3, size=6)
        B, lo, hi = 2.0, 4.0, 7.0
        w = rw.project_box_band(v, B, lo, hi)
        assert np.all((w >= 0) & (w <= B))
        assert lo - 1e-9 <= w.sum() <= hi + 1e-9
        # no feasible random point is closer
        for _ in range(200):
            u = rng.uniform(0, B, size=6)
            if lo <= u.sum() <= hi:
                assert np.sum((w - v) ** 2) <= np.sum((u - v) ** 2) + 1e-9


def test_kmm_toy_matches_grid_search():
    K = np.array([[1.0, 0.4], [0.4, 0.8]])
    kappa = np.array([1.3, 0.2])
    B, eps = 2.0, rw.default_kmm_eps(2)
    res = rw.solve_kmm_qp(K, kappa, B, eps, max_iter=20000, tol=1e-14)
    best = kmm_grid_minimum(K, kappa, B, eps)
    assert abs(rw.kmm_objective(res.w, K, kappa) - best) < 1e-4
    assert rw.kmm_objective(res.w, K, kappa) <= best + 1e-12


def test_kmm_identical_sets(rng):
    X = rng.normal(size=(80, 3))
    res = rw.kmm_weights(X, X, rw.KernelConfig("rbf", 0.5))
    w = res.weights
    assert np.all((w >= 0.8) & (w <= 1.2))
    K = rw.kernel_matrix(X, X, rw.KernelConfig("rbf", 0.5))
    kappa = K.sum(axis=1)
    assert rw.kmm_objective(w, K, kappa) <= rw.kmm_objective(np.ones(80), K, kappa) + 1e-9


@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
def test_kmm_constraints(seed, B):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(30, 2))
    T = rng.normal(1.0, 0.5, size=(12, 2))
    res = rw.kmm_weights(S, T, rw.KernelConfig("rbf", 0.5), B=B, max_iter=300)
    w = res.weights
    eps = rw.default_kmm_eps(30)
    assert np.all((w >= 0) & (w <= B))
    assert abs(w.sum() - 30) <= 30 * eps + 1e-9
    assert np.all(np.diff(res.history) <= 1e-12)


@given(st.integers(0, 10_000))
def test_reweighters_are_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(15, 2))
    T = rng.normal(0.3, 1, size=(10, 2))
    perm = rng.permutation(15)
    cfg = rw.KernelConfig("rbf", 0.5)
    for fn in (lambda s, t: rw.kmm_weights(s, t, cfg, max_iter=500, tol=1e-12),
               lambda s, t: rw.kliep_weights(s, t, cfg)):
        a = fn(S, T).weights
        b = fn(S[perm], T).weights
        np.testing.assert_allclose(b, a[perm], atol=1e-6)


def test_kmm_errors():
    with pytest.raises(ValueError):
        rw.kmm_weights(np.zeros((2, 1)), np.zeros((2, 1)), B=0.0)
    with pytest.raises(DataError):
        rw.kmm_weights(np.zeros((0, 1)), np.zeros((2, 1)))
