import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from compdown.grid import CoarseFineMap, GridSpec
from compdown.kriging import (
    KrigingConfig, KrigingError, LinearCoregionalization, Neighborhoods, block_block_cov, cokrige, point_block_cov,
    predict_residual_field, solve_atpk,
)
from compdown.variogram import BlockCovarianceCache, VariogramModel

SPH = VariogramModel("spherical", 0.05, 1.0, 70.0)


def brute_ok(model, pts, vals, target):
    """Ordinary kriging from scratch: bordered system over point covariances."""
    n = len(pts)
    d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    A = np.ones((n + 1, n + 1))
    A[:n, :n] = model.cov(d)
    A[n, n] = 0.0
    b = np.ones(n + 1)
    b[:n] = model.cov(np.hypot(*(pts - target).T))
    x = np.linalg.solve(A, b)
    lam, mu = x[:n], x[n]
    return lam @ vals, lam, model.sill - lam @ b[:n] - mu


def nullspace_atpk(model, m, blocks, target):
    """Minimize the kriging variance over weights summing to one, by
    parametrizing the constraint's null space (no Lagrange multiplier)."""
    n = len(blocks)
    S = np.array([[block_block_cov(model, a, b, m) for b in blocks] for a in blocks])
    s = np.array([point_block_cov(model, target, b, m) for b in blocks])
    lam0 = np.full(n, 1.0 / n)
    if n == 1:
        return lam0
    N = scipy.linalg.null_space(np.ones((1, n)))
    z = np.linalg.solve(N.T @ S @ N, N.T @ (s - S @ lam0))
    return lam0 + N @ z


def test_block_cov_examples():
    m1 = CoarseFineMap.from_factor(GridSpec(4, 4, 10.0), 1)
    assert block_block_cov(SPH, (0, 0), (1, 2), m1) == pytest.approx(float(SPH.cov(np.hypot(10, 20))))
    assert point_block_cov(SPH, (0, 0), (1, 2), m1) == pytest.approx(float(SPH.cov(np.hypot(10, 20))))
    nug = VariogramModel("spherical", 0.7, 0.0, 1.0)
    m = CoarseFineMap.from_factor(GridSpec(8, 8, 10.0), 4)
    assert block_block_cov(nug, (1, 1), (1, 1), m) == pytest.approx(0.7 / 16)
    assert point_block_cov(nug, (5, 6), (1, 1), m) == pytest.approx(0.7 / 16)
    assert point_block_cov(SPH, (0, 0), (1, 1), CoarseFineMap.from_factor(GridSpec(40, 40, 10.0), 4)) >= 0
    far = CoarseFineMap.from_factor(GridSpec(40, 40, 10.0), 4)
    assert point_block_cov(VariogramModel("spherical", 0, 1, 30.0), (0, 0), (9, 9), far) == 0.0
    assert block_block_cov(SPH, (0, 1), (1, 0), m) == block_block_cov(SPH, (1, 0), (0, 1), m)


def test_cache_matches_brute_force():
    m = CoarseFineMap.from_factor(GridSpec(9, 12, 10.0), 3)
    cache = BlockCovarianceCache.from_model(SPH, m)
    for K1 in [(0, 0), (1, 2), (3, 1)]:
        for K2 in [(0, 0), (2, 2), (3, 0), (0, 2)]:
            dR, dC = K2[0] - K1[0], K2[1] - K1[1]
            assert cache.bb[dR + cache.lag_rows, dC + cache.lag_cols] == pytest.approx(block_block_cov(SPH, K1, K2, m), abs=1e-14)
            for k in m.fine_pixels_of(*K1)[::4]:
                a, b = k[0] - K1[0] * 3, k[1] - K1[1] * 3
                assert cache.pb[a, b, dR + cache.lag_rows, dC + cache.lag_cols] == pytest.approx(
                    point_block_cov(SPH, k, K2, m), abs=1e-14)
    assert cache.c0 == SPH.sill
    np.testing.assert_array_equal(cache.bb, cache.bb[::-1, ::-1])


@pytest.mark.parametrize("n", [5, 6, 8])
@pytest.mark.parametrize("neighbors", [None, 9])
def test_f1_equals_point_kriging(rng, n, neighbors):
    spec = GridSpec(n, n, 10.0)
    m = CoarseFineMap.from_factor(spec, 1)
    e = rng.normal(size=(n, n))
    sol = predict_residual_field(e, SPH, m, KrigingConfig(neighbors=neighbors))
    x, y = np.meshgrid(np.arange(n) * 10.0, np.arange(n) * 10.0)
    for r, c in [(0, 0), (n // 2, 1), (n - 1, n - 2)]:
        blk, w = sol.pixel_weights(r, c)
        pts = np.stack([blk // n, blk % n], -1) * 10.0
        pred, lam, var = brute_ok(SPH, pts, e.ravel()[blk], np.array([r, c]) * 10.0)
        assert abs(sol.prediction[r, c, 0] - pred) < 1e-8
        np.testing.assert_allclose(w[:, 0, 0], lam, atol=1e-8)
        assert abs(sol.variance[r, c, 0] - var) < 1e-8
    # data locations are reproduced exactly
    np.testing.assert_allclose(sol.prediction[..., 0], e, atol=1e-10)


@pytest.mark.parametrize("f,neighbors", [(2, None), (3, 6), (2, 4), (4, 1)])
def test_nullspace_oracle(rng, f, neighbors):
    m = CoarseFineMap.from_factor(GridSpec(5 * f, 4 * f, 10.0), f)
    e = rng.normal(size=m.coarse.shape)
    sol = predict_residual_field(e, SPH, m, KrigingConfig(neighbors=neighbors))
    for _ in range(6):
        r, c = int(rng.integers(m.fine.nrows)), int(rng.integers(m.fine.ncols))
        blk, w = sol.pixel_weights(r, c)
        blocks = [divmod(int(b), m.coarse.ncols) for b in blk]
        lam = nullspace_atpk(SPH, m, blocks, (r, c))
        np.testing.assert_allclose(w[:, 0, 0], lam, atol=1e-8)


def test_solve_atpk_matches_field(rng):
    m = CoarseFineMap.from_factor(GridSpec(30, 24, 10.0), 6)
    e = rng.normal(size=m.coarse.shape)
    cfg = KrigingConfig(neighbors=9)
    sol = predict_residual_field(e, SPH, m, cfg)
    p, lam, var, blocks = solve_atpk((7, 8), e, SPH, m, cfg)
    assert p == pytest.approx(sol.prediction[7, 8, 0], abs=1e-12)
    assert var == pytest.approx(sol.variance[7, 8, 0], abs=1e-12)
    assert abs(lam.sum() - 1) < 1e-10


def test_single_neighbor_and_symmetry():
    m = CoarseFineMap.from_factor(GridSpec(8, 4, 10.0), 4)
    e = np.array([[2.0, -1.0]])
    p, lam, _, blocks = solve_atpk((1, 1), e, SPH, m, KrigingConfig(neighbors=1))
    assert blocks == [(0, 0)] and lam[0] == pytest.approx(1.0) and p == pytest.approx(2.0)
    # a 1x2 coarse grid, pixels at columns 3 and 4 straddle the midline, so a
    # 2-block system there is symmetric about it
    sol = predict_residual_field(np.array([[1.0, 1.0]]), SPH, CoarseFineMap.from_factor(GridSpec(4, 2, 10.0), 2))
    blk, w = sol.pixel_weights(0, 1)
    blk2, w2 = sol.pixel_weights(0, 2)
    np.testing.assert_allclose(w[::-1, 0, 0], w2[:, 0, 0], atol=1e-14)


def test_equidistant_blocks_share_weight(rng):
    # centre pixel of the middle block in a 1x3 row of 3x3 blocks
    m = CoarseFineMap.from_factor(GridSpec(9, 3, 10.0), 3)
    p, lam, _, blocks = solve_atpk((1, 4), rng.normal(size=(1, 3)), SPH, m, KrigingConfig(neighbors=3))
    assert blocks == [(0, 1), (0, 0), (0, 2)]
    assert lam[1] == pytest.approx(lam[2], abs=1e-14)
    # pixels of a nodata block are not predicted
    sol = predict_residual_field(np.array([[1.0, np.nan, 3.0]]), SPH, m, KrigingConfig(neighbors=None))
    assert np.isnan(sol.prediction[1, 4, 0])


def test_zero_and_constant_residuals(rng):
    m = CoarseFineMap.from_factor(GridSpec(20, 15, 10.0), 5)
    for nbr in (None, 4):
        sol = predict_residual_field(np.zeros(m.coarse.shape), SPH, m, KrigingConfig(neighbors=nbr))
        assert np.all(sol.prediction == 0)
        sol = predict_residual_field(np.full(m.coarse.shape, 2.5), SPH, m, KrigingConfig(neighbors=nbr))
        np.testing.assert_allclose(sol.prediction, 2.5, atol=1e-10)
        np.testing.assert_allclose(sol.weights[..., 0, 0].sum(axis=1), 1.0, atol=1e-10)


def test_global_coherence(rng):
    m = CoarseFineMap.from_factor(GridSpec(30, 24, 10.0), 6)
    e = rng.normal(size=m.coarse.shape)
    sol = predict_residual_field(e, VariogramModel("spherical", 0.0, 1.0, 100.0), m, KrigingConfig(neighbors=None))
    up = sol.prediction[..., 0].reshape(4, 6, 5, 6).mean(axis=(1, 3))
    assert np.max(np.abs(up - e) / np.maximum(np.abs(e), 1e-12)) < 1e-6


def test_components_match_scalar_runs(rng):
    m = CoarseFineMap.from_factor(GridSpec(16, 12, 10.0), 4)
    e = rng.normal(size=m.coarse.shape + (2,))
    models = [SPH, VariogramModel("exponential", 0.0, 2.0, 150.0)]
    sol = predict_residual_field(e, models, m, KrigingConfig(neighbors=5))
    for j in range(2):
        one = predict_residual_field(e[..., j], models[j], m, KrigingConfig(neighbors=5))
        np.testing.assert_array_equal(sol.prediction[..., j], one.prediction[..., 0])
    with pytest.raises(KrigingError):
        predict_residual_field(e, [SPH], m)


def test_dense_lmc_with_diagonal_matrices_matches_independent(rng):
    m = CoarseFineMap.from_factor(GridSpec(12, 12, 10.0), 3)
    e = rng.normal(size=m.coarse.shape + (2,))
    lmc = LinearCoregionalization((SPH,), np.array([[[1.0, 0.0], [0.0, 3.0]]]))
    dense = cokrige(e, lmc, m, KrigingConfig(neighbors=6))
    ind = predict_residual_field(e, [SPH, SPH.scaled(3.0)], m, KrigingConfig(neighbors=6))
    np.testing.assert_allclose(dense.prediction, ind.prediction, atol=1e-10)
    np.testing.assert_allclose(dense.weights.sum(axis=1), np.broadcast_to(np.eye(2), (m.fine.size, 2, 2)), atol=1e-10)


def test_nodata_blocks_are_skipped(rng):
    m = CoarseFineMap.from_factor(GridSpec(12, 12, 10.0), 3)
    e = rng.normal(size=m.coarse.shape)
    e[1, 2] = np.nan
    sol = predict_residual_field(e, SPH, m, KrigingConfig(neighbors=5))
    assert np.all(np.isnan(sol.prediction[3:6, 6:9]))
    assert np.isfinite(sol.prediction[0:3]).all()
    assert not np.any(sol.neighbors.blocks == 1 * 4 + 2)
    with pytest.raises(KrigingError):
        solve_atpk((4, 7), e, SPH, m)


def test_degenerate_system_is_reported():
    # a zero model makes every covariance vanish and the system singular
    m = CoarseFineMap.from_factor(GridSpec(4, 4, 10.0), 2)
    flat = VariogramModel("spherical", 0.0, 0.0, 10.0)
    with pytest.raises(KrigingError, match="singular"):
        predict_residual_field(np.ones((2, 2)), flat, m, KrigingConfig(neighbors=3))


def test_neighborhoods_match_nearest_blocks(rng):
    m = CoarseFineMap.from_factor(GridSpec(21, 18, 10.0), 3)
    valid = rng.random(m.coarse.shape) > 0.2
    valid[0, 0] = True
    nb = Neighborhoods(m, 7, valid)
    for r in range(0, 18, 2):
        for c in range(0, 21, 3):
            R, C = m.block_of(r, c)
            row = nb.blocks[r * 21 + c]
            if not valid[R, C]:
                assert np.all(row == -1)
                continue
            assert list(row) == [a * 7 + b for a, b in m.nearest_blocks(r, c, 7, valid)]
            assert R * 7 + C in row


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_permutation_invariance(seed, k):
    g = np.random.default_rng(seed)
    m = CoarseFineMap.from_factor(GridSpec(12, 12, 10.0), 3)
    e = g.normal(size=m.coarse.shape)
    r, c = int(g.integers(12)), int(g.integers(12))
    blocks = m.nearest_blocks(r, c, k)
    perm = g.permutation(k)
    w1 = nullspace_atpk(SPH, m, blocks, (r, c))
    w2 = nullspace_atpk(SPH, m, [blocks[i] for i in perm], (r, c))
    v = np.array([e[b] for b in blocks])
    assert abs(w1 @ v - w2 @ v[perm]) < 1e-12
    p, lam, _, got = solve_atpk((r, c), e, SPH, m, KrigingConfig(neighbors=k))
    assert abs(p - w1 @ v) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.sampled_from([None, 1, 4, 9]))
def test_weights_sum_to_one(seed, f, nbr):
    g = np.random.default_rng(seed)
    m = CoarseFineMap.from_factor(GridSpec(4 * f, 3 * f, 10.0), f)
    sol = predict_residual_field(g.normal(size=m.coarse.shape), SPH, m, KrigingConfig(neighbors=nbr))
    np.testing.assert_allclose(sol.weights[..., 0, 0].sum(axis=1), 1.0, atol=1e-10)
    assert np.all(sol.variance > -1e-10)
