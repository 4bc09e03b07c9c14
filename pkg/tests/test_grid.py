import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdown import simplex
from compdown.grid import (
    CoarseFineMap, CompositionField, GridError, GridSpec, ScalarField, crop_to_multiple, crop_values,
    perturb_ilr_field, refine_nearest, upscale_aitchison, upscale_euclidean,
)
from compdown.simplex import CompositionError


def random_field(spec, rng, sigma=0.7):
    b = simplex.default_basis(3)
    y = rng.normal(0, sigma, spec.shape + (2,))
    return CompositionField.from_ilr(spec, y, b)


def test_gridspec_validation():
    with pytest.raises(GridError):
        GridSpec(0, 3, 1.0)
    with pytest.raises(GridError):
        GridSpec(3, 3, 0.0)
    assert GridSpec(30, 24, 1.0).shape == (24, 30)


def test_centers_top_row_first():
    x, y = GridSpec(2, 3, 10.0, 100.0, 200.0).centers()
    np.testing.assert_allclose(x[0], [105, 115])
    np.testing.assert_allclose(y[:, 0], [225, 215, 205])


def test_upscale_euclidean_block_mean():
    spec = GridSpec(2, 2, 1.0)
    m = CoarseFineMap.from_factor(spec, 2)
    out = upscale_euclidean(ScalarField(spec, np.array([[1.0, 2.0], [3.0, 4.0]])), m)
    assert out.values.shape == (1, 1) and out.values[0, 0] == 2.5
    assert out.spec.cellsize == 2.0


def test_upscale_constant_fields(rng):
    spec = GridSpec(6, 4, 5.0)
    m = CoarseFineMap.from_factor(spec, 2)
    c = ScalarField(spec, np.full(spec.shape, 3.25))
    np.testing.assert_array_equal(upscale_euclidean(c, m).values, 3.25)
    comp = CompositionField(spec, np.broadcast_to([0.2, 0.3, 0.5], spec.shape + (3,)))
    a, e = upscale_aitchison(comp, m), upscale_euclidean(comp, m)
    np.testing.assert_allclose(a.values, e.values, atol=1e-15)
    np.testing.assert_allclose(refine_nearest(a, m).values, comp.values, atol=1e-15)
    np.testing.assert_array_equal(refine_nearest(upscale_euclidean(c, m), m).values, c.values)


def test_upscale_aitchison_two_member_block():
    # a 2x2 block filled evenly by the two compositions
    spec = GridSpec(2, 2, 1.0)
    v = np.array([[[0.5, 0.25, 0.25], [0.25, 0.5, 0.25]], [[0.25, 0.5, 0.25], [0.5, 0.25, 0.25]]])
    out = upscale_aitchison(CompositionField(spec, v), CoarseFineMap.from_factor(spec, 2))
    np.testing.assert_allclose(out.values[0, 0], [0.369398, 0.369398, 0.261204], atol=5e-7)


def test_unit_sum_and_ilr_commute(rng):
    spec = GridSpec(12, 9, 1.0)
    m = CoarseFineMap.from_factor(spec, 3)
    f = random_field(spec, rng)
    b = simplex.default_basis(3)
    e = upscale_euclidean(f, m)
    assert np.max(np.abs(e.values.sum(axis=-1) - 1)) < 1e-12
    y = f.ilr(b)
    ym = y.reshape(3, 3, 4, 3, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(upscale_aitchison(f, m).ilr(b), ym, atol=1e-12)


def test_nodata_propagates_to_block(rng):
    spec = GridSpec(4, 4, 1.0)
    m = CoarseFineMap.from_factor(spec, 2)
    v = random_field(spec, rng).values.copy()
    v[0, 1] = np.nan
    f = CompositionField(spec, v)
    for up in (upscale_euclidean(f, m), upscale_aitchison(f, m)):
        assert not up.valid[0, 0] and up.valid[1, 1] and up.valid[0, 1]


def test_spec_mismatch():
    m = CoarseFineMap.from_factor(GridSpec(4, 4, 1.0), 2)
    with pytest.raises(GridError):
        upscale_euclidean(ScalarField(GridSpec(4, 4, 2.0), np.zeros((4, 4))), m)
    with pytest.raises(GridError):
        CoarseFineMap.from_factor(GridSpec(5, 4, 1.0), 2)


def test_invalid_composition_pixel_is_named():
    v = np.full((2, 2, 3), 1 / 3)
    v[1, 0] = [0.5, 0.6, 0.1]
    with pytest.raises(CompositionError, match=r"\(1, 0\)"):
        CompositionField(GridSpec(2, 2, 1.0), v)


def test_membership_partition():
    spec = GridSpec(6, 9, 1.0)
    m = CoarseFineMap.from_factor(spec, 3)
    seen = []
    for R in range(3):
        for C in range(2):
            px = m.fine_pixels_of(R, C)
            assert all(m.block_of(r, c) == (R, C) for r, c in px)
            seen.extend(px)
    assert sorted(seen) == [(r, c) for r in range(9) for c in range(6)]
    with pytest.raises(IndexError):
        m.block_of(9, 0)


def test_identity_map():
    spec = GridSpec(3, 2, 1.0)
    m = CoarseFineMap.from_factor(spec, 1)
    assert all(m.block_of(r, c) == (r, c) for r in range(2) for c in range(3))


def test_nearest_blocks():
    spec = GridSpec(9, 9, 1.0)
    m = CoarseFineMap.from_factor(spec, 3)
    assert m.nearest_blocks(4, 4, 1) == [(1, 1)]
    assert sorted(m.nearest_blocks(0, 0, 9)) == [(R, C) for R in range(3) for C in range(3)]
    # pixel (4, 4) is equidistant from the four edge neighbours; order is lexicographic
    assert m.nearest_blocks(4, 4, 5) == [(1, 1), (0, 1), (1, 0), (1, 2), (2, 1)]
    valid = np.ones((3, 3), bool)
    valid[1, 1] = False
    assert (1, 1) not in m.nearest_blocks(4, 4, 3, valid)


def test_nearest_blocks_brute_force(rng):
    spec = GridSpec(12, 8, 1.0)
    m = CoarseFineMap.from_factor(spec, 4)
    for _ in range(20):
        r, c = int(rng.integers(8)), int(rng.integers(12))
        got = m.nearest_blocks(r, c, 4)
        d = sorted(((r + 0.5 - (R * 4 + 2)) ** 2 + (c + 0.5 - (C * 4 + 2)) ** 2, R, C) for R in range(2) for C in range(3))
        assert got == [(R, C) for _, R, C in d[:4]]


def test_crop_to_multiple_keeps_top_left():
    spec = GridSpec(150, 137, 20.0, 0.0, 0.0)
    sub = crop_to_multiple(spec, 15)
    assert sub.shape == (135, 150)
    assert sub.yll == 40.0
    x, y = sub.centers()
    x0, y0 = spec.centers()
    assert y[0, 0] == y0[0, 0]
    v = np.arange(spec.size, dtype=float).reshape(spec.shape)
    assert crop_values(v, sub).shape == sub.shape


def test_perturb_ilr_field(rng):
    spec = GridSpec(100, 100, 1.0)
    b = simplex.default_basis(3)
    f = random_field(spec, rng)
    np.testing.assert_array_equal(perturb_ilr_field(f, b, 0.0, np.random.default_rng(1)).values, f.values)
    a = perturb_ilr_field(f, b, 0.3, np.random.default_rng(5))
    c = perturb_ilr_field(f, b, 0.3, np.random.default_rng(5))
    np.testing.assert_array_equal(a.values, c.values)
    d = (a.ilr(b) - f.ilr(b)).reshape(-1, 2)
    assert np.all(np.abs(d.var(axis=0, ddof=1) / 0.3 - 1) < 0.05)
    with pytest.raises(ValueError):
        perturb_ilr_field(f, b, -1.0, np.random.default_rng(1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_upscale_geometries_agree_on_ilr_means(f, R, C, seed):
    spec = GridSpec(C * f, R * f, 2.0)
    m = CoarseFineMap.from_factor(spec, f)
    fld = random_field(spec, np.random.default_rng(seed))
    b = simplex.default_basis(3)
    y = fld.ilr(b)
    ym = upscale_euclidean(ScalarField(spec, y[..., 0]), m).values
    np.testing.assert_allclose(upscale_aitchison(fld, m).ilr(b)[..., 0], ym, atol=1e-12)
