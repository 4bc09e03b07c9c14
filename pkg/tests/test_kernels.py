import os
import subprocess
import sys

import numpy as np
import pytest

from compdown import _pykernels, kernels, simplex
from compdown.downscale import ilr_atprcok
from compdown.grid import CoarseFineMap, GridSpec, upscale_aitchison
from compdown.rng import RngStream
from compdown.simulation import bsgs, generate_synthetic_psfs, simulate_grf
from compdown.variogram import VariogramModel

_ckernels = pytest.importorskip("compdown._ckernels")


def test_lag_sums_parity(rng):
    z = rng.normal(size=(23, 31))
    z[rng.random(z.shape) < 0.1] = np.nan
    for dy, dx, w, nb, md in [(1.0, 1.0, 1.5, 8, 12.0), (20.0, 30.0, 45.0, 6, 270.0)]:
        a = _pykernels.lag_sums(z, dy, dx, w, nb, md)
        b = _ckernels.lag_sums(z, dy, dx, w, nb, md)
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
        np.testing.assert_allclose(a[2], b[2], rtol=1e-12)


def _with(monkeypatch, mod, fn):
    monkeypatch.setattr(kernels, "lag_sums", mod.lag_sums)
    monkeypatch.setattr(kernels, "sgs_path", mod.sgs_path)
    return fn()


def test_sequential_grf_parity(monkeypatch):
    model = VariogramModel("exponential", 0.05, 1.0, 120.0)
    spec = GridSpec(20, 18, 10.0)

    def run():
        return simulate_grf(model, spec, 4, method="sequential").values

    a = _with(monkeypatch, _pykernels, run)
    b = _with(monkeypatch, _ckernels, run)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_bsgs_parity(monkeypatch):
    spec = GridSpec(24, 24, 20.0)
    m = CoarseFineMap.from_factor(spec, 4)
    basis = simplex.default_basis(3)
    truth, tr = generate_synthetic_psfs(spec, 5, sill=0.5)
    coarse = upscale_aitchison(truth, m)
    res = ilr_atprcok(coarse, m, basis, models=[tr.model] * 2)

    def run():
        return bsgs(coarse, m, basis, res.trend, [tr.model] * 2, 2, RngStream(1)).ilr_stack(basis)

    a = _with(monkeypatch, _pykernels, run)
    b = _with(monkeypatch, _ckernels, run)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


@pytest.mark.parametrize("flag,expected", [("1", "python"), ("0", "cython")])
def test_backend_env_var(flag, expected):
    env = dict(os.environ, COMPDOWN_PURE_PYTHON=flag)
    out = subprocess.run([sys.executable, "-c", "from compdown import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
