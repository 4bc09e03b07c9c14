import numpy as np
import pytest
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compdown import simplex


def compositions(p=3, n=None, lo=-4.0, hi=4.0):
    """Strategy for strictly positive unit-sum vectors via bounded log-parts."""
    shape = (p,) if n is None else (n, p)
    logs = arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False))
    return logs.map(lambda z: simplex.clr_inv(z))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_sbp(p, rng):
    """Random nested-tuple partition of ``p`` parts."""
    nodes = [int(i) for i in rng.permutation(p)]
    while len(nodes) > 1:
        i = int(rng.integers(len(nodes) - 1))
        nodes[i : i + 2] = [(nodes[i], nodes[i + 1])]
    return nodes[0]


def prediction_gap(rng, dense=None):
    """Build a random downscaling instance and return the largest per-pixel
    Aitchison distance between the simplex-side evaluation and the ILR-side
    prediction, plus a description of the instance."""
    from compdown.downscale import DownscaleConfig, ilr_atprcok, simplex_predictor
    from compdown.grid import CoarseFineMap, CompositionField, GridSpec, ScalarField
    from compdown.kriging import KrigingConfig, LinearCoregionalization
    from compdown.variogram import VariogramModel

    while True:
        Rn, Cn = (int(v) for v in rng.integers(2, 6, 2))
        if 4 <= Rn * Cn <= 25:
            break
    f = int(rng.integers(1, 4))
    fine = GridSpec(Cn * f, Rn * f, 10.0)
    m = CoarseFineMap.from_factor(fine, f)
    basis = simplex.build_sbp_basis(random_sbp(3, rng))
    Z = simplex.closure(rng.uniform(0.05, 1.0, (Rn, Cn, 3)))
    coarse = CompositionField(m.coarse, Z)
    ncov = int(rng.integers(0, 3))
    cov = {f"u{i}": ScalarField(fine, rng.normal(size=fine.shape)) for i in range(ncov)}
    nbr = int(rng.integers(1, Rn * Cn + 1))
    dense = bool(rng.integers(2)) if dense is None else dense
    a1, a2 = (float(v) for v in rng.uniform(10, 60, 2))
    if dense:
        L = rng.normal(size=(2, 2))
        lmc = LinearCoregionalization(
            (VariogramModel("spherical", 0, 1, a1), VariogramModel("exponential", 0, 1, a2)),
            np.stack([L @ L.T, np.diag(rng.uniform(0.05, 0.5, 2))]),
        )
        cfg = DownscaleConfig(kriging=KrigingConfig(neighbors=nbr), coregionalization=lmc)
        res = ilr_atprcok(coarse, m, basis, cov, config=cfg)
    else:
        models = [VariogramModel("spherical", float(rng.uniform(0, 0.2)), 1.0, a1),
                  VariogramModel("gaussian", 0.01, float(rng.uniform(0.2, 2)), a2)]
        res = ilr_atprcok(coarse, m, basis, cov, models=models, config=DownscaleConfig(kriging=KrigingConfig(neighbors=nbr)))
    sp = simplex_predictor(coarse, res.kriging, res.trend, basis, m, cov)
    gap = float(np.nanmax(simplex.dist(sp.values, res.prediction.values)))
    return gap, {"blocks": Rn * Cn, "f": f, "neighbors": nbr, "covariates": ncov, "dense": dense}


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one acceptance line; the lines are repeated in the terminal summary."""
    lines = request.config.acceptance_lines

    def emit(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
