"""Gaussian random fields, synthetic compositions and block sequential simulation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from . import kernels, simplex
from .grid import CoarseFineMap, CompositionField, GridSpec, ScalarField
from .kriging import Neighborhoods
from .rng import RngStream, as_generator
from .simplex import SimplexBasis
from .trend import TrendModel, predict_trend, upscale_covariates
from .variogram import BlockCovarianceCache, VariogramModel

DENSE_MAX_NODES = 20_000
JITTER = 1e-10


class SimulationError(RuntimeError):
    pass


def _lag_table(model: VariogramModel, spec: GridSpec) -> np.ndarray:
    dr = np.arange(spec.nrows)[:, None]
    dc = np.arange(spec.ncols)[None, :]
    return np.ascontiguousarray(model.cov(np.hypot(dr, dc) * spec.cellsize))


def _dense_factor(model: VariogramModel, spec: GridSpec) -> np.ndarray:
    table = _lag_table(model, spec)
    N = spec.size
    r, c = np.divmod(np.arange(N), spec.ncols)
    C = np.empty((N, N))
    step = max(1, 2_000_000 // N)
    for i0 in range(0, N, step):
        i1 = min(N, i0 + step)
        C[i0:i1] = table[np.abs(r[i0:i1, None] - r[None, :]), np.abs(c[i0:i1, None] - c[None, :])]
    C[np.diag_indices(N)] += JITTER * model.sill
    try:
        return scipy.linalg.cholesky(C, lower=True, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SimulationError(f"covariance matrix is not positive definite after jitter: {exc}") from None


def search_offsets(radius: int) -> np.ndarray:
    """Pixel offsets within ``radius`` (excluding 0), nearest first, ties by (row, col)."""
    d = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(d, d, indexing="ij")
    dr, dc = dr.ravel(), dc.ravel()
    d2 = dr * dr + dc * dc
    keep = (d2 > 0) & (d2 <= radius * radius)
    dr, dc, d2 = dr[keep], dc[keep], d2[keep]
    order = np.lexsort((dc, dr, d2))
    return np.ascontiguousarray(np.stack([dr[order], dc[order]], axis=1).astype(np.int32))


def multigrid_path(spec: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Random visiting order that covers successively finer sub-lattices.

    Nodes on the stride-``2**L`` lattice come first (random order within a
    level), then the remaining nodes of stride ``2**(L-1)``, down to stride 1.
    Early, widely spaced nodes carry the long-range structure that a small
    conditioning set would otherwise lose.
    """
    r, c = np.divmod(np.arange(spec.size), spec.ncols)
    top = max(0, int(math.floor(math.log2(max(spec.nrows, spec.ncols)))) - 2)
    level = np.zeros(spec.size, dtype=np.int64)
    for L in range(1, top + 1):
        s = 2**L
        level[(r % s == 0) & (c % s == 0)] = L
    key = rng.random(spec.size)
    return np.lexsort((key, -level)).astype(np.int64)


def _sequential(model: VariogramModel, spec: GridSpec, gen: np.random.Generator, n_prev: int) -> np.ndarray:
    N = spec.size
    path = multigrid_path(spec, gen)
    noise = gen.standard_normal(N)
    radius = int(min(max(spec.nrows, spec.ncols), math.ceil(model.range / spec.cellsize) + 1))
    values = np.zeros(N)
    known = np.zeros(N, dtype=np.uint8)
    kvar = np.zeros(N)
    failed = kernels.sgs_path(
        values, known, spec.nrows, spec.ncols, path, noise, search_offsets(radius), _lag_table(model, spec),
        np.zeros((N, 0), dtype=np.int32), np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1, 1, 1)),
        1, 1, 1, float(model.sill), int(n_prev), False, 1.0, kvar,
    )
    if failed >= 0:
        raise SimulationError(f"singular simulation system at pixel {divmod(int(failed), spec.ncols)}")
    return values.reshape(spec.shape)


def simulate_grf(model: VariogramModel, spec: GridSpec, rng, size: int | None = None, method: str = "auto",
                 n_prev: int = 16, dense_max_nodes: int = DENSE_MAX_NODES):
    """Zero-mean Gaussian random field(s) with the model's covariance.

    ``method="dense"`` factors the full covariance matrix (allowed up to
    ``dense_max_nodes`` nodes) and reuses the factor for all ``size``
    realizations; ``"sequential"`` simulates node by node along a multigrid
    random path, conditioning each node on its ``n_prev`` nearest simulated
    neighbours by simple kriging. ``"auto"`` picks dense when allowed.

    Returns one ScalarField, or a list of ``size`` fields.
    """
    gen = as_generator(rng)
    n = 1 if size is None else int(size)
    if model.sill == 0:
        out = [ScalarField(spec, np.zeros(spec.shape)) for _ in range(n)]
        return out[0] if size is None else out
    if method == "auto":
        method = "dense" if spec.size <= dense_max_nodes else "sequential"
    if method == "dense":
        if spec.size > dense_max_nodes:
            raise SimulationError(f"{spec.size} nodes exceed the dense factorization cap of {dense_max_nodes}")
        L = _dense_factor(model, spec)
        z = gen.standard_normal((spec.size, n))
        vals = (L @ z).T.reshape((n,) + spec.shape)
        del L
    elif method == "sequential":
        vals = np.stack([_sequential(model, spec, gen, n_prev) for _ in range(n)])
    else:
        raise ValueError(f"unknown method {method!r}")
    out = [ScalarField(spec, v) for v in vals]
    return out[0] if size is None else out


@dataclass(frozen=True)
class SyntheticTruth:
    center: np.ndarray
    sill: float
    range: float
    basis: SimplexBasis

    @property
    def model(self) -> VariogramModel:
        return VariogramModel("spherical", 0.0, self.sill, self.range)


SILL_BOUNDS = (0.025, 2.5)


def generate_synthetic_psfs(spec: GridSpec, seed, p: int = 3, range_: float = 2000.0, sill: float | None = None,
                            center=None, basis: SimplexBasis | None = None, method: str = "auto"):
    """Random composition field with Gaussian ILR coordinates.

    Draws the center by closing ``p`` U[0, 1] values and a common sill from
    U[0.025, 2.5] (unless given), then simulates ``p - 1`` independent
    spherical, nugget-free fields of that sill and range around ``ilr(center)``.
    Returns ``(CompositionField, SyntheticTruth)``.
    """
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    basis = basis or simplex.default_basis(p)
    g = stream.generator(0)
    c = simplex.closure(g.uniform(0.0, 1.0, p)) if center is None else simplex.closure(np.asarray(center, float))
    s = float(g.uniform(*SILL_BOUNDS)) if sill is None else float(sill)
    model = VariogramModel("spherical", 0.0, s, float(range_))
    y0 = simplex.ilr(c, basis)
    coords = np.stack(
        [simulate_grf(model, spec, stream.generator(1 + j), method=method).values + y0[j] for j in range(p - 1)], axis=-1
    )
    fld = CompositionField.from_ilr(spec, coords, basis)
    return fld, SyntheticTruth(c, s, float(range_), basis)


# -- block sequential simulation ------------------------------------------------


@dataclass
class SimulationEnsemble:
    realizations: list
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.realizations)

    def ilr_stack(self, basis: SimplexBasis) -> np.ndarray:
        """ILR coordinates of all realizations, shape ``(n, nrows, ncols, p-1)``."""
        return np.stack([r.ilr(basis) for r in self.realizations])


@dataclass(frozen=True)
class BsgsConfig:
    """Conditioning set: ``neighbors`` nearest coarse blocks plus up to
    ``n_prev`` nearest previously simulated fine nodes within
    ``search_radius`` fine cells (default: the model range, in cells).
    ``noise_scale`` multiplies the kriging standard deviation of each draw;
    0 gives the kriged mean.
    """

    neighbors: int = 25
    n_prev: int = 16
    search_radius: int | None = None
    noise_scale: float = 1.0


def _coordinate_residuals(coarse_y, trend, coarse_cov, shape):
    return coarse_y - predict_trend(trend, coarse_cov, shape=shape)


def bsgs(coarse: CompositionField, m: CoarseFineMap, basis: SimplexBasis, trend: TrendModel,
         models: Sequence[VariogramModel], n_real: int, rng: RngStream | int,
         fine_covariates: Mapping[str, ScalarField] | None = None, config: BsgsConfig = BsgsConfig()) -> SimulationEnsemble:
    """Block sequential Gaussian simulation of ILR coordinates.

    For each realization and coordinate: coarse residuals from the trend;
    fine pixels visited along a seeded uniformly random path; each pixel
    drawn from the ordinary-kriging distribution given its nearest coarse
    block residuals (point-to-block covariances) and nearest previously
    simulated fine residuals (point-to-point covariances); finally the fine
    trend is added and the coordinates are back-transformed.

    Realization ``i`` depends only on ``(seed, i)``.
    """
    t0 = time.perf_counter()
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    fine_covariates = dict(fine_covariates or {})
    q = basis.p - 1
    models = list(models)
    if len(models) != q or trend.q != q:
        raise ValueError(f"need {q} models and a {q}-component trend")
    if np.any(coarse.values[coarse.valid] <= 0):
        raise simplex.CompositionError("coarse field has non-positive parts")
    Y = coarse.ilr(basis)
    coarse_cov = upscale_covariates(fine_covariates, m)
    resid = _coordinate_residuals(Y, trend, coarse_cov, m.coarse.shape)
    fine_trend = predict_trend(trend, fine_covariates, shape=m.fine.shape)

    valid = coarse.valid
    nb = Neighborhoods(m, config.neighbors, valid)
    blk_nbr = np.ascontiguousarray(nb.blocks, dtype=np.int32)
    target = nb.target
    spec = m.fine
    N = spec.size
    tables = []
    for model in models:
        cache = BlockCovarianceCache.from_model(model, m)
        radius = config.search_radius
        if radius is None:
            radius = int(min(max(spec.nrows, spec.ncols), math.ceil(model.range / spec.cellsize)))
        tables.append((cache, _lag_table(model, spec), search_offsets(max(int(radius), 1))))

    real = []
    for i in range(int(n_real)):
        g = stream.child(i)
        sim = np.full((N, q), np.nan)
        for j, model in enumerate(models):
            cache, cov_pp, search = tables[j]
            gen = g.generator(j)
            order = gen.permutation(N)
            path = np.ascontiguousarray(order[target[order]], dtype=np.int64)
            noise = gen.standard_normal(path.size)
            values = np.zeros(N)
            known = np.zeros(N, dtype=np.uint8)
            kvar = np.zeros(path.size)
            blk_val = np.ascontiguousarray(np.nan_to_num(resid[..., j]).ravel())
            failed = kernels.sgs_path(
                values, known, spec.nrows, spec.ncols, path, noise, search, cov_pp, blk_nbr, blk_val,
                cache.bb, cache.pb, m.coarse.ncols, m.fy, m.fx, cache.c0, int(config.n_prev), True,
                float(config.noise_scale), kvar,
            )
            if failed >= 0:
                raise SimulationError(
                    f"singular conditioning system at fine pixel {divmod(int(failed), spec.ncols)} "
                    f"(realization {i}, coordinate {j})"
                )
            values[~target] = np.nan
            sim[:, j] = values
        coords = sim.reshape(spec.shape + (q,)) + fine_trend
        real.append(CompositionField.from_ilr(spec, coords, basis, coarse.part_names))
    prov = {
        "seed": stream.seed,
        "n_real": int(n_real),
        "neighbors": config.neighbors,
        "n_prev": config.n_prev,
        "search_radius": config.search_radius,
        "noise_scale": config.noise_scale,
        "path": "uniform random permutation per realization and coordinate",
        "models": [vars(mo) for mo in models],
        "backend": kernels.BACKEND,
        "seconds": time.perf_counter() - t0,
    }
    return SimulationEnsemble(real, prov)
