"""Variogram models, grid estimation, fitting, regularization and deconvolution."""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from . import kernels
from .grid import CoarseFineMap, ScalarField

log = logging.getLogger(__name__)

FAMILIES = ("spherical", "exponential", "gaussian")


class VariogramFitError(ValueError):
    pass


def _structure(family: str, x: np.ndarray) -> np.ndarray:
    """Unit-sill structure at scaled distance ``x = h / range``."""
    if family == "spherical":
        return np.where(x < 1.0, 1.5 * x - 0.5 * x**3, 1.0)
    if family == "exponential":
        return 1.0 - np.exp(-3.0 * x)
    if family == "gaussian":
        return 1.0 - np.exp(-3.0 * x * x)
    raise ValueError(f"unknown variogram family {family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class VariogramModel:
    """Isotropic nugget + one structure.

    ``range`` is the distance at which the spherical model reaches its sill;
    for exponential and gaussian it is the practical range (95% of the sill).
    """

    family: str = "spherical"
    nugget: float = 0.0
    psill: float = 1.0
    range: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown variogram family {self.family!r}")
        if self.nugget < 0 or self.psill < 0:
            raise ValueError("nugget and psill must be non-negative")
        if not self.range > 0:
            raise ValueError("range must be positive")

    @property
    def sill(self) -> float:
        return self.nugget + self.psill

    def _h(self, h):
        h = np.asarray(h, dtype=float)
        if np.any(h < 0):
            raise ValueError("negative lag distance")
        return h

    def gamma(self, h):
        h = self._h(h)
        g = self.nugget + self.psill * _structure(self.family, h / self.range)
        return np.where(h > 0, g, 0.0)

    def cov(self, h):
        h = self._h(h)
        c = self.psill * (1.0 - _structure(self.family, h / self.range))
        return np.where(h > 0, c, self.sill)

    def scaled(self, k: float) -> "VariogramModel":
        return replace(self, nugget=self.nugget * k, psill=self.psill * k)


def save_model(model: VariogramModel, path) -> None:
    cp = configparser.ConfigParser()
    cp["variogram"] = {
        "family": model.family,
        "nugget": repr(float(model.nugget)),
        "psill": repr(float(model.psill)),
        "range": repr(float(model.range)),
    }
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_model(path) -> VariogramModel:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    s = cp["variogram"]
    return VariogramModel(s.get("family", "spherical"), s.getfloat("nugget"), s.getfloat("psill"), s.getfloat("range"))


# -- empirical estimation ---------------------------------------------------


@dataclass(frozen=True)
class EmpiricalVariogram:
    """Binned semivariances; ``lags`` is the mean pair distance in each bin."""

    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray


def empirical_variogram(fld: ScalarField, lag_width: float | None = None, max_dist: float | None = None) -> EmpiricalVariogram:
    """Omnidirectional method-of-moments estimate over all pixel pairs.

    Defaults: lag width = cell size, maximum distance = half the grid diagonal.
    Empty bins are dropped.
    """
    spec = fld.spec
    z = np.ascontiguousarray(fld.values, dtype=float)
    if np.count_nonzero(np.isfinite(z)) < 2:
        raise ValueError("need at least two valid pixels")
    cs = spec.cellsize
    lag_width = cs if lag_width is None else float(lag_width)
    if max_dist is None:
        max_dist = 0.5 * math.hypot(spec.nrows * cs, spec.ncols * cs)
    nbins = max(1, int(math.ceil(max_dist / lag_width - 1e-9)))
    sums, counts, dsum = kernels.lag_sums(z, cs, cs, lag_width, nbins, float(max_dist))
    keep = counts > 0
    return EmpiricalVariogram(dsum[keep] / counts[keep], sums[keep] / (2.0 * counts[keep]), counts[keep])


# -- fitting ----------------------------------------------------------------


def _profile_fit(family, lags, values, weights, ranges):
    """Best non-negative (nugget, psill) for each candidate range.

    Two-variable weighted least squares with non-negativity: the
    unconstrained solution when feasible, otherwise the better of the two
    one-variable boundary fits. Returns ``(sse, coef)`` with shapes ``(G,)``
    and ``(G, 2)`` for ``G`` ranges.
    """
    ranges = np.atleast_1d(np.asarray(ranges, float))
    f = _structure(family, lags[None, :] / ranges[:, None])
    w, y = weights[None, :], values[None, :]
    S0 = weights.sum()
    S1 = (w * f).sum(axis=1)
    S11 = (w * f * f).sum(axis=1)
    Sy = (weights * values).sum()
    S1y = (w * f * y).sum(axis=1)
    Syy = (weights * values * values).sum()

    def sse(n, s):
        return Syy - 2 * n * Sy - 2 * s * S1y + n * n * S0 + 2 * n * s * S1 + s * s * S11

    det = S0 * S11 - S1 * S1
    ok = det > 1e-12 * S0 * np.maximum(S11, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        n_u = np.where(ok, (S11 * Sy - S1 * S1y) / det, -1.0)
        s_u = np.where(ok, (S0 * S1y - S1 * Sy) / det, -1.0)
        s_b = np.where(S11 > 0, np.maximum(S1y / S11, 0.0), 0.0)
    n_b = max(Sy / S0, 0.0)
    cands = [
        (np.where(ok & (n_u >= 0) & (s_u >= 0), n_u, 0.0), np.where(ok & (n_u >= 0) & (s_u >= 0), s_u, 0.0)),
        (np.zeros_like(s_b), s_b),
        (np.full_like(s_b, n_b), np.zeros_like(s_b)),
    ]
    feas_u = ok & (n_u >= 0) & (s_u >= 0)
    errs = np.stack([np.where(feas_u, sse(*cands[0]), np.inf), sse(*cands[1]), sse(*cands[2])])
    pick = errs.argmin(axis=0)
    coef = np.stack([np.choose(pick, [c[0] for c in cands]), np.choose(pick, [c[1] for c in cands])], axis=1)
    return np.maximum(errs.min(axis=0), 0.0), coef


def _direct_sse(family, lags, values, weights, rng_):
    _, coef = _profile_fit(family, lags, values, weights, rng_)
    r = coef[0, 0] + coef[0, 1] * _structure(family, lags / rng_) - values
    return float(np.sum(weights * r * r)), coef[0]


def fit_points(lags, values, weights, family: str = "spherical") -> VariogramModel:
    """Weighted least-squares fit of ``family`` to semivariance points.

    The range is searched on a log grid and refined with a bounded scalar
    minimization; for each candidate range nugget and partial sill solve a
    non-negative least-squares problem exactly. If the best range leaves every
    lag on the sill, the structure is indistinguishable from nugget and is
    folded into it.
    """
    lags = np.asarray(lags, float)
    values = np.asarray(values, float)
    weights = np.asarray(weights, float)
    ok = (lags > 0) & np.isfinite(values) & (weights > 0)
    lags, values, weights = lags[ok], values[ok], weights[ok]
    if lags.size < 3:
        raise VariogramFitError(f"need at least 3 informative lags, got {lags.size}")
    if not np.any(values > 0):
        raise VariogramFitError("degenerate variogram: all semivariances are zero")
    weights = weights / weights.max()
    lo, hi = 0.1 * lags.min(), 5.0 * lags.max()
    grid = np.geomspace(lo, hi, 80)
    obj = _profile_fit(family, lags, values, weights, grid)[0]
    i = int(np.argmin(obj))
    a0, a1 = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda la: _direct_sse(family, lags, values, weights, math.exp(la))[0],
        bounds=(math.log(a0), math.log(a1)),
        method="bounded",
        options={"xatol": 1e-12, "maxiter": 500},
    )
    best = math.exp(res.x) if res.fun <= obj[i] else grid[i]
    sse, (nug, ps) = _direct_sse(family, lags, values, weights, best)
    if ps > 0:
        # joint polish of all three parameters from the profiled optimum
        sw = np.sqrt(weights)

        def resid(t):
            return sw * (t[0] + t[1] * _structure(family, lags / t[2]) - values)

        try:
            pol = least_squares(
                resid, [nug, ps, best], bounds=([0, 0, lo], [np.inf, np.inf, hi]),
                x_scale=[max(ps, 1e-300), max(ps, 1e-300), best], xtol=1e-15, ftol=1e-15, gtol=1e-15,
            )
            if 2 * pol.cost < sse:
                nug, ps, best = (float(v) for v in pol.x)
        except ValueError:
            pass
    if ps > 0 and np.all(_structure(family, lags / best) >= 1.0 - 1e-9):
        nug, ps = nug + ps, 0.0
    return VariogramModel(family, float(nug), float(ps), float(best))


def fit(emp: EmpiricalVariogram, family: str = "spherical") -> VariogramModel:
    """Fit with weights ``count / h**2``."""
    return fit_points(emp.lags, emp.gamma, emp.counts / np.maximum(emp.lags, 1e-300) ** 2, family)


# -- block support ----------------------------------------------------------


def _pair_offsets(fy: int, fx: int):
    """Offsets between two pixels of the same block, with pair weights summing to 1."""
    du = np.arange(-(fy - 1), fy)
    dv = np.arange(-(fx - 1), fx)
    w = np.outer(fy - np.abs(du), fx - np.abs(dv)).astype(float) / (fy * fx) ** 2
    U, V = np.meshgrid(du, dv, indexing="ij")
    return U.ravel(), V.ravel(), w.ravel()


class RegularizedVariogram:
    """Block-support semivariogram obtained by averaging a point model.

    ``gamma_vec`` evaluates at a displacement vector between blocks; ``gamma``
    averages over directions in the first octant, which is what an
    omnidirectional estimate on a square lattice of blocks sees.
    """

    ANGLES = np.linspace(0.0, np.pi / 4, 5)
    ANGLE_WEIGHTS = np.array([0.5, 1.0, 1.0, 1.0, 0.5]) / 4.0

    def __init__(self, cov: Callable, cellsize: float, fy: int, fx: int):
        self.cov = cov
        self.cellsize = float(cellsize)
        self.fy, self.fx = int(fy), int(fx)
        du, dv, self._w = _pair_offsets(self.fy, self.fx)
        self._du = du * self.cellsize
        self._dv = dv * self.cellsize
        self.within = float(np.dot(self._w, cov(np.hypot(self._du, self._dv))))

    @classmethod
    def from_model(cls, model: VariogramModel, m: CoarseFineMap) -> "RegularizedVariogram":
        return cls(model.cov, m.fine.cellsize, m.fy, m.fx)

    @property
    def sill(self) -> float:
        """Block variance, i.e. the regularized sill for bounded models."""
        return self.within

    def cov_vec(self, dy, dx):
        dy = np.asarray(dy, float)[..., None]
        dx = np.asarray(dx, float)[..., None]
        return self.cov(np.hypot(dy + self._du, dx + self._dv)) @ self._w

    def gamma_vec(self, dy, dx):
        return self.within - self.cov_vec(dy, dx)

    def gamma(self, h):
        h = np.asarray(h, float)
        out = np.zeros(h.shape)
        for ang, wt in zip(self.ANGLES, self.ANGLE_WEIGHTS):
            out += wt * self.gamma_vec(h * np.sin(ang), h * np.cos(ang))
        return np.where(h > 0, out, 0.0)


def regularize(model: VariogramModel, m: CoarseFineMap) -> RegularizedVariogram:
    return RegularizedVariogram.from_model(model, m)


@dataclass
class DeconvolutionResult:
    model: VariogramModel
    coarse_model: VariogramModel
    converged: bool
    iterations: int
    discrepancy: float
    history: list = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return not self.converged


def _discrepancy(reg, target, w):
    return float(np.sum(w * np.abs(reg - target) / target) / np.sum(w))


def deconvolve(
    coarse: EmpiricalVariogram | VariogramModel,
    m: CoarseFineMap,
    family: str = "spherical",
    lags=None,
    max_iter: int = 35,
    tol: float = 1e-3,
    patience: int = 3,
) -> DeconvolutionResult:
    """Point-support model whose block regularization matches ``coarse``.

    Iterative rescaling in the manner of Goovaerts: start from the coarse
    model with its sill inflated by the within-block variance, then at
    iteration ``i`` rescale the current best point model lag by lag by
    ``1 + (coarse - regularized) / (coarse_sill * sqrt(i))`` and refit. A
    candidate is kept only if it lowers the mean relative difference between
    its regularization and the coarse model. Iteration stops when a kept
    candidate improves by less than ``tol`` (relative), after ``patience``
    rejected candidates in a row, or after ``max_iter`` iterations, in which
    case ``converged`` is False and the best model found is returned.
    """
    if isinstance(coarse, EmpiricalVariogram):
        coarse_model = fit(coarse, family)
        lags = coarse.lags if lags is None else np.asarray(lags, float)
        counts = coarse.counts if lags is coarse.lags else np.ones_like(lags)
    else:
        coarse_model = coarse
        if lags is None:
            cs = m.coarse.cellsize
            lags = cs * np.arange(1, 11, dtype=float)
        lags = np.asarray(lags, float)
        counts = np.ones_like(lags)
    if m.P == 1:
        return DeconvolutionResult(coarse_model, coarse_model, True, 0, 0.0)

    target = coarse_model.gamma(lags)
    keep = target > 0
    lags, target, counts = lags[keep], target[keep], counts[keep]
    if lags.size < 3:
        raise VariogramFitError("coarse model is flat at the comparison lags")
    fit_w = counts / lags**2
    s2 = coarse_model.sill

    reg0 = regularize(coarse_model, m)
    best = coarse_model.scaled(s2 / reg0.sill) if reg0.sill > 0 else coarse_model
    best_reg = regularize(best, m).gamma(lags)
    best_d = _discrepancy(best_reg, target, counts)
    history = [best_d]
    converged = False
    rejected = 0
    it = 0
    for it in range(1, max_iter + 1):
        if best_d < 1e-6:
            converged = True
            break
        delta = 1.0 + (target - best_reg) / (s2 * math.sqrt(it))
        pseudo = best.gamma(lags) * delta
        try:
            cand = fit_points(lags, pseudo, fit_w, family)
        except VariogramFitError:
            rejected += 1
            if rejected >= patience:
                converged = True
                break
            continue
        cand_reg = regularize(cand, m).gamma(lags)
        d = _discrepancy(cand_reg, target, counts)
        history.append(d)
        if d < best_d:
            gain = (best_d - d) / best_d
            best, best_reg, best_d = cand, cand_reg, d
            rejected = 0
            if gain < tol:
                converged = True
                break
        else:
            rejected += 1
            if rejected >= patience:
                converged = True
                break
    if not converged:
        log.info("deconvolution stopped after %d iterations (discrepancy %.3g)", it, best_d)
    return DeconvolutionResult(best, coarse_model, converged, it, best_d, history)


# -- discretized block covariances ------------------------------------------


class BlockCovarianceCache:
    """Point-to-block and block-to-block covariances on a nested grid.

    Blocks are discretized by exactly their fine pixel centers. Tables are
    indexed by block lag ``(dR, dC)`` in ``[-lag_rows, lag_rows] x
    [-lag_cols, lag_cols]``:

    ``pb[a, b, dR + lag_rows, dC + lag_cols]``
        mean covariance between the fine pixel at offset ``(a, b)`` inside its
        block and the pixels of the block displaced by ``(dR, dC)``;
    ``bb[dR + lag_rows, dC + lag_cols]``
        mean covariance over all pixel pairs of two blocks ``(dR, dC)`` apart.

    Read-only after construction.
    """

    def __init__(self, cov: Callable, m: CoarseFineMap, lag_rows: int | None = None, lag_cols: int | None = None):
        cs = m.coarse
        self.map = m
        self.lag_rows = cs.nrows - 1 if lag_rows is None else min(int(lag_rows), cs.nrows - 1)
        self.lag_cols = cs.ncols - 1 if lag_cols is None else min(int(lag_cols), cs.ncols - 1)
        fy, fx = m.fy, m.fx
        U = (self.lag_rows + 1) * fy
        V = (self.lag_cols + 1) * fx
        du = np.arange(-U, U + 1)
        dv = np.arange(-V, V + 1)
        G = cov(np.hypot(du[:, None], dv[None, :]) * m.fine.cellsize)
        self.c0 = float(cov(np.zeros(1))[0])
        dR = np.arange(-self.lag_rows, self.lag_rows + 1)
        dC = np.arange(-self.lag_cols, self.lag_cols + 1)
        rows = (dR[None, :] * fy - np.arange(fy)[:, None] + U)[:, None, :, None]
        cols = (dC[None, :] * fx - np.arange(fx)[:, None] + V)[None, :, None, :]
        pb = np.zeros((fy, fx, dR.size, dC.size))
        for i in range(fy):
            for j in range(fx):
                pb += G[rows + i, cols + j]
        pb /= m.P
        bb = pb.mean(axis=(0, 1))
        self.pb = np.ascontiguousarray(pb)
        self.bb = np.ascontiguousarray(0.5 * (bb + bb[::-1, ::-1]))

    @classmethod
    def from_model(cls, model: VariogramModel, m: CoarseFineMap, **kw) -> "BlockCovarianceCache":
        return cls(model.cov, m, **kw)
