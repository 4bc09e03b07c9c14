"""Downscaling pipelines: regression trend plus area-to-point kriged residuals."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import simplex
from .grid import CoarseFineMap, CompositionField, GridError, ScalarField, upscale_aitchison, upscale_euclidean
from .kriging import AtpkSolution, KrigingConfig, LinearCoregionalization, cokrige, predict_residual_field
from .simplex import SimplexBasis
from .trend import TrendModel, fit_ols, predict_trend, upscale_covariates
from .variogram import VariogramFitError, VariogramModel, deconvolve, empirical_variogram, fit

log = logging.getLogger(__name__)


class MethodTag(enum.Enum):
    """Upscaling geometry (first letter) x downscaling method (second letter).

    ``E`` downscaling kriges raw parts; ``A`` downscaling kriges ILR
    coordinates and back-transforms.
    """

    EE = ("euclidean", "euclidean")
    EA = ("euclidean", "aitchison")
    AE = ("aitchison", "euclidean")
    AA = ("aitchison", "aitchison")

    @property
    def upscale_geometry(self) -> str:
        return self.value[0]

    @property
    def downscale_geometry(self) -> str:
        return self.value[1]

    def upscale(self, fine: CompositionField, m: CoarseFineMap) -> CompositionField:
        return upscale_euclidean(fine, m) if self.upscale_geometry == "euclidean" else upscale_aitchison(fine, m)


@dataclass(frozen=True)
class DownscaleConfig:
    """Pipeline settings.

    ``deconvolve``: estimate point-support residual models by deconvolving
    the coarse residual variogram (otherwise the coarse fit is used as is).
    ``coregionalization``: optional joint model for the dense cokriging path
    of the compositional pipeline; it overrides per-component models.
    """

    kriging: KrigingConfig = KrigingConfig()
    family: str = "spherical"
    deconvolve: bool = True
    intercept: bool = True
    coregionalization: LinearCoregionalization | None = None


@dataclass
class Diagnostics:
    negative_pixels: int
    negative_fraction: float
    unit_sum_violation: np.ndarray
    max_unit_sum_violation: float
    error_map: np.ndarray | None = None
    mean_error: float | None = None
    centre_deviation: np.ndarray | None = None
    mass_deviation: np.ndarray | None = None

    def summary(self) -> dict:
        def mx(a):
            return None if a is None or not np.isfinite(a).any() else float(np.nanmax(a))

        def mean(a):
            return None if a is None or not np.isfinite(a).any() else float(np.nanmean(a))

        return {
            "negative_pixels": self.negative_pixels,
            "negative_fraction": self.negative_fraction,
            "max_unit_sum_violation": self.max_unit_sum_violation,
            "mean_error": self.mean_error,
            "max_centre_deviation": mx(self.centre_deviation),
            "mean_centre_deviation": mean(self.centre_deviation),
            "max_mass_deviation": mx(self.mass_deviation),
        }


@dataclass
class DownscaleResult:
    """``prediction`` is a ScalarField, a raw ``(nrows, ncols, q)`` array of
    parts (Euclidean pipeline) or a CompositionField. ``variance`` is per
    kriged component: ILR coordinates for the compositional pipeline.
    """

    prediction: object
    variance: np.ndarray
    trend: TrendModel
    models: list
    kriging: AtpkSolution
    fine_trend: np.ndarray
    coarse_residuals: np.ndarray
    method: str
    diagnostics: Diagnostics | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        p = self.prediction
        return p.values if isinstance(p, (ScalarField, CompositionField)) else p


def estimate_point_model(residuals: np.ndarray, m: CoarseFineMap, config: DownscaleConfig = DownscaleConfig()) -> VariogramModel:
    """Point-support model for one coarse residual component.

    Residuals with no variation get a placeholder unit model: kriging is
    linear in the data, so the predicted residual is zero whatever the model.
    """
    cs = m.coarse
    vals = np.asarray(residuals, float)
    finite = vals[np.isfinite(vals)]
    if finite.size < 2 or np.ptp(finite) <= 1e-12 * max(1.0, np.abs(finite).max()):
        return VariogramModel(config.family, 0.0, 1.0, 3.0 * cs.cellsize)
    emp = empirical_variogram(ScalarField(cs, vals))
    try:
        if config.deconvolve and m.P > 1:
            return deconvolve(emp, m, config.family).model
        return fit(emp, config.family)
    except VariogramFitError as exc:
        log.warning("residual variogram fit failed (%s); using a pure nugget model", exc)
        return VariogramModel(config.family, float(np.var(finite)), 0.0, cs.cellsize)


def _regression_kriging(Y: np.ndarray, m: CoarseFineMap, fine_covariates, models, config: DownscaleConfig, joint=None):
    fine_covariates = dict(fine_covariates or {})
    for name, f in fine_covariates.items():
        if not f.spec.aligned_with(m.fine):
            raise GridError(f"covariate {name!r} is not on the fine grid")
    coarse_cov = upscale_covariates(fine_covariates, m)
    trend, resid = fit_ols(Y, coarse_cov, intercept=config.intercept)
    q = Y.shape[-1]
    if joint is not None:
        if joint.q != q:
            raise ValueError(f"coregionalization is {joint.q}-variate, data have {q} components")
        sol = cokrige(resid, joint, m, config.kriging)
        models = list(joint.structures)
    else:
        if models is None:
            models = [estimate_point_model(resid[..., j], m, config) for j in range(q)]
        elif isinstance(models, VariogramModel):
            models = [models] * q
        models = list(models)
        sol = predict_residual_field(resid, models, m, config.kriging)
    fine_trend = predict_trend(trend, fine_covariates, shape=m.fine.shape)
    pred = fine_trend + sol.prediction
    return pred, trend, resid, models, sol, fine_trend


def atprk_scalar(coarse: ScalarField, m: CoarseFineMap, fine_covariates: Mapping[str, ScalarField] | None = None,
                 model: VariogramModel | None = None, config: DownscaleConfig = DownscaleConfig()) -> DownscaleResult:
    """Regression trend plus area-to-point kriged residual for one variable."""
    if not coarse.spec.aligned_with(m.coarse):
        raise GridError("coarse field is not on the coarse grid of this map")
    models = None if model is None else [model]
    pred, trend, resid, models, sol, ft = _regression_kriging(coarse.values[..., None], m, fine_covariates, models, config)
    return DownscaleResult(ScalarField(m.fine, pred[..., 0]), sol.variance, trend, models, sol, ft, resid, "atprk")


def atprcok_euclidean(coarse: CompositionField, m: CoarseFineMap, fine_covariates=None, models=None,
                      config: DownscaleConfig = DownscaleConfig()) -> DownscaleResult:
    """Component-wise regression kriging of raw parts.

    The output is a plain array: nothing keeps it positive, and with local
    neighbourhoods or covariates the parts need not sum to one either.
    """
    if not coarse.spec.aligned_with(m.coarse):
        raise GridError("coarse field is not on the coarse grid of this map")
    pred, trend, resid, models, sol, ft = _regression_kriging(coarse.values, m, fine_covariates, models, config)
    res = DownscaleResult(pred, sol.variance, trend, models, sol, ft, resid, "atprcok")
    res.diagnostics = diagnostics(pred, None, m, coarse)
    return res


def ilr_atprcok(coarse: CompositionField, m: CoarseFineMap, basis: SimplexBasis, fine_covariates=None, models=None,
                config: DownscaleConfig = DownscaleConfig()) -> DownscaleResult:
    """Regression cokriging of ILR coordinates, back-transformed to compositions.

    Every output pixel is a valid composition by construction.
    """
    if not coarse.spec.aligned_with(m.coarse):
        raise GridError("coarse field is not on the coarse grid of this map")
    if coarse.p != basis.p:
        raise simplex.CompositionError(f"{coarse.p}-part field with a {basis.p}-part basis")
    Y = coarse.ilr(basis)
    pred, trend, resid, models, sol, ft = _regression_kriging(Y, m, fine_covariates, models, config, config.coregionalization)
    out = CompositionField.from_ilr(m.fine, pred, basis, coarse.part_names)
    res = DownscaleResult(out, sol.variance, trend, models, sol, ft, resid, "ilr_atprcok")
    res.diagnostics = diagnostics(out.values, None, m, coarse)
    return res


def downscale_composition(coarse: CompositionField, m: CoarseFineMap, geometry: str, basis: SimplexBasis | None = None,
                          fine_covariates=None, models=None, config: DownscaleConfig = DownscaleConfig()) -> DownscaleResult:
    """Dispatch on downscaling geometry ``"euclidean"`` or ``"aitchison"``."""
    if geometry == "euclidean":
        return atprcok_euclidean(coarse, m, fine_covariates, models, config)
    if geometry == "aitchison":
        return ilr_atprcok(coarse, m, basis or simplex.default_basis(coarse.p), fine_covariates, models, config)
    raise ValueError(f"unknown geometry {geometry!r}")


def _trend_logs(trend: TrendModel, basis: SimplexBasis, covariates: Mapping[str, ScalarField], shape) -> np.ndarray:
    """Log representative of the perturbation of powered coefficient compositions."""
    coef = simplex.ilr_inv(trend.coefficients.T, basis)  # one composition per covariate term
    X = np.ones(tuple(shape) + (0,))
    cols = []
    if trend.intercept:
        cols.append(np.ones(shape))
    for name in trend.covariate_names:
        if name not in covariates:
            raise KeyError(f"missing covariate {name!r}")
        cols.append(np.asarray(covariates[name].values, float))
    X = np.stack(cols, axis=-1) if cols else X
    return X @ np.log(coef)


def simplex_predictor(coarse: CompositionField, solution: AtpkSolution, trend: TrendModel, basis: SimplexBasis,
                      m: CoarseFineMap, fine_covariates=None) -> CompositionField:
    """Evaluate the downscaling predictor with simplex operations only.

    The trend at a pixel is the perturbation of the coefficient compositions
    ``ilr_inv(beta_l)`` powered by the covariate values; coarse residuals are
    ``Z_K`` minus (in the perturbation sense) the coarse trend; each residual
    is acted on by the lifted weight matrix ``V^T W V`` through
    :func:`simplex.boxdot`, and the results are perturbed together with the
    fine trend. With the weights of an :func:`ilr_atprcok` run this
    reproduces its output.
    """
    fine_covariates = dict(fine_covariates or {})
    q = basis.p - 1
    if solution.weights.shape[-1] != q or trend.q != q:
        raise simplex.CompositionError("weights, trend and basis dimensions disagree")
    coarse_cov = upscale_covariates(fine_covariates, m)
    mu_coarse = simplex.clr_inv(_trend_logs(trend, basis, coarse_cov, m.coarse.shape))
    mu_fine_log = _trend_logs(trend, basis, fine_covariates, m.fine.shape)

    Z = coarse.values.reshape(-1, basis.p)
    ok = coarse.valid.ravel()
    e = np.full(Z.shape, 1.0 / basis.p)
    e[ok] = simplex.perturb_inv(Z[ok], mu_coarse.reshape(-1, basis.p)[ok])

    nb = solution.neighbors
    blk = nb.blocks
    has = blk >= 0
    lifted = np.einsum("ai,nkab,bj->nkij", basis.contrast, solution.weights, basis.contrast)
    terms = simplex.boxdot(lifted, e[np.where(has, blk, 0)])  # (N, k, p)
    logs = np.where(has[..., None], np.log(terms), 0.0).sum(axis=1)
    out = simplex.clr_inv(logs + mu_fine_log.reshape(-1, basis.p))
    out[~nb.target] = np.nan
    return CompositionField(m.fine, out.reshape(m.fine.shape + (basis.p,)), coarse.part_names)


def diagnostics(pred, reference: CompositionField | None, m: CoarseFineMap, coarse: CompositionField | None = None) -> Diagnostics:
    """Constraint and fidelity checks of a fine composition prediction.

    ``pred`` is a raw ``(nrows, ncols, p)`` array (or a field). Positivity
    violations count pixels with any part <= 0; unit-sum violation is
    ``|sum - 1|`` per pixel. With ``reference``, the error map is the
    Euclidean distance per pixel. With ``coarse``, ``centre_deviation`` is the
    per-block maximum relative deviation ``|G_i / Z_i - 1|`` of the closed
    geometric block mean ``G`` from the coarse datum ``Z`` (NaN for blocks
    holding invalid pixels), and ``mass_deviation`` the per-block maximum
    absolute deviation of the arithmetic block mean.
    """
    v = pred.values if isinstance(pred, (CompositionField, ScalarField)) else np.asarray(pred, float)
    if v.shape[:2] != m.fine.shape:
        raise GridError(f"prediction shape {v.shape[:2]} does not match fine grid {m.fine.shape}")
    have = np.isfinite(v).all(axis=-1)
    neg = have & ~(v > 0).all(axis=-1)
    usum = np.where(have, np.abs(v.sum(axis=-1) - 1.0), np.nan)
    d = Diagnostics(
        negative_pixels=int(neg.sum()),
        negative_fraction=float(neg.sum() / max(int(have.sum()), 1)),
        unit_sum_violation=usum,
        max_unit_sum_violation=float(np.nanmax(usum)) if have.any() else 0.0,
    )
    if reference is not None:
        if not reference.spec.aligned_with(m.fine):
            raise GridError("reference is not on the fine grid")
        err = np.linalg.norm(v - reference.values, axis=-1)
        d.error_map = err
        d.mean_error = float(np.nanmean(err))
    if coarse is not None:
        if not coarse.spec.aligned_with(m.coarse):
            raise GridError("coarse field is not on the coarse grid")
        Rn, Cn = m.coarse.shape
        blocks = v.reshape(Rn, m.fy, Cn, m.fx, -1)
        mean = blocks.mean(axis=(1, 3))
        d.mass_deviation = np.abs(mean - coarse.values).max(axis=-1)
        pos = (blocks > 0).all(axis=(1, 3, 4))
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.log(np.where(blocks > 0, blocks, 1.0)).mean(axis=(1, 3))
            gm = np.exp(lg - lg.max(axis=-1, keepdims=True))
            gm /= gm.sum(axis=-1, keepdims=True)
            dev = np.abs(gm / coarse.values - 1.0).max(axis=-1)
        d.centre_deviation = np.where(pos, dev, np.nan)
    return d
