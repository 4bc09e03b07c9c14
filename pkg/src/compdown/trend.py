"""Linear regression trends over gridded covariates."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .grid import CoarseFineMap, GridError, ScalarField, upscale_euclidean


class TrendError(ValueError):
    pass


def upscale_covariates(covariates: Mapping[str, ScalarField], m: CoarseFineMap) -> dict[str, ScalarField]:
    """Block means of every covariate, in the same order."""
    return {name: upscale_euclidean(f, m) for name, f in covariates.items()}


@dataclass(frozen=True)
class TrendModel:
    """Per-component linear trend ``b0 + sum_l b_l * x_l``.

    ``coefficients`` has shape ``(q, L)``; column 0 is the intercept when
    ``intercept`` is true, followed by one column per covariate in
    ``covariate_names`` order.
    """

    covariate_names: tuple[str, ...]
    coefficients: np.ndarray
    intercept: bool = True
    stderr: np.ndarray | None = None
    r2: np.ndarray | None = None
    pearson: np.ndarray | None = None
    component_names: tuple[str, ...] = ()

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        L = len(self.covariate_names) + int(self.intercept)
        if b.shape[1] != L:
            raise TrendError(f"{b.shape[1]} coefficients per component, expected {L}")
        object.__setattr__(self, "coefficients", b)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        names = tuple(self.component_names) or tuple(f"y{i + 1}" for i in range(b.shape[0]))
        object.__setattr__(self, "component_names", names)

    @property
    def q(self) -> int:
        return self.coefficients.shape[0]

    def to_json(self) -> str:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return json.dumps(
            {
                "covariates": list(self.covariate_names),
                "intercept": self.intercept,
                "components": list(self.component_names),
                "coefficients": arr(self.coefficients),
                "stderr": arr(self.stderr),
                "r2": arr(self.r2),
                "pearson": arr(self.pearson),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "TrendModel":
        d = json.loads(text)

        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            tuple(d["covariates"]),
            np.asarray(d["coefficients"], dtype=float),
            bool(d.get("intercept", True)),
            arr(d.get("stderr")),
            arr(d.get("r2")),
            arr(d.get("pearson")),
            tuple(d.get("components", ())),
        )


def _as_components(responses) -> np.ndarray:
    if isinstance(responses, ScalarField):
        return responses.values[..., None]
    if isinstance(responses, (list, tuple)):
        return np.stack([r.values if isinstance(r, ScalarField) else np.asarray(r, float) for r in responses], axis=-1)
    a = np.asarray(responses, dtype=float)
    return a[..., None] if a.ndim == 2 else a


def _design(covariates: Mapping[str, ScalarField], names, shape, intercept: bool) -> np.ndarray:
    cols = []
    if intercept:
        cols.append(np.ones(shape))
    for n in names:
        if n not in covariates:
            raise TrendError(f"missing covariate {n!r}")
        v = covariates[n].values if isinstance(covariates[n], ScalarField) else np.asarray(covariates[n], float)
        if v.shape != shape:
            raise GridError(f"covariate {n!r} has shape {v.shape}, expected {shape}")
        cols.append(v)
    if not cols:
        raise TrendError("empty design: no intercept and no covariates")
    return np.stack(cols, axis=-1)


def _collinear(Xs: np.ndarray, names: list[str], tol: float) -> list[str]:
    _, s, vt = np.linalg.svd(Xs, full_matrices=False)
    null = vt[s <= tol * s[0]]
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [n for n, hit in zip(names, involved) if hit]


def fit_ols(responses, covariates: Mapping[str, ScalarField], intercept: bool = True, rank_tol: float = 1e-10):
    """Ordinary least squares per response component.

    ``responses`` is a ScalarField, a list of them, or an array of shape
    ``(nrows, ncols)`` or ``(nrows, ncols, q)``. Pixels with any missing
    response or covariate are left out of the fit. Covariates are centered
    and scaled internally; coefficients are reported in original units.

    Returns ``(model, residuals)`` with residuals shaped like the responses
    (NaN where not fitted).
    """
    Y = _as_components(responses)
    shape = Y.shape[:2]
    names = list(covariates.keys())
    X = _design(covariates, names, shape, intercept)
    ok = np.isfinite(Y).all(axis=-1) & np.isfinite(X).all(axis=-1)
    Xo, Yo = X[ok], Y[ok]
    n, L = Xo.shape
    if n <= L:
        raise TrendError(f"{n} observations for {L} coefficients")

    off = int(intercept)
    mu = np.zeros(L)
    sd = np.ones(L)
    if L > off:
        mu[off:] = Xo[:, off:].mean(axis=0)
        sd[off:] = Xo[:, off:].std(axis=0)
        if intercept:
            const = [nm for nm, s in zip(names, sd[off:]) if s == 0]
            if const:
                raise TrendError(f"rank-deficient design: covariates {const} are constant (collinear with intercept)")
        sd[sd == 0] = 1.0
        if not intercept:
            mu[:] = 0.0
    Xs = (Xo - mu) / sd

    Q, R = np.linalg.qr(Xs)
    d = np.abs(np.diag(R))
    if d.min() <= rank_tol * d.max():
        labels = (["intercept"] if intercept else []) + names
        raise TrendError(f"rank-deficient design: collinear covariates {_collinear(Xs, labels, 1e-8)}")
    bs = np.linalg.solve(R, Q.T @ Yo)  # (L, q)

    # back to original units: x_s = (x - mu) / sd
    T = np.diag(1.0 / sd)
    if intercept:
        T[0, off:] = -mu[off:] / sd[off:]
    beta = T @ bs

    fitted = Xo @ beta
    res = Yo - fitted
    dof = n - L
    sigma2 = (res * res).sum(axis=0) / dof
    Rinv = np.linalg.inv(R)
    cov_s = Rinv @ Rinv.T
    cov_b = T @ cov_s @ T.T
    stderr = np.sqrt(np.outer(sigma2, np.diag(cov_b)))
    ss_tot = ((Yo - Yo.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0, 1.0 - (res * res).sum(axis=0) / ss_tot, np.nan)
        pear = np.array([
            np.corrcoef(fitted[:, j], Yo[:, j])[0, 1] if np.std(fitted[:, j]) > 0 and np.std(Yo[:, j]) > 0 else np.nan
            for j in range(Y.shape[-1])
        ])
    model = TrendModel(tuple(names), beta.T, intercept, stderr, r2, pear)
    residuals = np.full(Y.shape, np.nan)
    residuals[ok] = res
    return model, residuals


def predict_trend(model: TrendModel, covariates: Mapping[str, ScalarField] | None = None, shape=None) -> np.ndarray:
    """Trend values, shape ``(nrows, ncols, q)``.

    An intercept-only model has no covariates to take the grid shape from,
    so ``shape`` must be given.
    """
    covariates = covariates or {}
    if shape is None:
        if covariates:
            first = next(iter(covariates.values()))
            shape = first.values.shape if isinstance(first, ScalarField) else np.shape(first)
        else:
            raise TrendError("shape is required when there are no covariates")
    X = _design(covariates, model.covariate_names, tuple(shape), model.intercept)
    return X @ model.coefficients.T
