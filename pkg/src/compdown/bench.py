"""Up-then-down benchmark harness for the four method combinations.

A fine reference composition field is upscaled (Euclidean or Aitchison
block means), downscaled back (raw-part or ILR cokriging) and scored by the
per-pixel Euclidean distance to the reference, averaged over pixels. Reports
are plain row lists so they serialize to deterministic CSV.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import simplex
from .downscale import DownscaleConfig, MethodTag, diagnostics, downscale_composition
from .grid import CoarseFineMap, CompositionField, GridSpec, crop_to_multiple, crop_values, perturb_ilr_field
from .kriging import KrigingConfig
from .rng import RngStream
from .simulation import generate_synthetic_psfs

# unit-sum violation histogram edges, in percent
USUM_EDGES = (0.0, 1e-7, 0.5, 1.0, 2.0, 5.0, 10.0, np.inf)


@dataclass(frozen=True)
class Profile:
    nrows: int
    ncols: int
    cellsize: float
    n_real: int
    factors: tuple[int, ...]

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.ncols, self.nrows, self.cellsize)


DESK = Profile(137, 150, 20.0, 20, tuple(range(2, 16)))
FULL = Profile(458, 500, 20.0, 100, tuple(range(2, 31)))


def _bin_labels():
    out = []
    for lo, hi in zip(USUM_EDGES[:-1], USUM_EDGES[1:]):
        out.append(f"usum_pct_{lo:g}_{hi:g}")
    return out


USUM_COLUMNS = tuple(_bin_labels())


def score(truth: CompositionField, m: CoarseFineMap, tag: MethodTag, basis, config: DownscaleConfig,
          coarse: CompositionField | None = None) -> dict:
    """Upscale ``truth`` with ``tag``'s geometry (unless ``coarse`` is given),
    downscale, and score against ``truth``."""
    coarse = tag.upscale(truth, m) if coarse is None else coarse
    res = downscale_composition(coarse, m, tag.downscale_geometry, basis, config=config)
    d = diagnostics(res.values, truth, m)
    pct = d.unit_sum_violation[np.isfinite(d.unit_sum_violation)] * 100.0
    hist, _ = np.histogram(pct, bins=USUM_EDGES)
    row = {
        "method": tag.name,
        "mean_error": d.mean_error,
        "negative_pixels": d.negative_pixels,
        "negative_fraction": d.negative_fraction,
        "max_unit_sum_violation": d.max_unit_sum_violation,
        "n_pixels": int(np.isfinite(d.unit_sum_violation).sum()),
    }
    row.update({k: int(v) for k, v in zip(USUM_COLUMNS, hist)})
    return row


def _quantiles(x):
    q = np.quantile(x, [0.05, 0.25, 0.5, 0.75, 0.95])
    return dict(zip(("q05", "q25", "q50", "q75", "q95"), (float(v) for v in q)))


@dataclass
class BenchmarkReport:
    rows: list
    group_by: tuple
    params: dict = field(default_factory=dict)

    def summary(self) -> list[dict]:
        """One row per (group, method): error statistics and violation totals."""
        keys = sorted({tuple(r[k] for k in self.group_by) for r in self.rows})
        out = []
        for key in keys:
            sel = [r for r in self.rows if tuple(r[k] for k in self.group_by) == key]
            err = np.array([r["mean_error"] for r in sel])
            row = dict(zip(self.group_by, key))
            row.update({
                "n": len(sel),
                "mean_error": float(err.mean()),
                "std_error": float(err.std(ddof=1)) if len(sel) > 1 else 0.0,
                **_quantiles(err),
                "negative_pixels": int(sum(r["negative_pixels"] for r in sel)),
                "mean_negative_fraction": float(np.mean([r["negative_fraction"] for r in sel])),
                "realizations_with_negatives": int(sum(r["negative_pixels"] > 0 for r in sel)),
                "max_unit_sum_violation": float(max(r["max_unit_sum_violation"] for r in sel)),
            })
            row.update({c: int(sum(r[c] for r in sel)) for c in USUM_COLUMNS})
            out.append(row)
        return out

    def by_method(self) -> dict:
        """Pooled statistics per method over all settings."""
        out = {}
        for tag in sorted({r["method"] for r in self.rows}):
            sel = [r for r in self.rows if r["method"] == tag]
            out[tag] = {
                "mean_error": float(np.mean([r["mean_error"] for r in sel])),
                "negative_pixels": int(sum(r["negative_pixels"] for r in sel)),
                "mean_negative_fraction": float(np.mean([r["negative_fraction"] for r in sel])),
                "rows_with_negatives": int(sum(r["negative_pixels"] > 0 for r in sel)),
                "max_unit_sum_violation": float(max(r["max_unit_sum_violation"] for r in sel)),
            }
        return out


def _config(neighbors):
    return DownscaleConfig(kriging=KrigingConfig(neighbors=neighbors))


def _map(spec: GridSpec, f: int):
    sub = crop_to_multiple(spec, f)
    return sub, CoarseFineMap.from_factor(sub, f)


def _crop(fld: CompositionField, sub: GridSpec) -> CompositionField:
    return CompositionField(sub, crop_values(fld.values, sub), fld.part_names)


def _parallel(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def run_synthetic(seed: int, profile: Profile = DESK, methods: Iterable[MethodTag] = tuple(MethodTag),
                  neighbors: int = 25, threads: int = 1, n_real: int | None = None,
                  factors: Sequence[int] | None = None) -> BenchmarkReport:
    """Random fields (one per realization, shared by all factors and methods)
    upscaled by every factor and downscaled by every method."""
    stream = RngStream(int(seed))
    n_real = profile.n_real if n_real is None else int(n_real)
    factors = tuple(profile.factors if factors is None else factors)
    methods = tuple(methods)
    basis = simplex.default_basis(3)
    cfg = _config(neighbors)

    def one(i):
        truth, tr = generate_synthetic_psfs(profile.spec, stream.child(i), basis=basis)
        rows = []
        for f in factors:
            sub, m = _map(profile.spec, f)
            t = _crop(truth, sub)
            for tag in methods:
                row = {"realization": i, "P": f * f, "sill": tr.sill}
                row.update(score(t, m, tag, basis, cfg))
                rows.append(row)
        return rows

    rows = [r for chunk in _parallel(one, range(n_real), threads) for r in chunk]
    return BenchmarkReport(rows, ("P", "method"), {"seed": seed, "profile": vars(profile), "neighbors": neighbors})


def run_sensitivity(seed: int, fractions: Sequence[float] = tuple(np.round(np.arange(1, 11) / 10, 10)),
                    profile: Profile = DESK, factor: int = 15, sill: float = 0.1,
                    center=(1 / 3, 1 / 3, 1 / 3), methods: Iterable[MethodTag] = tuple(MethodTag),
                    neighbors: int = 25, threads: int = 1, n_real: int | None = None) -> BenchmarkReport:
    """Downscaling from coarse data perturbed by ILR noise of variance
    ``fraction * sill``; the reference is the unperturbed fine field."""
    stream = RngStream(int(seed))
    n_real = profile.n_real if n_real is None else int(n_real)
    methods = tuple(methods)
    basis = simplex.default_basis(3)
    cfg = _config(neighbors)
    sub, m = _map(profile.spec, factor)

    def one(i):
        s = stream.child(i)
        truth, _ = generate_synthetic_psfs(profile.spec, s, basis=basis, sill=sill, center=center)
        t = _crop(truth, sub)
        rows = []
        for tag in methods:
            clean = tag.upscale(t, m)
            for k, frac in enumerate(fractions):
                noisy = perturb_ilr_field(clean, basis, float(frac) * sill, s.generator(1000, k))
                row = {"realization": i, "s2_fraction": float(frac)}
                row.update(score(t, m, tag, basis, cfg, coarse=noisy))
                rows.append(row)
        return rows

    rows = [r for chunk in _parallel(one, range(n_real), threads) for r in chunk]
    return BenchmarkReport(rows, ("s2_fraction", "method"),
                           {"seed": seed, "factor": factor, "sill": sill, "center": list(center), "neighbors": neighbors})


def run_updown(fine: CompositionField, factors: Sequence[int] = tuple(range(2, 11)),
               methods: Iterable[MethodTag] = tuple(MethodTag), neighbors: int = 25) -> BenchmarkReport:
    """Up-then-down reconstruction of a given composition raster."""
    basis = simplex.default_basis(fine.p)
    cfg = _config(neighbors)
    rows = []
    for f in factors:
        sub, m = _map(fine.spec, f)
        t = _crop(fine, sub)
        if not t.valid.any():
            continue
        for tag in methods:
            row = {"P": f * f}
            row.update(score(t, m, tag, basis, cfg))
            rows.append(row)
    return BenchmarkReport(rows, ("P", "method"), {"factors": list(factors), "neighbors": neighbors})
