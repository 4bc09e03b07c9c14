"""Raster data model: grid geometry, fields, and coarse/fine block maps.

Arrays are stored row-major with row 0 at the top (north), the same order as
ESRI ASCII grids. Missing values are ``NaN`` in memory; the ``nodata``
sentinel of a :class:`GridSpec` is only used when reading and writing files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import simplex
from .simplex import CompositionError, SimplexBasis


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    ncols: int
    nrows: int
    cellsize: float
    xll: float = 0.0
    yll: float = 0.0
    nodata: float = -9999.0

    def __post_init__(self):
        if int(self.ncols) != self.ncols or int(self.nrows) != self.nrows:
            raise GridError("ncols and nrows must be integers")
        if self.ncols < 1 or self.nrows < 1:
            raise GridError(f"grid must have at least one cell, got {self.nrows}x{self.ncols}")
        if not self.cellsize > 0:
            raise GridError(f"cellsize must be positive, got {self.cellsize}")
        object.__setattr__(self, "ncols", int(self.ncols))
        object.__setattr__(self, "nrows", int(self.nrows))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def size(self) -> int:
        return self.nrows * self.ncols

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """x and y coordinates of cell centers, each of shape ``(nrows, ncols)``."""
        x = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        y = self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize
        return np.meshgrid(x, y)

    def aligned_with(self, other: "GridSpec") -> bool:
        return (
            self.shape == other.shape
            and np.isclose(self.cellsize, other.cellsize)
            and np.isclose(self.xll, other.xll)
            and np.isclose(self.yll, other.yll)
        )


@dataclass(frozen=True)
class ScalarField:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.spec.shape:
            if v.size != self.spec.size:
                raise GridError(f"{v.size} values for a {self.spec.nrows}x{self.spec.ncols} grid")
            v = v.reshape(self.spec.shape)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True)
class CompositionField:
    """Raster of compositions, values of shape ``(nrows, ncols, p)``.

    A pixel is nodata when any of its parts is ``NaN``. Every other pixel must
    hold a strictly positive composition with unit sum.
    """

    spec: GridSpec
    values: np.ndarray
    part_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 3 or v.shape[:2] != self.spec.shape:
            raise GridError(f"composition values must be {self.spec.shape + ('p',)}, got {v.shape}")
        nodata = np.isnan(v).any(axis=-1)
        v[nodata] = np.nan
        ok = v[~nodata]
        if ok.size:
            try:
                simplex.as_composition(ok, tol=simplex.UNIT_SUM_TOL)
            except CompositionError as exc:
                bad = np.argwhere(~nodata & ~((v > 0).all(axis=-1) & (np.abs(v.sum(axis=-1) - 1) <= simplex.UNIT_SUM_TOL)))
                where = f" at pixel (row, col) {tuple(int(i) for i in bad[0])}" if len(bad) else ""
                raise CompositionError(f"{exc}{where}") from None
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        names = tuple(self.part_names) or tuple(f"part{i + 1}" for i in range(v.shape[-1]))
        if len(names) != v.shape[-1]:
            raise GridError("part_names length does not match number of parts")
        object.__setattr__(self, "part_names", names)

    @property
    def p(self) -> int:
        return self.values.shape[-1]

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values).any(axis=-1)

    def part(self, i: int) -> ScalarField:
        return ScalarField(self.spec, self.values[..., i])

    def ilr(self, basis: SimplexBasis) -> np.ndarray:
        """ILR coordinates, shape ``(nrows, ncols, p-1)``, NaN at nodata."""
        out = np.full(self.spec.shape + (self.p - 1,), np.nan)
        ok = self.valid
        out[ok] = simplex.ilr(self.values[ok], basis)
        return out

    @classmethod
    def from_ilr(cls, spec: GridSpec, coords: np.ndarray, basis: SimplexBasis, part_names=()) -> "CompositionField":
        coords = np.asarray(coords, dtype=float)
        out = np.full(spec.shape + (basis.p,), np.nan)
        ok = np.isfinite(coords).all(axis=-1)
        out[ok] = simplex.ilr_inv(coords[ok], basis)
        return cls(spec, out, tuple(part_names) or basis.part_names)

    @classmethod
    def from_parts(cls, spec: GridSpec, parts: Sequence[np.ndarray], part_names=(), tol=simplex.RECLOSE_TOL):
        """Stack part layers, re-closing pixels whose sums are within ``tol`` of 1."""
        v = np.stack([np.asarray(a, dtype=float).reshape(spec.shape) for a in parts], axis=-1)
        ok = ~np.isnan(v).any(axis=-1)
        v[ok] = simplex.as_composition(v[ok], tol=tol)
        return cls(spec, v, tuple(part_names))


@dataclass(frozen=True)
class CoarseFineMap:
    """Nesting of a fine grid inside a coarse grid by integer factors.

    Coarse block ``(R, C)`` holds fine rows ``R*fy .. R*fy+fy-1`` and fine
    columns ``C*fx .. C*fx+fx-1``. Both grids share the lower-left corner.
    """

    fine: GridSpec
    fx: int
    fy: int

    def __post_init__(self):
        if self.fx < 1 or self.fy < 1 or int(self.fx) != self.fx or int(self.fy) != self.fy:
            raise GridError("factors must be positive integers")
        if self.fine.ncols % self.fx or self.fine.nrows % self.fy:
            raise GridError(
                f"fine grid {self.fine.nrows}x{self.fine.ncols} is not a multiple of "
                f"factor {self.fy}x{self.fx}; crop it first (see crop_to_multiple)"
            )
        if self.fx != self.fy:
            # square coarse cells are required by the ESRI grid model
            raise GridError("fx != fy needs non-square coarse cells, which GridSpec cannot express")

    @classmethod
    def from_factor(cls, fine: GridSpec, f: int) -> "CoarseFineMap":
        return cls(fine, int(f), int(f))

    @property
    def P(self) -> int:
        return self.fx * self.fy

    @property
    def coarse(self) -> GridSpec:
        return GridSpec(
            self.fine.ncols // self.fx,
            self.fine.nrows // self.fy,
            self.fine.cellsize * self.fx,
            self.fine.xll,
            self.fine.yll,
            self.fine.nodata,
        )

    @property
    def M(self) -> int:
        return self.coarse.size

    def block_of(self, r: int, c: int) -> tuple[int, int]:
        if not (0 <= r < self.fine.nrows and 0 <= c < self.fine.ncols):
            raise IndexError(f"fine pixel ({r}, {c}) outside {self.fine.shape}")
        return (r // self.fy, c // self.fx)

    def fine_pixels_of(self, R: int, C: int) -> list[tuple[int, int]]:
        cs = self.coarse
        if not (0 <= R < cs.nrows and 0 <= C < cs.ncols):
            raise IndexError(f"coarse block ({R}, {C}) outside {cs.shape}")
        return [
            (R * self.fy + i, C * self.fx + j) for i in range(self.fy) for j in range(self.fx)
        ]

    def block_index(self) -> np.ndarray:
        """Flat coarse index of every fine pixel, shape ``fine.shape``."""
        rr = np.arange(self.fine.nrows) // self.fy
        cc = np.arange(self.fine.ncols) // self.fx
        return rr[:, None] * self.coarse.ncols + cc[None, :]

    def _dist2(self, r: int, c: int, R, C):
        # doubled fine-cell units keep distances integral, so ties are exact
        dr = 2 * r + 1 - (2 * np.asarray(R) * self.fy + self.fy)
        dc = 2 * c + 1 - (2 * np.asarray(C) * self.fx + self.fx)
        return dr * dr + dc * dc

    def nearest_blocks(self, r: int, c: int, count: int, valid: np.ndarray | None = None) -> list[tuple[int, int]]:
        """The ``count`` coarse blocks closest to fine pixel ``(r, c)``.

        Distance is between cell centers; ties go to the lower ``(row, col)``.
        ``valid`` optionally masks out coarse blocks (e.g. nodata).
        """
        self.block_of(r, c)
        cs = self.coarse
        R, C = np.divmod(np.arange(cs.size), cs.ncols)
        keep = np.ones(cs.size, bool) if valid is None else np.asarray(valid, bool).ravel()
        R, C = R[keep], C[keep]
        order = np.lexsort((C, R, self._dist2(r, c, R, C)))[: max(int(count), 0)]
        return list(zip(R[order].tolist(), C[order].tolist()))


def crop_to_multiple(spec: GridSpec, f: int) -> GridSpec:
    """Largest sub-grid anchored at the top-left corner divisible by ``f``."""
    ncols = spec.ncols - spec.ncols % f
    nrows = spec.nrows - spec.nrows % f
    if ncols == 0 or nrows == 0:
        raise GridError(f"grid {spec.shape} smaller than factor {f}")
    dropped_rows = spec.nrows - nrows
    return replace(spec, ncols=ncols, nrows=nrows, yll=spec.yll + dropped_rows * spec.cellsize)


def crop_values(values: np.ndarray, spec: GridSpec) -> np.ndarray:
    return values[: spec.nrows, : spec.ncols]


def _blocks(values: np.ndarray, m: CoarseFineMap) -> np.ndarray:
    R, C = m.coarse.shape
    tail = values.shape[2:]
    return values.reshape((R, m.fy, C, m.fx) + tail)


def _check_fine(spec: GridSpec, m: CoarseFineMap) -> None:
    if not spec.aligned_with(m.fine):
        raise GridError("field is not on the fine grid of this map")


def upscale_euclidean(fld, m: CoarseFineMap):
    """Arithmetic block means. A block with any nodata pixel becomes nodata."""
    _check_fine(fld.spec, m)
    means = _blocks(fld.values, m).mean(axis=(1, 3))
    if isinstance(fld, CompositionField):
        ok = ~np.isnan(means).any(axis=-1)
        means[ok] /= means[ok].sum(axis=-1, keepdims=True)
        return CompositionField(m.coarse, means, fld.part_names)
    return ScalarField(m.coarse, means)


def upscale_aitchison(fld: CompositionField, m: CoarseFineMap) -> CompositionField:
    """Closed part-wise geometric block means (ILR block means, back-transformed)."""
    _check_fine(fld.spec, m)
    v = fld.values
    if np.any(v[fld.valid] <= 0):
        raise CompositionError("zero part in composition field")
    logm = _blocks(np.log(v), m).mean(axis=(1, 3))
    out = np.full(logm.shape, np.nan)
    ok = ~np.isnan(logm).any(axis=-1)
    out[ok] = simplex.clr_inv(logm[ok])
    return CompositionField(m.coarse, out, fld.part_names)


def refine_nearest(fld, m: CoarseFineMap):
    """Copy each coarse value to all fine pixels of its block."""
    v = np.repeat(np.repeat(fld.values, m.fy, axis=0), m.fx, axis=1)
    if isinstance(fld, CompositionField):
        return CompositionField(m.fine, v, fld.part_names)
    return ScalarField(m.fine, v)


def perturb_ilr_field(coarse: CompositionField, basis: SimplexBasis, s2: float, rng: np.random.Generator) -> CompositionField:
    """Add i.i.d. N(0, s2) noise to every ILR coordinate of every valid pixel."""
    if s2 < 0:
        raise ValueError(f"noise variance must be non-negative, got {s2}")
    if s2 == 0:
        return coarse
    y = coarse.ilr(basis)
    ok = coarse.valid
    y[ok] += rng.normal(0.0, np.sqrt(s2), size=y[ok].shape)
    return CompositionField.from_ilr(coarse.spec, y, basis, coarse.part_names)
