"""USDA soil texture classes of (clay, silt, sand) compositions."""

from __future__ import annotations

import numpy as np

from .grid import CompositionField, GridError, ScalarField
from .simplex import CompositionError, UNIT_SUM_TOL

# Fixed matching order; a point on a shared boundary belongs to the first
# class whose conditions it satisfies. Conditions are on percentages.
CLASSES = (
    "sand",
    "loamy sand",
    "sandy loam",
    "loam",
    "silt loam",
    "silt",
    "sandy clay loam",
    "clay loam",
    "silty clay loam",
    "sandy clay",
    "silty clay",
    "clay",
)


def _rules(clay, silt, sand):
    return (
        silt + 1.5 * clay < 15,
        (silt + 1.5 * clay >= 15) & (silt + 2 * clay < 30),
        ((clay >= 7) & (clay < 20) & (sand > 52) & (silt + 2 * clay >= 30))
        | ((clay < 7) & (silt < 50) & (silt + 2 * clay >= 30)),
        (clay >= 7) & (clay < 27) & (silt >= 28) & (silt < 50) & (sand <= 52),
        ((silt >= 50) & (clay >= 12) & (clay < 27)) | ((silt >= 50) & (silt < 80) & (clay < 12)),
        (silt >= 80) & (clay < 12),
        (clay >= 20) & (clay < 35) & (silt < 28) & (sand > 45),
        (clay >= 27) & (clay < 40) & (sand > 20) & (sand <= 45),
        (clay >= 27) & (clay < 40) & (sand <= 20),
        (clay >= 35) & (sand > 45),
        (clay >= 40) & (silt >= 40),
        (clay >= 40) & (sand <= 45) & (silt < 40),
    )


def _codes(psf: np.ndarray) -> np.ndarray:
    # rounding removes float noise such as 0.07 * 100 = 7.000000000000001
    pct = np.round(psf * 100.0, 9)
    clay, silt, sand = pct[..., 0], pct[..., 1], pct[..., 2]
    code = np.full(psf.shape[:-1], -1, dtype=np.int64)
    for k, hit in enumerate(_rules(clay, silt, sand)):
        code = np.where((code < 0) & hit, k, code)
    return code


def _check(psf: np.ndarray) -> None:
    if psf.shape[-1] != 3:
        raise CompositionError(f"texture classes need 3 parts (clay, silt, sand), got {psf.shape[-1]}")
    if np.any(psf < 0) or np.any(np.abs(psf.sum(axis=-1) - 1.0) > UNIT_SUM_TOL):
        raise CompositionError("texture input must be non-negative with unit sum")


def classify_usda(psf) -> str | np.ndarray:
    """Class label of a ``(clay, silt, sand)`` fraction triple (or a stack of them)."""
    psf = np.asarray(psf, dtype=float)
    _check(psf)
    code = _codes(psf)
    if np.any(code < 0):
        raise CompositionError("composition outside every texture class")
    if code.ndim == 0:
        return CLASSES[int(code)]
    return np.asarray(CLASSES, dtype=object)[code]


def classify_field(fld: CompositionField):
    """Integer class raster (1-based codes in :data:`CLASSES` order, NaN at nodata)
    and a ``{label: pixel count}`` table over all twelve classes.
    """
    if fld.p != 3:
        raise GridError(f"texture classes need a 3-part field, got {fld.p}")
    ok = fld.valid
    codes = np.full(fld.spec.shape, np.nan)
    if ok.any():
        v = fld.values[ok]
        _check(v)
        c = _codes(v)
        if np.any(c < 0):
            raise CompositionError("composition outside every texture class")
        codes[ok] = c + 1
    counts = {name: int(np.sum(codes == k + 1)) for k, name in enumerate(CLASSES)}
    return ScalarField(fld.spec, codes), counts


def legend() -> str:
    """``code,label`` lines for the class raster."""
    return "code,label\n" + "".join(f"{k + 1},{name}\n" for k, name in enumerate(CLASSES))
