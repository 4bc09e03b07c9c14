"""File formats: ESRI ASCII grids, composition layers, CSV tables, PGM images, run manifests."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import simplex
from .grid import CompositionField, GridError, GridSpec, ScalarField
from .simplex import CompositionError

log = logging.getLogger(__name__)

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class FormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


# -- ESRI ASCII grid ------------------------------------------------------------


def read_ascii_grid(path) -> ScalarField:
    """Read an ESRI ASCII grid; cells equal to NODATA_VALUE become NaN.

    XLLCENTER/YLLCENTER are accepted in place of the corner keys.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header: dict[str, float] = {}
    i = 0
    while i < len(lines) and len(header) < 6:
        tok = lines[i].split()
        if not tok:
            i += 1
            continue
        key = tok[0].lower()
        if key[0].isdigit() or key[0] in "+-.":
            break
        if len(tok) != 2:
            raise FormatError(f"{path}:{i + 1}: malformed header line {lines[i]!r}")
        try:
            header[key] = float(tok[1])
        except ValueError:
            raise FormatError(f"{path}:{i + 1}: unparsable header value {tok[1]!r}") from None
        i += 1
    for a, b in (("xllcenter", "xllcorner"), ("yllcenter", "yllcorner")):
        if a in header and b not in header and "cellsize" in header:
            header[b] = header.pop(a) - header["cellsize"] / 2
    missing = [k for k in HEADER_KEYS[:5] if k not in header]
    if missing:
        raise FormatError(f"{path}: header is missing {missing}")
    unknown = set(header) - set(HEADER_KEYS)
    if unknown:
        raise FormatError(f"{path}: unknown header keys {sorted(unknown)}")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise FormatError(f"{path}: NCOLS and NROWS must be positive integers")
    nodata = header.get("nodata_value", -9999.0)
    spec = GridSpec(int(ncols), int(nrows), header["cellsize"], header["xllcorner"], header["yllcorner"], nodata)

    vals = np.empty((spec.nrows, spec.ncols))
    row = 0
    for j in range(i, len(lines)):
        tok = lines[j].split()
        if not tok:
            continue
        if row >= spec.nrows:
            raise FormatError(f"{path}:{j + 1}: more than NROWS={spec.nrows} data rows")
        if len(tok) != spec.ncols:
            raise FormatError(f"{path}:{j + 1}: expected {spec.ncols} values, found {len(tok)}")
        try:
            vals[row] = [float(t) for t in tok]
        except ValueError:
            bad = next(t for t in tok if not _is_float(t))
            raise FormatError(f"{path}:{j + 1}: unparsable number {bad!r}") from None
        row += 1
    if row != spec.nrows:
        raise FormatError(f"{path}: expected {spec.nrows} data rows, found {row}")
    vals[vals == nodata] = np.nan
    return ScalarField(spec, vals)


def _is_float(t: str) -> bool:
    try:
        float(t)
        return True
    except ValueError:
        return False


def write_ascii_grid(fld: ScalarField, path) -> None:
    spec = fld.spec
    nd = _fmt(spec.nodata)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"NCOLS {spec.ncols}\nNROWS {spec.nrows}\n")
        fh.write(f"XLLCORNER {_fmt(spec.xll)}\nYLLCORNER {_fmt(spec.yll)}\n")
        fh.write(f"CELLSIZE {_fmt(spec.cellsize)}\nNODATA_VALUE {nd}\n")
        for r in fld.values:
            fh.write(" ".join(nd if not np.isfinite(v) else _fmt(v) for v in r))
            fh.write("\n")


# -- compositions -----------------------------------------------------------------


def _close_layers(v: np.ndarray, total: float | None, tol: float, zero_delta: float | None):
    ok = ~np.isnan(v).any(axis=-1)
    if np.any(v[ok] < 0):
        bad = np.argwhere(ok & (v < 0).any(axis=-1))[0]
        raise CompositionError(f"negative part at pixel (row, col) ({bad[0]}, {bad[1]})")
    sums = v.sum(axis=-1)
    if total is None:
        med = float(np.median(sums[ok])) if ok.any() else 1.0
        total = min((1.0, 100.0, 1000.0), key=lambda t: abs(np.log(max(med, 1e-300) / t)))
    far = ok & (np.abs(sums / total - 1.0) > tol)
    if far.any():
        r, c = np.argwhere(far)[0]
        raise CompositionError(f"pixel (row, col) ({r}, {c}) sums to {float(sums[r, c])!r}, expected {total!r}")
    v = v.copy()
    v[ok] = v[ok] / sums[ok][:, None]
    zeros = ok & (v <= 0).any(axis=-1)
    if zeros.any():
        if zero_delta is None:
            r, c = np.argwhere(zeros)[0]
            raise CompositionError(f"zero part at pixel (row, col) ({r}, {c}); enable zero replacement")
        v[ok] = simplex.replace_zeros(v[ok], zero_delta)
        log.info("replaced zeros in %d pixels with detection limit %g", int(zeros.sum()), zero_delta)
    return v, int(zeros.sum()), total


@dataclass
class CompositionReadInfo:
    total: float
    zero_pixels: int
    zero_delta: float | None


def read_composition(source, part_names: Sequence[str] | None = None, total: float | None = None,
                     tol: float = simplex.RECLOSE_TOL, zero_delta: float | None = None):
    """Read a composition field.

    ``source`` is a sidecar naming file (``part,file`` CSV), a list of ASCII
    grid paths (one per part), or a ``.csv`` table (see
    :func:`read_composition_csv`). Totals of 1, 100 or 1000 are detected
    from the median pixel sum unless ``total`` is given; each pixel must be
    within relative ``tol`` of it. Zero parts raise unless ``zero_delta``
    is given, in which case they are replaced multiplicatively.

    Returns ``(CompositionField, CompositionReadInfo)``.
    """
    if isinstance(source, (str, Path)) and str(source).lower().endswith(".csv"):
        return read_composition_csv(source, total=total, tol=tol, zero_delta=zero_delta)
    if isinstance(source, (str, Path)):
        side = Path(source)
        with open(side, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"part", "file"}:
            raise FormatError(f"{side}: sidecar must have columns part,file")
        names = [r["part"] for r in rows]
        paths = [side.parent / r["file"] for r in rows]
    else:
        paths = [Path(p) for p in source]
        names = list(part_names) if part_names else [p.stem for p in paths]
    grids = [read_ascii_grid(p) for p in paths]
    spec = grids[0].spec
    for p, g in zip(paths[1:], grids[1:]):
        if not g.spec.aligned_with(spec):
            raise GridError(f"layer {p} is not aligned with {paths[0]}")
    v = np.stack([g.values for g in grids], axis=-1)
    v, nz, tot = _close_layers(v, total, tol, zero_delta)
    return CompositionField(spec, v, tuple(part_names or names)), CompositionReadInfo(tot, nz, zero_delta)


def write_composition(fld: CompositionField, directory, stem: str = "composition") -> Path:
    """One ASCII grid per part plus a ``<stem>.parts`` sidecar; returns the sidecar path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    side = d / f"{stem}.parts"
    with open(side, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["part", "file"])
        for i, name in enumerate(fld.part_names):
            fn = f"{stem}_{_safe(name)}.asc"
            write_ascii_grid(fld.part(i), d / fn)
            w.writerow([name, fn])
    return side


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def write_composition_csv(fld: CompositionField, path) -> None:
    """Table of cell-center ``x,y`` and one column per part; nodata pixels are skipped."""
    x, y = fld.spec.centers()
    ok = fld.valid
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *fld.part_names])
        for r, c in zip(*np.nonzero(ok)):
            w.writerow([_fmt(x[r, c]), _fmt(y[r, c]), *(_fmt(v) for v in fld.values[r, c])])


def read_composition_csv(path, spec: GridSpec | None = None, total=None, tol=simplex.RECLOSE_TOL, zero_delta=None):
    """Read an ``x,y,<parts...>`` table of cell centers onto a grid.

    Without ``spec`` the grid is the bounding lattice of the points, with
    cell size equal to the smallest coordinate spacing.
    """
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if not head or [h.lower() for h in head[:2]] != ["x", "y"] or len(head) < 4:
            raise FormatError(f"{path}:1: expected header x,y,<part>,<part>,...")
        data = []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(head):
                raise FormatError(f"{path}:{ln}: expected {len(head)} fields, found {len(row)}")
            try:
                data.append([float(t) for t in row])
            except ValueError:
                raise FormatError(f"{path}:{ln}: unparsable number") from None
    if not data:
        raise FormatError(f"{path}: no data rows")
    a = np.asarray(data)
    xs, ys = a[:, 0], a[:, 1]
    if spec is None:
        ux, uy = np.unique(xs), np.unique(ys)
        steps = np.concatenate([np.diff(ux), np.diff(uy)])
        cs = float(steps.min()) if steps.size else 1.0
        ncols = int(round((ux[-1] - ux[0]) / cs)) + 1
        nrows = int(round((uy[-1] - uy[0]) / cs)) + 1
        spec = GridSpec(ncols, nrows, cs, ux[0] - cs / 2, uy[0] - cs / 2)
    c = np.rint((xs - spec.xll) / spec.cellsize - 0.5).astype(int)
    r = np.rint(spec.nrows - 0.5 - (ys - spec.yll) / spec.cellsize).astype(int)
    if np.any((r < 0) | (r >= spec.nrows) | (c < 0) | (c >= spec.ncols)):
        raise GridError(f"{path}: points outside the grid")
    v = np.full(spec.shape + (a.shape[1] - 2,), np.nan)
    v[r, c] = a[:, 2:]
    v, nz, tot = _close_layers(v, total, tol, zero_delta)
    return CompositionField(spec, v, tuple(head[2:])), CompositionReadInfo(tot, nz, zero_delta)


# -- tables, images, configs ----------------------------------------------------------


def write_csv(rows: Iterable[dict], path, columns: Sequence[str] | None = None) -> None:
    """CSV with a header row; floats written with 17 significant digits."""
    rows = list(rows)
    cols = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in (row[c] for c in cols)])


def write_pgm(values: np.ndarray, path, vmin: float | None = None, vmax: float | None = None) -> None:
    """Plain (P2) grayscale image scaled linearly to 0..255; NaN is black."""
    v = np.asarray(values, float)
    fin = np.isfinite(v)
    lo = float(np.min(v[fin])) if vmin is None and fin.any() else (vmin or 0.0)
    hi = float(np.max(v[fin])) if vmax is None and fin.any() else (vmax if vmax is not None else 1.0)
    span = hi - lo if hi > lo else 1.0
    g = np.zeros(v.shape, dtype=int)
    g[fin] = np.clip(np.rint((v[fin] - lo) / span * 255), 0, 255).astype(int)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"P2\n{v.shape[1]} {v.shape[0]}\n255\n")
        for row in g:
            fh.write(" ".join(str(x) for x in row) + "\n")


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise FormatError(f"{path}: invalid config: {exc}") from None
    return cp


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    model_files: list = field(default_factory=list)
    version: str = ""
    backend: str = ""
    python: str = field(default_factory=platform.python_version)
    numpy: str = field(default_factory=lambda: np.__version__)
    wall_clock_seconds: float = 0.0
    checksums: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def add_outputs(self, paths: Iterable, root) -> None:
        root = Path(root)
        for p in sorted(Path(x) for x in paths):
            self.checksums[str(p.relative_to(root))] = sha256_file(p)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
