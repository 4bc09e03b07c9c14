"""Command line interface.

Every command writes into ``--output`` (a run directory) and finishes with a
``manifest.json`` holding the resolved settings, seed, versions and SHA-256
checksums of all outputs. Settings come from flags, then from the command's
section of ``--config`` (INI), then from built-in defaults. On failure a JSON
error record is printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels, simplex
from . import io as cio
from .bench import DESK, FULL, Profile, run_sensitivity, run_synthetic, run_updown
from .downscale import DownscaleConfig, MethodTag, atprk_scalar, downscale_composition
from .grid import CoarseFineMap, CompositionField, GridSpec, ScalarField, upscale_aitchison, upscale_euclidean
from .kriging import KrigingConfig
from .rng import RngStream
from .simulation import BsgsConfig, bsgs, generate_synthetic_psfs
from .texture import classify_field, legend
from .variogram import deconvolve, empirical_variogram, load_model, save_model

log = logging.getLogger("compdown")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message, self.prog)
        sys.exit(2)


def _emit_error(kind: str, message: str, command: str | None = None) -> None:
    rec = {"error": kind, "message": message}
    if command:
        rec["command"] = command
    sys.stderr.write(json.dumps(rec) + "\n")


# -- option resolution ---------------------------------------------------------


def _resolve(args, cfg, name: str, default, conv=str):
    v = getattr(args, name, None)
    if v is not None:
        return v
    if cfg is not None and cfg.has_option(args.command, name):
        raw = cfg.get(args.command, name)
        try:
            return conv(raw)
        except ValueError:
            raise UsageError(f"config option {args.command}.{name}: cannot parse {raw!r}") from None
    return default


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(p) for p in str(text).split(",") if p.strip()]


def _bool(text) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _methods(text) -> list[MethodTag]:
    try:
        return [MethodTag[t.strip().upper()] for t in str(text).split(",") if t.strip()]
    except KeyError as exc:
        raise UsageError(f"unknown method {exc.args[0]!r}; choose from EE, EA, AE, AA") from None


def _neighbors(v):
    v = str(v).strip().lower()
    return None if v in ("all", "global", "none") else int(v)


# -- helpers --------------------------------------------------------------------


def _fine_spec(coarse: GridSpec, f: int) -> GridSpec:
    return GridSpec(coarse.ncols * f, coarse.nrows * f, coarse.cellsize / f, coarse.xll, coarse.yll, coarse.nodata)


def _read_any(path):
    """A single ``.asc`` grid (scalar) or a composition sidecar / CSV."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    if p.suffix.lower() == ".asc":
        return cio.read_ascii_grid(p), None
    return cio.read_composition(p)


def _covariates(items, fine: GridSpec):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"covariate must be NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        f = cio.read_ascii_grid(path)
        if not f.spec.aligned_with(fine):
            raise UsageError(f"covariate {name!r} is not on the fine grid {fine.nrows}x{fine.ncols} @ {fine.cellsize}")
        out[name] = f
    return out


def _quicklook(values: np.ndarray, path: Path) -> None:
    cio.write_pgm(values, path)


def _basis(text, p: int):
    if not text:
        return simplex.default_basis(p)
    try:
        part = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise UsageError(f"cannot parse basis {text!r}; use a nested tuple such as ((0,1),2)") from None
    return simplex.build_sbp_basis(part)


# -- commands ---------------------------------------------------------------------


def cmd_ilr(args, cfg, out: Path, man):
    basis_txt = _resolve(args, cfg, "basis", "")
    if args.inverse:
        grids = [cio.read_ascii_grid(p) for p in args.input]
        coords = np.stack([g.values for g in grids], axis=-1)
        basis = _basis(basis_txt, coords.shape[-1] + 1)
        fld = CompositionField.from_ilr(grids[0].spec, coords, basis)
        cio.write_composition(fld, out, "composition")
    else:
        fld, info = cio.read_composition(args.input[0], zero_delta=args.zero_delta)
        basis = _basis(basis_txt, fld.p)
        y = fld.ilr(basis)
        for j in range(y.shape[-1]):
            cio.write_ascii_grid(ScalarField(fld.spec, y[..., j]), out / f"ilr_{j + 1}.asc")
        man.notes["zero_pixels_replaced"] = info.zero_pixels
    man.config.update({"basis": basis.contrast.tolist(), "inverse": bool(args.inverse)})


def cmd_upscale(args, cfg, out: Path, man):
    f = int(_resolve(args, cfg, "factor", None, int) or 0)
    if f < 1:
        raise UsageError("--factor is required")
    geometry = _resolve(args, cfg, "geometry", "aitchison")
    fld, info = _read_any(args.input)
    m = CoarseFineMap.from_factor(fld.spec, f)
    if info is None:
        cio.write_ascii_grid(upscale_euclidean(fld, m), out / "upscaled.asc")
    else:
        up = upscale_aitchison(fld, m) if geometry == "aitchison" else upscale_euclidean(fld, m)
        cio.write_composition(up, out, "upscaled")
    man.config.update({"factor": f, "geometry": geometry})


def _dcfg(args, cfg):
    neighbors = _resolve(args, cfg, "neighbors", 25, _neighbors)
    family = _resolve(args, cfg, "family", "spherical")
    deconv = _resolve(args, cfg, "deconvolve", True, _bool)
    return DownscaleConfig(kriging=KrigingConfig(neighbors=neighbors), family=family, deconvolve=deconv)


def cmd_downscale(args, cfg, out: Path, man):
    f = int(_resolve(args, cfg, "factor", 0, int))
    if f < 1:
        raise UsageError("--factor is required")
    geometry = _resolve(args, cfg, "method", "aitchison")
    if geometry not in ("aitchison", "euclidean"):
        raise UsageError("--method must be aitchison or euclidean")
    config = _dcfg(args, cfg)
    fld, info = _read_any(args.input)
    fine = _fine_spec(fld.spec, f)
    m = CoarseFineMap.from_factor(fine, f)
    cov = _covariates(args.covariate, fine)
    models = [load_model(p) for p in args.model] if args.model else None
    man.model_files.extend(str(p) for p in (args.model or []))
    if info is None:
        res = atprk_scalar(fld, m, cov, models[0] if models else None, config)
        cio.write_ascii_grid(res.prediction, out / "prediction.asc")
        cio.write_ascii_grid(ScalarField(fine, res.variance[..., 0]), out / "variance.asc")
        _quicklook(res.prediction.values, out / "prediction.pgm")
    else:
        res = downscale_composition(fld, m, geometry, _basis(_resolve(args, cfg, "basis", ""), fld.p), cov, models, config)
        if geometry == "aitchison":
            cio.write_composition(res.prediction, out, "prediction")
        else:
            for i, name in enumerate(fld.part_names):
                cio.write_ascii_grid(ScalarField(fine, res.values[..., i]), out / f"prediction_{name}.asc")
        for j in range(res.variance.shape[-1]):
            cio.write_ascii_grid(ScalarField(fine, res.variance[..., j]), out / f"variance_{j + 1}.asc")
        for i in range(res.values.shape[-1]):
            _quicklook(res.values[..., i], out / f"prediction_{i + 1}.pgm")
        with open(out / "diagnostics.json", "w", encoding="utf-8") as fh:
            json.dump(res.diagnostics.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    (out / "trend.json").write_text(res.trend.to_json() + "\n", encoding="utf-8")
    for j, mo in enumerate(res.models):
        save_model(mo, out / f"model_{j + 1}.ini")
    man.config.update({"factor": f, "method": geometry, "neighbors": config.kriging.neighbors,
                       "family": config.family, "deconvolve": config.deconvolve})


def cmd_simulate(args, cfg, out: Path, man):
    n = int(_resolve(args, cfg, "realizations", 1, int))
    if args.synthetic:
        nrows = int(_resolve(args, cfg, "nrows", DESK.nrows, int))
        ncols = int(_resolve(args, cfg, "ncols", DESK.ncols, int))
        cs = float(_resolve(args, cfg, "cellsize", DESK.cellsize, float))
        stream = RngStream(args.seed)
        for i in range(n):
            fld, truth = generate_synthetic_psfs(GridSpec(ncols, nrows, cs), stream.child(i))
            cio.write_composition(fld, out / f"real_{i:03d}", "composition")
            man.notes[f"real_{i:03d}"] = {"center": truth.center.tolist(), "sill": truth.sill, "range": truth.range}
        man.config.update({"synthetic": True, "nrows": nrows, "ncols": ncols, "cellsize": cs, "realizations": n})
        return
    if not args.input:
        raise UsageError("--input is required unless --synthetic is given")
    f = int(_resolve(args, cfg, "factor", 0, int))
    if f < 1:
        raise UsageError("--factor is required")
    config = _dcfg(args, cfg)
    fld, _ = cio.read_composition(args.input)
    fine = _fine_spec(fld.spec, f)
    m = CoarseFineMap.from_factor(fine, f)
    cov = _covariates(args.covariate, fine)
    basis = _basis(_resolve(args, cfg, "basis", ""), fld.p)
    models = [load_model(p) for p in args.model] if args.model else None
    man.model_files.extend(str(p) for p in (args.model or []))
    ref = downscale_composition(fld, m, "aitchison", basis, cov, models, config)
    n_prev = int(_resolve(args, cfg, "n_prev", 16, int))
    bcfg = BsgsConfig(neighbors=config.kriging.neighbors or 25, n_prev=n_prev)
    ens = bsgs(fld, m, basis, ref.trend, ref.models, n, RngStream(args.seed), cov, bcfg)
    for i, r in enumerate(ens.realizations):
        cio.write_composition(r, out / f"real_{i:03d}", "composition")
    (out / "trend.json").write_text(ref.trend.to_json() + "\n", encoding="utf-8")
    for j, mo in enumerate(ref.models):
        save_model(mo, out / f"model_{j + 1}.ini")
    prov = dict(ens.provenance)
    prov.pop("seconds", None)
    man.notes["bsgs"] = prov
    man.config.update({"factor": f, "realizations": n, "neighbors": bcfg.neighbors, "n_prev": n_prev})


def cmd_deconvolve(args, cfg, out: Path, man):
    f = int(_resolve(args, cfg, "factor", 0, int))
    if f < 1:
        raise UsageError("--factor is required")
    family = _resolve(args, cfg, "family", "spherical")
    fld = cio.read_ascii_grid(args.input)
    vals = fld.values - np.nanmean(fld.values)
    emp = empirical_variogram(ScalarField(fld.spec, vals))
    fine = _fine_spec(fld.spec, f)
    res = deconvolve(emp, CoarseFineMap.from_factor(fine, f), family)
    save_model(res.model, out / "point_model.ini")
    save_model(res.coarse_model, out / "coarse_model.ini")
    cio.write_csv(
        [{"lag": float(h), "gamma": float(g), "pairs": int(c)} for h, g, c in zip(emp.lags, emp.gamma, emp.counts)],
        out / "empirical_variogram.csv",
    )
    report = {"converged": res.converged, "iterations": res.iterations, "discrepancy": res.discrepancy}
    with open(out / "deconvolution.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if res.warning:
        log.warning("deconvolution did not converge; best candidate written")
    man.config.update({"factor": f, "family": family})
    man.notes["deconvolution"] = report


def cmd_classify(args, cfg, out: Path, man):
    fld, _ = cio.read_composition(args.input)
    order = [s.strip() for s in _resolve(args, cfg, "order", "").split(",") if s.strip()]
    if order:
        idx = [fld.part_names.index(n) for n in order]
        fld = CompositionField(fld.spec, fld.values[..., idx], tuple(order))
    codes, counts = classify_field(fld)
    cio.write_ascii_grid(codes, out / "texture.asc")
    (out / "legend.csv").write_text(legend(), encoding="utf-8")
    cio.write_csv([{"class": k, "pixels": v} for k, v in counts.items()], out / "frequencies.csv")
    man.config.update({"order": list(fld.part_names)})


def _write_report(rep, out: Path, stem: str):
    cio.write_csv(rep.rows, out / f"{stem}_detail.csv")
    cio.write_csv(rep.summary(), out / f"{stem}_summary.csv")


def _profile(args, cfg) -> Profile:
    name = _resolve(args, cfg, "profile", "desk")
    if name not in ("desk", "full"):
        raise UsageError("--profile must be desk or full")
    return DESK if name == "desk" else FULL


def cmd_bench_synthetic(args, cfg, out: Path, man):
    prof = _profile(args, cfg)
    n = int(_resolve(args, cfg, "realizations", prof.n_real, int))
    factors = _int_list(_resolve(args, cfg, "factors", list(prof.factors), _int_list))
    methods = _methods(_resolve(args, cfg, "methods", "EE,EA,AE,AA"))
    nb = _resolve(args, cfg, "neighbors", 25, _neighbors)
    rep = run_synthetic(args.seed, prof, methods, nb, args.threads, n, factors)
    _write_report(rep, out, "synthetic")
    man.config.update({"profile": vars(prof), "realizations": n, "factors": factors,
                       "methods": [t.name for t in methods], "neighbors": nb})


def cmd_bench_sensitivity(args, cfg, out: Path, man):
    prof = _profile(args, cfg)
    n = int(_resolve(args, cfg, "realizations", prof.n_real, int))
    fr = _float_list(_resolve(args, cfg, "s2_fractions", [round(0.1 * k, 10) for k in range(1, 11)], _float_list))
    factor = int(_resolve(args, cfg, "factor", 15, int))
    sill = float(_resolve(args, cfg, "sill", 0.1, float))
    methods = _methods(_resolve(args, cfg, "methods", "EE,EA,AE,AA"))
    nb = _resolve(args, cfg, "neighbors", 25, _neighbors)
    rep = run_sensitivity(args.seed, fr, prof, factor, sill, methods=methods, neighbors=nb, threads=args.threads, n_real=n)
    _write_report(rep, out, "sensitivity")
    man.config.update({"profile": vars(prof), "realizations": n, "s2_fractions": fr, "factor": factor,
                       "sill": sill, "methods": [t.name for t in methods], "neighbors": nb})


def cmd_bench_updown(args, cfg, out: Path, man):
    fld, _ = cio.read_composition(args.input, zero_delta=args.zero_delta)
    factors = _int_list(_resolve(args, cfg, "factors", list(range(2, 11)), _int_list))
    methods = _methods(_resolve(args, cfg, "methods", "EE,EA,AE,AA"))
    nb = _resolve(args, cfg, "neighbors", 25, _neighbors)
    rep = run_updown(fld, factors, methods, nb)
    _write_report(rep, out, "updown")
    man.config.update({"factors": factors, "methods": [t.name for t in methods], "neighbors": nb})


STOCHASTIC = {"simulate", "bench-synthetic", "bench-sensitivity"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compdown", description="Compositional downscaling by ILR area-to-point regression cokriging.")
    p.add_argument("--version", action="version", version=f"compdown {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=False):
        sp.add_argument("--output", "-o", required=True, help="run directory")
        sp.add_argument("--config", help="INI file; options read from the section named after the command")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent realizations")
        sp.add_argument("--seed", type=int, required=seed, help="master random seed" + (" (required)" if seed else ""))
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("ilr", help="ILR coordinates of a composition (or back with --inverse)")
    sp.add_argument("--input", "-i", nargs="+", required=True, help="sidecar/CSV, or coordinate grids with --inverse")
    sp.add_argument("--inverse", action="store_true")
    sp.add_argument("--basis", help="sequential binary partition as a nested tuple, e.g. ((0,1),2)")
    sp.add_argument("--zero-delta", type=float, help="replace zero parts by this detection limit")
    common(sp)
    sp.set_defaults(func=cmd_ilr)

    sp = sub.add_parser("upscale", help="block means of a grid or composition")
    sp.add_argument("--input", "-i", required=True)
    sp.add_argument("--factor", "-f", type=int)
    sp.add_argument("--geometry", choices=("euclidean", "aitchison"))
    common(sp)
    sp.set_defaults(func=cmd_upscale)

    for name, func, help_ in (
        ("downscale", cmd_downscale, "regression kriging to a finer grid"),
        ("simulate", cmd_simulate, "block sequential simulation (or synthetic fields with --synthetic)"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--input", "-i", required=(name == "downscale"))
        sp.add_argument("--factor", "-f", type=int)
        sp.add_argument("--covariate", action="append", metavar="NAME=PATH", help="fine-grid covariate (repeatable)")
        sp.add_argument("--model", action="append", metavar="INI", help="point-support variogram per component (repeatable)")
        sp.add_argument("--neighbors", type=_neighbors, help="coarse blocks per pixel, or 'all'")
        sp.add_argument("--family", choices=("spherical", "exponential", "gaussian"))
        sp.add_argument("--deconvolve", type=_bool, help="deconvolve residual variograms (default true)")
        sp.add_argument("--basis")
        if name == "downscale":
            sp.add_argument("--method", choices=("aitchison", "euclidean"))
            common(sp)
        else:
            sp.add_argument("--realizations", "-n", type=int)
            sp.add_argument("--n-prev", dest="n_prev", type=int)
            sp.add_argument("--synthetic", action="store_true")
            sp.add_argument("--nrows", type=int)
            sp.add_argument("--ncols", type=int)
            sp.add_argument("--cellsize", type=float)
            common(sp, seed=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("deconvolve", help="point-support variogram from a coarse grid")
    sp.add_argument("--input", "-i", required=True)
    sp.add_argument("--factor", "-f", type=int)
    sp.add_argument("--family", choices=("spherical", "exponential", "gaussian"))
    common(sp)
    sp.set_defaults(func=cmd_deconvolve)

    sp = sub.add_parser("classify", help="USDA texture classes of a clay/silt/sand composition")
    sp.add_argument("--input", "-i", required=True)
    sp.add_argument("--order", help="part names in clay,silt,sand order (default: as stored)")
    common(sp)
    sp.set_defaults(func=cmd_classify)

    for name, func in (("bench-synthetic", cmd_bench_synthetic), ("bench-sensitivity", cmd_bench_sensitivity)):
        sp = sub.add_parser(name, help="synthetic benchmark" if name == "bench-synthetic" else "coarse-noise sensitivity benchmark")
        sp.add_argument("--realizations", "-n", type=int)
        sp.add_argument("--profile", choices=("desk", "full"))
        sp.add_argument("--methods", help="comma list of EE,EA,AE,AA")
        sp.add_argument("--neighbors", type=_neighbors)
        if name == "bench-synthetic":
            sp.add_argument("--factors", type=_int_list, help="upscaling factors, e.g. 2..15 or 2,4,8")
        else:
            sp.add_argument("--s2-fractions", dest="s2_fractions", type=_float_list, help="noise variance fractions of the sill")
            sp.add_argument("--factor", type=int)
            sp.add_argument("--sill", type=float)
        common(sp, seed=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("bench-updown", help="up-then-down reconstruction of a composition raster")
    sp.add_argument("--input", "-i", required=True)
    sp.add_argument("--factors", type=_int_list)
    sp.add_argument("--methods")
    sp.add_argument("--neighbors", type=_neighbors)
    sp.add_argument("--zero-delta", type=float)
    common(sp)
    sp.set_defaults(func=cmd_bench_updown)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.output)
    t0 = time.perf_counter()
    try:
        cfg = cio.read_config(args.config) if args.config else None
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        out.mkdir(parents=True, exist_ok=True)
        man = cio.RunManifest(args.command, {}, args.seed, version=__version__, backend=kernels.BACKEND)
        if args.config:
            man.config["config_file"] = str(args.config)
        args.func(args, cfg, out, man)
        man.wall_clock_seconds = time.perf_counter() - t0
        man.add_outputs((p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"), out)
        man.write(out / "manifest.json")
    except UsageError as exc:
        _emit_error("usage", str(exc), args.command)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        _emit_error(type(exc).__name__, str(exc), args.command)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
