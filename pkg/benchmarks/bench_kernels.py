"""Compiled vs pure-Python kernels: timings and output agreement.

    python benchmarks/bench_kernels.py [--size 48] [--repeat 3]

Each workload runs through the public API with ``compdown.kernels`` pointed
at one backend, then the other; results must agree to round-off.
"""

from __future__ import annotations

import argparse
import contextlib
import time

import numpy as np

from compdown import _pykernels, kernels, simplex
from compdown.downscale import ilr_atprcok
from compdown.grid import CoarseFineMap, GridSpec, upscale_aitchison
from compdown.rng import RngStream
from compdown.simulation import bsgs, generate_synthetic_psfs, simulate_grf
from compdown.variogram import VariogramModel, empirical_variogram

try:
    from compdown import _ckernels
except ImportError:
    _ckernels = None


@contextlib.contextmanager
def backend(mod):
    saved = kernels.lag_sums, kernels.sgs_path
    kernels.lag_sums, kernels.sgs_path = mod.lag_sums, mod.sgs_path
    try:
        yield
    finally:
        kernels.lag_sums, kernels.sgs_path = saved


def timed(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def workloads(n):
    spec = GridSpec(n, n, 20.0)
    model = VariogramModel("spherical", 0.0, 0.5, 400.0)
    big = simulate_grf(model, GridSpec(2 * n, 2 * n, 20.0), 0)
    basis = simplex.default_basis(3)
    m = CoarseFineMap.from_factor(spec, 6 if n % 6 == 0 else 4)
    truth, tr = generate_synthetic_psfs(spec, 5, sill=0.5, method="dense")
    coarse = upscale_aitchison(truth, m)
    res = ilr_atprcok(coarse, m, basis, models=[tr.model] * 2)

    def ens():
        e = bsgs(coarse, m, basis, res.trend, [tr.model] * 2, 2, RngStream(1))
        return e.ilr_stack(basis)

    return {
        "lag_sums": lambda: empirical_variogram(big).gamma,
        "sequential GRF": lambda: simulate_grf(model, spec, 3, method="sequential").values,
        "BSGS (2 realizations)": ens,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=48, help="fine grid side in cells")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    print(f"{'workload':<24}{'cython s':>10}{'python s':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in workloads(args.size).items():
        with backend(_ckernels):
            tc, oc = timed(fn, args.repeat)
        with backend(_pykernels):
            tp, op = timed(fn, args.repeat)
        diff = float(np.nanmax(np.abs(np.asarray(oc) - np.asarray(op))))
        print(f"{name:<24}{tc:>10.4f}{tp:>10.4f}{tp / tc:>8.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
