"""Pure numpy implementations of the hot loops.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or when ``COMPDOWN_PURE_PYTHON=1``.
"""

from __future__ import annotations

import math

import numpy as np


def lag_sums(z, dy, dx, lag_width, nbins, max_dist):
    """Sums of squared differences over grid pixel pairs, binned by distance.

    Bin ``b`` holds pairs with distance in ``(b*lag_width, (b+1)*lag_width]``.
    NaN pixels are skipped. Returns ``(sq_sums, counts, dist_sums)``.
    """
    z = np.ascontiguousarray(z, dtype=float)
    n, m = z.shape
    sums = np.zeros(nbins)
    counts = np.zeros(nbins, dtype=np.int64)
    dsum = np.zeros(nbins)
    maxdi = min(n - 1, int(max_dist / dy))
    maxdj = min(m - 1, int(max_dist / dx))
    for di in range(0, maxdi + 1):
        for dj in range(-maxdj, maxdj + 1):
            if di == 0 and dj <= 0:
                continue
            h = math.sqrt((di * dy) ** 2 + (dj * dx) ** 2)
            if h > max_dist:
                continue
            b = math.ceil(h / lag_width - 1e-9) - 1
            if b < 0 or b >= nbins:
                continue
            j0, j1 = max(0, -dj), m - max(0, dj)
            d = z[: n - di, j0:j1] - z[di:, j0 + dj : j1 + dj]
            d = d[np.isfinite(d)]
            sums[b] += np.dot(d, d)
            counts[b] += d.size
            dsum[b] += h * d.size
    return sums, counts, dsum


def sgs_path(values, known, nrows, ncols, path, noise, search, cov_pp,
             blk_nbr, blk_val, bb, pb, coarse_ncols, fy, fx,
             c0, n_prev, ordinary, noise_scale, kvar):
    """Sequential Gaussian simulation along ``path``.

    Each node is kriged from its block neighbours (``blk_nbr`` row, point-to-
    block covariances from ``pb``) and from up to ``n_prev`` already known
    fine nodes found by scanning ``search`` offsets in order. The drawn value
    is written to ``values`` and the node is marked in ``known``.

    Returns -1 on success, or the flat index of a pixel whose block-only
    system was singular.
    """
    CR = pb.shape[2] // 2
    CC = pb.shape[3] // 2
    mb = blk_nbr.shape[1]
    for t in range(len(path)):
        k = int(path[t])
        if known[k]:
            kvar[t] = 0.0
            continue
        r, c = divmod(k, ncols)
        R, C = r // fy, c // fx
        a, b = r - R * fy, c - C * fx

        blocks = [int(K) for K in blk_nbr[k, :mb] if K >= 0] if mb else []
        pts = []
        for di, dj in search:
            if len(pts) >= n_prev:
                break
            rr, cc = r + di, c + dj
            if 0 <= rr < nrows and 0 <= cc < ncols:
                kk = rr * ncols + cc
                if known[kk]:
                    pts.append(kk)

        while True:
            nb, npt = len(blocks), len(pts)
            n = nb + npt
            if n == 0:
                mean, var = 0.0, c0
                break
            BR = np.array([K // coarse_ncols for K in blocks], dtype=np.int64)
            BC = np.array([K % coarse_ncols for K in blocks], dtype=np.int64)
            pr = np.array([kk // ncols for kk in pts], dtype=np.int64)
            pc = np.array([kk % ncols for kk in pts], dtype=np.int64)
            m = n + (1 if ordinary else 0)
            A = np.zeros((m, m))
            rhs = np.zeros(m)
            A[:nb, :nb] = bb[BR[:, None] - BR[None, :] + CR, BC[:, None] - BC[None, :] + CC]
            if npt:
                pR, pC = pr // fy, pc // fx
                pa, pb_ = pr - pR * fy, pc - pC * fx
                cross = pb[pa[None, :], pb_[None, :], BR[:, None] - pR[None, :] + CR, BC[:, None] - pC[None, :] + CC]
                A[:nb, nb:n] = cross
                A[nb:n, :nb] = cross.T
                A[nb:n, nb:n] = cov_pp[np.abs(pr[:, None] - pr[None, :]), np.abs(pc[:, None] - pc[None, :])]
                rhs[nb:n] = cov_pp[np.abs(pr - r), np.abs(pc - c)]
            rhs[:nb] = pb[a, b, BR - R + CR, BC - C + CC]
            if ordinary:
                A[:n, n] = 1.0
                A[n, :n] = 1.0
                rhs[n] = 1.0
            try:
                sol = np.linalg.solve(A, rhs)
                ok = np.all(np.isfinite(sol))
            except np.linalg.LinAlgError:
                ok = False
            if ok:
                vals = np.concatenate([np.asarray(blk_val)[blocks], np.asarray(values)[pts]]) if n else np.zeros(0)
                mean = float(np.dot(sol[:n], vals))
                var = c0 - float(np.dot(sol[:n], rhs[:n])) - (float(sol[n]) if ordinary else 0.0)
                break
            if not pts:
                return k
            pts.pop()
        values[k] = mean + noise_scale * math.sqrt(max(var, 0.0)) * noise[t]
        known[k] = 1
        kvar[t] = var
    return -1
