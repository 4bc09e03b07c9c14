# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. See ``_pykernels`` for the reference semantics."""

import numpy as np

from libc.math cimport sqrt, ceil, isfinite
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from scipy.linalg.cython_lapack cimport dgesv


def lag_sums(const double[:, ::1] z, double dy, double dx, double lag_width,
             int nbins, double max_dist):
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1]
    sums_a = np.zeros(nbins)
    counts_a = np.zeros(nbins, dtype=np.int64)
    dsum_a = np.zeros(nbins)
    cdef double[::1] sums = sums_a
    cdef long long[::1] counts = counts_a
    cdef double[::1] dsum = dsum_a
    cdef Py_ssize_t maxdi = min(n - 1, <Py_ssize_t>(max_dist / dy))
    cdef Py_ssize_t maxdj = min(m - 1, <Py_ssize_t>(max_dist / dx))
    cdef Py_ssize_t di, dj, i, j, j0, j1, b
    cdef double h, d, acc
    cdef long long cnt
    with nogil:
        for di in range(0, maxdi + 1):
            for dj in range(-maxdj, maxdj + 1):
                if di == 0 and dj <= 0:
                    continue
                h = sqrt((di * dy) * (di * dy) + (dj * dx) * (dj * dx))
                if h > max_dist:
                    continue
                b = <Py_ssize_t>ceil(h / lag_width - 1e-9) - 1
                if b < 0 or b >= nbins:
                    continue
                j0 = -dj if dj < 0 else 0
                j1 = m - dj if dj > 0 else m
                acc = 0.0
                cnt = 0
                for i in range(0, n - di):
                    for j in range(j0, j1):
                        d = z[i, j] - z[i + di, j + dj]
                        if isfinite(d):
                            acc += d * d
                            cnt += 1
                sums[b] += acc
                counts[b] += cnt
                dsum[b] += h * cnt
    return sums_a, counts_a, dsum_a


cdef inline Py_ssize_t _iabs(Py_ssize_t x) nogil:
    return -x if x < 0 else x


def sgs_path(double[::1] values, unsigned char[::1] known, int nrows, int ncols,
             const long long[::1] path, const double[::1] noise,
             const int[:, ::1] search, const double[:, ::1] cov_pp,
             const int[:, ::1] blk_nbr, const double[::1] blk_val,
             const double[:, ::1] bb, const double[:, :, :, ::1] pb,
             int coarse_ncols, int fy, int fx,
             double c0, int n_prev, bint ordinary, double noise_scale,
             double[::1] kvar):
    cdef Py_ssize_t CR = pb.shape[2] // 2
    cdef Py_ssize_t CC = pb.shape[3] // 2
    cdef Py_ssize_t mb = blk_nbr.shape[1]
    cdef Py_ssize_t ns = search.shape[0]
    cdef Py_ssize_t nmax = mb + n_prev + 1
    cdef Py_ssize_t t, k, r, c, R, C, a, b, q, s, rr, cc, kk
    cdef Py_ssize_t nb, npt, n, i, j, Ri, Ci, Rj, Cj, ri, ci, rj, cj
    cdef int mdim, nrhs = 1, info
    cdef double mean, var, acc
    cdef long long failed = -1
    cdef int *bidx = <int *> malloc(nmax * sizeof(int))
    cdef long long *pidx = <long long *> malloc(nmax * sizeof(long long))
    cdef double *A = <double *> malloc(nmax * nmax * sizeof(double))
    cdef double *rhs = <double *> malloc(nmax * sizeof(double))
    cdef double *sol = <double *> malloc(nmax * sizeof(double))
    cdef int *ipiv = <int *> malloc(nmax * sizeof(int))
    if not (bidx and pidx and A and rhs and sol and ipiv):
        free(bidx); free(pidx); free(A); free(rhs); free(sol); free(ipiv)
        raise MemoryError()
    try:
        with nogil:
            for t in range(path.shape[0]):
                k = path[t]
                if known[k]:
                    kvar[t] = 0.0
                    continue
                r = k // ncols
                c = k - r * ncols
                R = r // fy
                C = c // fx
                a = r - R * fy
                b = c - C * fx

                nb = 0
                for q in range(mb):
                    if blk_nbr[k, q] < 0:
                        break
                    bidx[nb] = blk_nbr[k, q]
                    nb += 1
                npt = 0
                for s in range(ns):
                    if npt >= n_prev:
                        break
                    rr = r + search[s, 0]
                    cc = c + search[s, 1]
                    if rr < 0 or rr >= nrows or cc < 0 or cc >= ncols:
                        continue
                    kk = rr * ncols + cc
                    if known[kk]:
                        pidx[npt] = kk
                        npt += 1

                while True:
                    n = nb + npt
                    if n == 0:
                        mean = 0.0
                        var = c0
                        break
                    mdim = <int>(n + (1 if ordinary else 0))
                    # column-major; the matrix is symmetric so layout only matters for clarity
                    for i in range(nb):
                        Ri = bidx[i] // coarse_ncols
                        Ci = bidx[i] - Ri * coarse_ncols
                        for j in range(nb):
                            Rj = bidx[j] // coarse_ncols
                            Cj = bidx[j] - Rj * coarse_ncols
                            A[i + j * mdim] = bb[Ri - Rj + CR, Ci - Cj + CC]
                        for j in range(npt):
                            rj = pidx[j] // ncols
                            cj = pidx[j] - rj * ncols
                            Rj = rj // fy
                            Cj = cj // fx
                            acc = pb[rj - Rj * fy, cj - Cj * fx, Ri - Rj + CR, Ci - Cj + CC]
                            A[i + (nb + j) * mdim] = acc
                            A[(nb + j) + i * mdim] = acc
                        rhs[i] = pb[a, b, Ri - R + CR, Ci - C + CC]
                    for i in range(npt):
                        ri = pidx[i] // ncols
                        ci = pidx[i] - ri * ncols
                        for j in range(npt):
                            rj = pidx[j] // ncols
                            cj = pidx[j] - rj * ncols
                            A[(nb + i) + (nb + j) * mdim] = cov_pp[_iabs(ri - rj), _iabs(ci - cj)]
                        rhs[nb + i] = cov_pp[_iabs(ri - r), _iabs(ci - c)]
                    if ordinary:
                        for i in range(n):
                            A[i + n * mdim] = 1.0
                            A[n + i * mdim] = 1.0
                        A[n + n * mdim] = 0.0
                        rhs[n] = 1.0
                    memcpy(sol, rhs, mdim * sizeof(double))
                    dgesv(&mdim, &nrhs, A, &mdim, ipiv, sol, &mdim, &info)
                    if info == 0:
                        for i in range(mdim):
                            if not isfinite(sol[i]):
                                info = 1
                                break
                    if info == 0:
                        mean = 0.0
                        var = c0
                        for i in range(nb):
                            mean += sol[i] * blk_val[bidx[i]]
                            var -= sol[i] * rhs[i]
                        for i in range(npt):
                            mean += sol[nb + i] * values[pidx[i]]
                            var -= sol[nb + i] * rhs[nb + i]
                        if ordinary:
                            var -= sol[n]
                        break
                    if npt == 0:
                        failed = k
                        break
                    npt -= 1
                if failed >= 0:
                    break
                values[k] = mean + noise_scale * sqrt(var if var > 0.0 else 0.0) * noise[t]
                known[k] = 1
                kvar[t] = var
    finally:
        free(bidx); free(pidx); free(A); free(rhs); free(sol); free(ipiv)
    return failed
