"""Area-to-point kriging on nested grids.

Every fine pixel is predicted from coarse block residuals with weights that
solve the bordered ordinary-kriging system

    [[S, F], [F^T, 0]] [W; mu] = [s; I]

where ``S`` holds block-to-block covariances, ``s`` point-to-block
covariances and ``F`` the unbiasedness constraints. The scalar case is
``q = 1``. The dense multivariate case uses a linear model of
coregionalization, giving matrix weights that sum to the identity.

Pixels that share the position inside their block and the relative layout
of their neighbour blocks share one system, so systems are solved once per
distinct layout and in batches.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .grid import CoarseFineMap
from .variogram import BlockCovarianceCache, VariogramModel


class KrigingError(ValueError):
    pass


@dataclass(frozen=True)
class KrigingConfig:
    """``neighbors``: number of nearest coarse blocks per fine pixel, ``None``
    for all valid blocks. ``pivot_tol``: largest accepted relative backward
    error of a solved system before it is declared singular.
    """

    neighbors: int | None = 25
    pivot_tol: float = 1e-8

    def __post_init__(self):
        if self.neighbors is not None and self.neighbors < 1:
            raise ValueError("neighbors must be at least 1")


@dataclass(frozen=True)
class LinearCoregionalization:
    """Cross-covariance ``C_ij(h) = sum_s B_s[i, j] * rho_s(h)``.

    ``structures`` are models whose covariances give ``rho_s``; ``matrices``
    has shape ``(S, q, q)`` with symmetric positive semi-definite slices.
    """

    structures: tuple[VariogramModel, ...]
    matrices: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.matrices, dtype=float)
        if B.ndim == 2:
            B = B[None]
        if B.shape[0] != len(self.structures) or B.shape[1] != B.shape[2]:
            raise ValueError("matrices must have shape (len(structures), q, q)")
        if not np.allclose(B, np.transpose(B, (0, 2, 1))):
            raise ValueError("coregionalization matrices must be symmetric")
        for s, b in enumerate(B):
            if np.linalg.eigvalsh(b).min() < -1e-12 * max(1.0, np.abs(b).max()):
                raise ValueError(f"coregionalization matrix {s} is not positive semi-definite")
        object.__setattr__(self, "structures", tuple(self.structures))
        object.__setattr__(self, "matrices", B)

    @property
    def q(self) -> int:
        return self.matrices.shape[1]

    @classmethod
    def scalar(cls, model: VariogramModel) -> "LinearCoregionalization":
        return cls((model,), np.ones((1, 1, 1)))

    def rotated(self, R: np.ndarray) -> "LinearCoregionalization":
        """Model of ``R @ y`` when this one describes ``y``."""
        R = np.asarray(R, float)
        return LinearCoregionalization(self.structures, np.einsum("ia,sab,jb->sij", R, self.matrices, R))


# -- brute-force covariance definitions --------------------------------------


def _centers(m: CoarseFineMap, pixels) -> np.ndarray:
    cs = m.fine.cellsize
    return np.array([(r * cs, c * cs) for r, c in pixels], dtype=float)


def block_block_cov(model: VariogramModel, K1, K2, m: CoarseFineMap) -> float:
    """Mean point covariance over all fine-center pairs of blocks ``K1`` and ``K2``."""
    K1, K2 = sorted((tuple(K1), tuple(K2)))  # fixed summation order keeps it exactly symmetric
    a = _centers(m, m.fine_pixels_of(*K1))
    b = _centers(m, m.fine_pixels_of(*K2))
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return float(model.cov(d).mean())


def point_block_cov(model: VariogramModel, k, K, m: CoarseFineMap) -> float:
    """Mean point covariance between fine pixel ``k`` and the fine centers of block ``K``."""
    m.block_of(*k)
    b = _centers(m, m.fine_pixels_of(*K))
    a = _centers(m, [k])[0]
    return float(model.cov(np.hypot(b[:, 0] - a[0], b[:, 1] - a[1])).mean())


# -- neighbourhoods -----------------------------------------------------------


class Neighborhoods:
    """Coarse conditioning blocks for every fine pixel.

    ``blocks`` has shape ``(N, k)`` over flat fine pixels and holds flat
    coarse indices ordered by center distance with ties to the lower
    ``(row, col)``, padded with -1. Pixels whose own block is invalid get an
    all -1 row and are not predicted. With ``count=None`` (or at least the
    number of valid blocks) every pixel uses every valid block and
    ``is_global`` is true.
    """

    def __init__(self, m: CoarseFineMap, count: int | None = 25, valid_blocks: np.ndarray | None = None):
        self.map = m
        cs = m.coarse
        valid = np.ones(cs.shape, bool) if valid_blocks is None else np.asarray(valid_blocks, bool).reshape(cs.shape)
        self.valid_blocks = valid
        n_valid = int(valid.sum())
        if n_valid == 0:
            raise KrigingError("no valid coarse blocks")
        self.is_global = count is None or count >= n_valid
        self.count = n_valid if self.is_global else int(count)
        bidx = m.block_index().ravel()
        self.target = valid.ravel()[bidx]
        if self.is_global:
            self.global_blocks = np.flatnonzero(valid.ravel())
            self.blocks = np.where(self.target[:, None], self.global_blocks[None, :], -1)
        else:
            self.blocks = _nearest_local(m, valid, self.count)
        self._pattern_cache = None

    @property
    def k(self) -> int:
        return self.blocks.shape[1]

    def patterns(self):
        """Distinct systems: ``(offsets (U, 2), lags (U, k, 2), counts (U,), inverse (N,))``.

        ``lags`` are neighbour block positions relative to the pixel's own
        block, zero-padded beyond ``counts``; ``inverse`` maps each fine pixel
        to its system (-1 for skipped pixels).
        """
        if self._pattern_cache is None:
            self._pattern_cache = _patterns(self)
        return self._pattern_cache


def _nearest_local(m: CoarseFineMap, valid: np.ndarray, count: int) -> np.ndarray:
    cs = m.coarse
    Rn, Cn = cs.shape
    fy, fx = m.fy, m.fx
    need = min(count, int(valid.sum()))
    R, C = np.divmod(np.arange(cs.size), Cn)
    tgt = valid.ravel()
    out = np.full((m.fine.nrows, m.fine.ncols, need), -1, dtype=np.int64)
    view = out.reshape(Rn, fy, Cn, fx, need)
    rad0 = int(np.ceil(np.sqrt(need))) + 1
    for a in range(fy):
        for b in range(fx):
            rad = rad0
            while True:
                dR, dC = np.meshgrid(np.arange(-rad, rad + 1), np.arange(-rad, rad + 1), indexing="ij")
                dR, dC = dR.ravel(), dC.ravel()
                d2 = (2 * a + 1 - fy - 2 * dR * fy) ** 2 + (2 * b + 1 - fx - 2 * dC * fx) ** 2
                order = np.lexsort((dC, dR, d2))
                dR, dC, d2 = dR[order], dC[order], d2[order]
                RR = R[tgt][:, None] + dR[None, :]
                CC = C[tgt][:, None] + dC[None, :]
                inb = (RR >= 0) & (RR < Rn) & (CC >= 0) & (CC < Cn)
                inb &= valid[np.clip(RR, 0, Rn - 1), np.clip(CC, 0, Cn - 1)]
                sel = inb & (np.cumsum(inb, axis=1) <= need)
                covers = rad >= max(Rn, Cn)
                if covers or np.all(sel.sum(axis=1) == need):
                    # nothing outside the window may be strictly closer or tie
                    d_out = min((2 * (rad + 1) * fy - fy + 1) ** 2, (2 * (rad + 1) * fx - fx + 1) ** 2)
                    worst = np.where(sel, d2[None, :], -1).max(axis=1)
                    if covers or np.all(worst < d_out):
                        break
                rad *= 2
            idx = np.argsort(~sel, axis=1, kind="stable")[:, :need]
            flat = np.take_along_axis(RR * Cn + CC, idx, axis=1)
            flat = np.where(np.take_along_axis(sel, idx, axis=1), flat, -1)
            tR, tC = R[tgt], C[tgt]
            view[tR, a, tC, b, :] = flat
    return out.reshape(m.fine.size, need)


def _patterns(nb: Neighborhoods):
    m = nb.map
    Cn = m.coarse.ncols
    N = m.fine.size
    r, c = np.divmod(np.arange(N), m.fine.ncols)
    R, C = r // m.fy, c // m.fx
    a, b = r - R * m.fy, c - C * m.fx
    blk = nb.blocks
    has = blk >= 0
    bR, bC = np.divmod(np.where(has, blk, 0), Cn)
    lagR = np.where(has, bR - R[:, None], 0)
    lagC = np.where(has, bC - C[:, None], 0)
    counts = has.sum(axis=1)
    tgt = np.flatnonzero(nb.target)
    key = np.concatenate([a[tgt, None], b[tgt, None], counts[tgt, None], lagR[tgt], lagC[tgt]], axis=1)
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = np.full(N, -1, dtype=np.int64)
    inverse[tgt] = inv.ravel()
    k = blk.shape[1]
    offsets = uniq[:, :2]
    ucounts = uniq[:, 2]
    lags = np.stack([uniq[:, 3 : 3 + k], uniq[:, 3 + k :]], axis=-1)
    return offsets, lags, ucounts, inverse


# -- solving --------------------------------------------------------------------


@dataclass
class AtpkSolution:
    """Fine-scale kriging output.

    ``prediction`` and ``variance`` have shape ``(nrows, ncols, q)`` (NaN at
    skipped pixels). ``weights[k, i]`` is the ``q x q`` weight matrix applied
    to neighbour ``neighbors.blocks[k, i]``: output component = row,
    input component = column. Diagonal (independent component) runs have
    diagonal weight matrices.
    """

    prediction: np.ndarray
    variance: np.ndarray
    weights: np.ndarray
    neighbors: Neighborhoods

    def pixel_weights(self, r: int, c: int):
        k = r * self.neighbors.map.fine.ncols + c
        blk = self.neighbors.blocks[k]
        keep = blk >= 0
        return blk[keep], self.weights[k][keep]


def _caches(lmc: LinearCoregionalization, m: CoarseFineMap, lag_rows: int, lag_cols: int):
    return [BlockCovarianceCache.from_model(s, m, lag_rows=lag_rows, lag_cols=lag_cols) for s in lmc.structures]


def _assemble(caches, B, offsets, lags, n):
    """Bordered matrices and right-hand sides for systems with ``n`` neighbours."""
    q = B.shape[1]
    G = offsets.shape[0]
    L = lags[:, :n]
    dR = L[:, :, None, 0] - L[:, None, :, 0]
    dC = L[:, :, None, 1] - L[:, None, :, 1]
    nq = n * q
    A = np.zeros((G, nq + q, nq + q))
    rhs = np.zeros((G, nq + q, q))
    for s, cache in enumerate(caches):
        bbv = cache.bb[dR + cache.lag_rows, dC + cache.lag_cols]  # (G, n, n)
        pbv = cache.pb[offsets[:, 0, None], offsets[:, 1, None], L[..., 0] + cache.lag_rows, L[..., 1] + cache.lag_cols]
        if q == 1:
            A[:, :n, :n] += B[s, 0, 0] * bbv
            rhs[:, :n, 0] += B[s, 0, 0] * pbv
        else:
            A[:, :nq, :nq] += np.einsum("ac,gij->giajc", B[s], bbv).reshape(G, nq, nq)
            rhs[:, :nq, :] += np.einsum("ac,gi->giac", B[s], pbv).reshape(G, nq, q)
    F = np.tile(np.eye(q), (n, 1))
    A[:, :nq, nq:] = F
    A[:, nq:, :nq] = F.T
    rhs[:, nq:, :] = np.eye(q)
    return A, rhs


def _degenerate_message(A, n, q, blocks):
    nq = n * q
    S = A[:nq, :nq]
    dup = []
    for i in range(n):
        for j in range(i + 1, n):
            ri, rj = S[i * q : (i + 1) * q], S[j * q : (j + 1) * q]
            if np.allclose(ri, rj, rtol=1e-10, atol=1e-14 * max(1.0, np.abs(S).max())):
                dup.append((blocks[i], blocks[j]))
    if dup:
        return f"blocks with indistinguishable covariances: {dup}"
    return f"covariance matrix of blocks {list(blocks)} is degenerate"


def _solve_batch(A, rhs, tol):
    """Solve a stack of systems; returns (X, ok mask)."""
    try:
        X = np.linalg.solve(A, rhs)
        ok = np.ones(A.shape[0], bool)
    except np.linalg.LinAlgError:
        X = np.full(rhs.shape, np.nan)
        ok = np.zeros(A.shape[0], bool)
        for g in range(A.shape[0]):
            try:
                X[g] = np.linalg.solve(A[g], rhs[g])
                ok[g] = True
            except np.linalg.LinAlgError:
                pass
    res = np.abs(np.einsum("gij,gjk->gik", A, np.nan_to_num(X)) - rhs).max(axis=(1, 2))
    scale = np.abs(A).max(axis=(1, 2)) * np.abs(np.nan_to_num(X)).max(axis=(1, 2)) + np.abs(rhs).max(axis=(1, 2))
    ok &= np.isfinite(X).all(axis=(1, 2)) & (res <= tol * scale)
    return X, ok


def _pixel_of_pattern(inverse, u, ncols):
    k = int(np.flatnonzero(inverse == u)[0])
    return divmod(k, ncols)


_CHUNK_ELEMS = 4_000_000


def _krige_local(nb: Neighborhoods, lmc: LinearCoregionalization, values: np.ndarray, tol: float):
    m = nb.map
    q = lmc.q
    B = lmc.matrices
    offsets, lags, counts, inverse = nb.patterns()
    U, k = lags.shape[0], lags.shape[1]
    lr = min(2 * int(np.abs(lags[..., 0]).max()), m.coarse.nrows - 1)
    lc = min(2 * int(np.abs(lags[..., 1]).max()), m.coarse.ncols - 1)
    caches = _caches(lmc, m, lr, lc)
    c0 = np.einsum("s,saa->a", np.array([c.c0 for c in caches]), B)

    Wu = np.zeros((U, k, q, q))
    Vu = np.zeros((U, q))
    for n in np.unique(counts):
        grp = np.flatnonzero(counts == n)
        size = (n * q + q) ** 2
        step = max(1, _CHUNK_ELEMS // size)
        for s0 in range(0, grp.size, step):
            g = grp[s0 : s0 + step]
            A, rhs = _assemble(caches, B, offsets[g], lags[g], n)
            X, ok = _solve_batch(A, rhs, tol)
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                r, c = _pixel_of_pattern(inverse, g[bad], m.fine.ncols)
                R, C = r // m.fy, c // m.fx
                blocks = [(int(R + dr), int(C + dc)) for dr, dc in lags[g[bad], :n]]
                raise KrigingError(f"singular kriging system at fine pixel ({r}, {c}): "
                                   + _degenerate_message(A[bad], n, q, blocks))
            nq = n * q
            W = X[:, :nq, :].reshape(len(g), n, q, q)  # [g, i, ci, co]
            Wu[g, :n] = np.transpose(W, (0, 1, 3, 2))
            sig = rhs[:, :nq, :]
            Vu[g] = c0[None, :] - np.einsum("gjc,gjc->gc", X[:, :nq, :], sig) - np.einsum("gcc->gc", X[:, nq:, :])
    tgt = inverse >= 0
    N = m.fine.size
    weights = np.zeros((N, k, q, q))
    weights[tgt] = Wu[inverse[tgt]]
    var = np.full((N, q), np.nan)
    var[tgt] = Vu[inverse[tgt]]
    return weights, var


def _krige_global(nb: Neighborhoods, lmc: LinearCoregionalization, tol: float):
    m = nb.map
    q = lmc.q
    B = lmc.matrices
    Cn = m.coarse.ncols
    blocks = nb.global_blocks
    n = blocks.size
    caches = _caches(lmc, m, m.coarse.nrows - 1, m.coarse.ncols - 1)
    c0 = np.einsum("s,saa->a", np.array([c.c0 for c in caches]), B)
    bR, bC = np.divmod(blocks, Cn)
    lagsK = np.stack([bR, bC], axis=-1)[None]  # absolute positions, shared system
    A, _ = _assemble(caches, B, np.zeros((1, 2), dtype=np.int64), lagsK, n)
    A = A[0]
    nq = n * q
    try:
        lu = scipy.linalg.lu_factor(A, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        lu = None
    if lu is None or np.any(np.abs(np.diag(lu[0])) <= tol * np.abs(A).max()):
        blist = [(int(r), int(c)) for r, c in zip(bR, bC)]
        raise KrigingError("singular kriging system for the global neighbourhood: " + _degenerate_message(A, n, q, blist))

    N = m.fine.size
    tgt = np.flatnonzero(nb.target)
    weights = np.zeros((N, n, q, q))
    var = np.full((N, q), np.nan)
    rows, cols = np.divmod(tgt, m.fine.ncols)
    R, C = rows // m.fy, cols // m.fx
    a, b = rows - R * m.fy, cols - C * m.fx
    step = max(1, _CHUNK_ELEMS // max(1, nq * q))
    for s0 in range(0, tgt.size, step):
        sl = slice(s0, s0 + step)
        G = tgt[sl].size
        rhs = np.zeros((G, nq + q, q))
        for s, cache in enumerate(caches):
            pbv = cache.pb[a[sl, None], b[sl, None], bR[None, :] - R[sl, None] + cache.lag_rows, bC[None, :] - C[sl, None] + cache.lag_cols]
            rhs[:, :nq, :] += np.einsum("ac,gi->giac", B[s], pbv).reshape(G, nq, q)
        rhs[:, nq:, :] = np.eye(q)
        X = scipy.linalg.lu_solve(lu, np.transpose(rhs, (1, 0, 2)).reshape(nq + q, G * q)).reshape(nq + q, G, q)
        X = np.transpose(X, (1, 0, 2))
        if not np.isfinite(X).all():
            raise KrigingError("non-finite kriging weights for the global neighbourhood")
        W = X[:, :nq, :].reshape(G, n, q, q)
        weights[tgt[sl]] = np.transpose(W, (0, 1, 3, 2))
        var[tgt[sl]] = c0[None, :] - np.einsum("gjc,gjc->gc", X[:, :nq, :], rhs[:, :nq, :]) - np.einsum("gcc->gc", X[:, nq:, :])
    return weights, var


def _apply(nb: Neighborhoods, weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Predictions ``sum_i W_i @ e_{K_i}`` for all pixels, shape ``(N, q)``."""
    blk = nb.blocks
    has = blk >= 0
    e = values[np.where(has, blk, 0)]  # (N, k, q)
    e = np.where(has[..., None], e, 0.0)
    pred = np.einsum("nkoc,nkc->no", weights, e)
    pred[~nb.target] = np.nan
    return pred


def _coarse_values(residuals: np.ndarray, m: CoarseFineMap) -> np.ndarray:
    e = np.asarray(residuals, dtype=float)
    if e.ndim == 2:
        e = e[..., None]
    if e.shape[:2] != m.coarse.shape:
        raise KrigingError(f"residuals have shape {e.shape[:2]}, coarse grid is {m.coarse.shape}")
    return e.reshape(m.coarse.size, e.shape[-1])


@functools.lru_cache(maxsize=8)
def _cached_neighborhoods(m: CoarseFineMap, count, valid_bytes: bytes) -> Neighborhoods:
    valid = np.frombuffer(valid_bytes, dtype=bool).reshape(m.coarse.shape)
    return Neighborhoods(m, count, valid)


def _neighborhoods(m, values, config, nb):
    if nb is not None:
        return nb
    valid = np.isfinite(values).all(axis=-1)
    return _cached_neighborhoods(m, config.neighbors, valid.tobytes())


def _run(e, lmc: LinearCoregionalization, m: CoarseFineMap, config: KrigingConfig, nb: Neighborhoods):
    if nb.is_global:
        W, var = _krige_global(nb, lmc, config.pivot_tol)
    else:
        W, var = _krige_local(nb, lmc, e, config.pivot_tol)
    return _apply(nb, W, np.nan_to_num(e)), var, W


def cokrige(residuals, lmc: LinearCoregionalization, m: CoarseFineMap, config: KrigingConfig = KrigingConfig(), neighborhoods=None) -> AtpkSolution:
    """Dense matrix-weight area-to-point cokriging of all components jointly."""
    e = _coarse_values(residuals, m)
    if e.shape[1] != lmc.q:
        raise KrigingError(f"{e.shape[1]} residual components for a {lmc.q}-variate model")
    nb = _neighborhoods(m, e, config, neighborhoods)
    pred, var, W = _run(e, lmc, m, config, nb)
    shape = m.fine.shape + (lmc.q,)
    return AtpkSolution(pred.reshape(shape), var.reshape(shape), W, nb)


def predict_residual_field(residuals, models: Sequence[VariogramModel] | VariogramModel, m: CoarseFineMap,
                           config: KrigingConfig = KrigingConfig(), neighborhoods=None) -> AtpkSolution:
    """Independent area-to-point kriging of each residual component.

    One model per component; all components share the neighbourhoods.
    """
    e = _coarse_values(residuals, m)
    if isinstance(models, VariogramModel):
        models = [models]
    models = list(models)
    q = e.shape[1]
    if len(models) != q:
        raise KrigingError(f"{len(models)} models for {q} residual components")
    nb = _neighborhoods(m, e, config, neighborhoods)
    N = m.fine.size
    pred = np.zeros((N, q))
    var = np.zeros((N, q))
    W = np.zeros((N, nb.k, q, q))
    for j, model in enumerate(models):
        pj, vj, wj = _run(e[:, j : j + 1], LinearCoregionalization.scalar(model), m, config, nb)
        pred[:, j] = pj[:, 0]
        var[:, j] = vj[:, 0]
        W[:, :, j, j] = wj[:, :, 0, 0]
    shape = m.fine.shape + (q,)
    return AtpkSolution(pred.reshape(shape), var.reshape(shape), W, nb)


def solve_atpk(target, residuals, model: VariogramModel, m: CoarseFineMap, config: KrigingConfig = KrigingConfig()):
    """Kriging at one fine pixel ``target = (row, col)``.

    Returns ``(prediction, weights, variance, blocks)`` where ``blocks`` lists
    the ``(row, col)`` of the conditioning blocks in weight order.
    """
    r, c = target
    e = _coarse_values(residuals, m)[:, 0]
    valid = np.isfinite(e).reshape(m.coarse.shape)
    R, C = m.block_of(r, c)
    if not valid[R, C]:
        raise KrigingError(f"fine pixel ({r}, {c}) lies in a nodata block")
    count = int(valid.sum()) if config.neighbors is None else config.neighbors
    blocks = m.nearest_blocks(r, c, count, valid)
    n = len(blocks)
    lags = np.array([[bR - R, bC - C] for bR, bC in blocks], dtype=np.int64)
    lr = min(2 * int(np.abs(lags[:, 0]).max()), m.coarse.nrows - 1)
    lc = min(2 * int(np.abs(lags[:, 1]).max()), m.coarse.ncols - 1)
    caches = _caches(LinearCoregionalization.scalar(model), m, lr, lc)
    A, rhs = _assemble(caches, np.ones((1, 1, 1)), np.array([[r - R * m.fy, c - C * m.fx]]), lags[None], n)
    X, ok = _solve_batch(A, rhs, config.pivot_tol)
    if not ok[0]:
        raise KrigingError(f"singular kriging system at fine pixel ({r}, {c}): " + _degenerate_message(A[0], n, 1, blocks))
    lam = X[0, :n, 0]
    mu = X[0, n, 0]
    vals = np.array([e[bR * m.coarse.ncols + bC] for bR, bC in blocks])
    var = caches[0].c0 - lam @ rhs[0, :n, 0] - mu
    return float(lam @ vals), lam, float(var), blocks
