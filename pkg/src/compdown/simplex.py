"""Aitchison geometry on the open simplex.

Compositions are plain numpy arrays whose last axis holds the ``p`` parts, so
every function here works on a single composition of shape ``(p,)`` or on a
stack of them of shape ``(..., p)``.

Parts must be strictly positive: log-ratios are undefined on the boundary of
the simplex. Use :func:`replace_zeros` at ingestion time when the data carry
rounded zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

UNIT_SUM_TOL = 1e-9
RECLOSE_TOL = 1e-6


class CompositionError(ValueError):
    """Raised for values that are not valid compositions."""


def _as_parts(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise CompositionError("a composition needs at least 2 parts")
    return x


def _check_positive(x: np.ndarray) -> None:
    bad = ~(x > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise CompositionError(
            f"non-positive part at index {idx if len(idx) > 1 else idx[0]}: "
            f"{x[idx]!r}"
        )


def _check_same_p(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise CompositionError(
            f"dimension mismatch: {x.shape[-1]} parts vs {y.shape[-1]} parts"
        )


def closure(x) -> np.ndarray:
    """Rescale positive vectors to unit sum.

    Raises
    ------
    CompositionError
        If any entry is zero, negative or not finite. The message names the
        offending index.

    Examples
    --------
    >>> closure([1, 1, 2])
    array([0.25, 0.25, 0.5 ])
    """
    x = _as_parts(x)
    _check_positive(x)
    if not np.isfinite(x).all():
        raise CompositionError("non-finite part")
    return x / x.sum(axis=-1, keepdims=True)


def as_composition(x, tol: float = RECLOSE_TOL) -> np.ndarray:
    """Validate already-closed data, re-closing small unit-sum drift.

    Values whose sums are within ``tol`` of one are re-closed silently;
    anything further away is rejected rather than guessed at.
    """
    x = _as_parts(x)
    _check_positive(x)
    s = x.sum(axis=-1)
    off = np.abs(s - 1.0) > tol
    if np.any(off):
        idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(off))[0])
        raise CompositionError(
            f"parts sum to {np.atleast_1d(s)[idx]!r}, not 1 (tolerance {tol})"
            + (f" at {idx}" if np.ndim(s) else "")
        )
    return x / s[..., None]


def is_composition(x, tol: float = UNIT_SUM_TOL) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(x > 0) and np.all(np.abs(x.sum(axis=-1) - 1.0) <= tol))


def replace_zeros(x, delta: float = 1e-6) -> np.ndarray:
    """Multiplicative replacement of zero parts by ``delta``, then closure.

    Non-zero parts are shrunk so that the ratios among them are kept.
    """
    x = _as_parts(x)
    if np.any(x < 0):
        raise CompositionError("negative part")
    s = x.sum(axis=-1, keepdims=True)
    if np.any(s == 0):
        raise CompositionError("composition with all parts zero")
    x = x / s
    zeros = x == 0
    nz = zeros.sum(axis=-1, keepdims=True)
    if np.any(nz * delta >= 1):
        raise CompositionError(f"detection limit {delta} too large")
    return np.where(zeros, delta, x * (1.0 - nz * delta))


def perturb(x, y) -> np.ndarray:
    """Aitchison sum: closure of the part-wise product."""
    x, y = _as_parts(x), _as_parts(y)
    _check_same_p(x, y)
    return closure(x * y)


def perturb_inv(x, y) -> np.ndarray:
    """Aitchison difference ``x (-) y``."""
    x, y = _as_parts(x), _as_parts(y)
    _check_same_p(x, y)
    return closure(x / y)


def power(alpha, x) -> np.ndarray:
    """Aitchison scalar multiple: closure of part-wise powers."""
    x = _as_parts(x)
    _check_positive(x)
    alpha = np.asarray(alpha, dtype=float)
    return clr_inv(alpha[..., None] * np.log(x))


def clr(x) -> np.ndarray:
    x = _as_parts(x)
    _check_positive(x)
    lx = np.log(x)
    return lx - lx.mean(axis=-1, keepdims=True)


def clr_inv(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return closure(np.exp(z - z.max(axis=-1, keepdims=True)))


def inner(x, y) -> np.ndarray:
    """Aitchison inner product.

    Evaluated through centred log-ratios, which equals the double sum of
    log-ratio products divided by ``2p``.
    """
    x, y = _as_parts(x), _as_parts(y)
    _check_same_p(x, y)
    return np.sum(clr(x) * clr(y), axis=-1)


def norm(x) -> np.ndarray:
    return np.sqrt(inner(x, x))


def dist(x, y) -> np.ndarray:
    x, y = _as_parts(x), _as_parts(y)
    _check_same_p(x, y)
    return np.linalg.norm(clr(x) - clr(y), axis=-1)


def boxdot(A, x) -> np.ndarray:
    """Matrix-by-composition product.

    Returns ``C[prod_j x_j ** A[0, j], ..., prod_j x_j ** A[p-1, j]]`` where
    ``x`` is taken in its unit-geometric-mean representative. For matrices
    with equal row sums (which includes every lift of an ILR-space matrix)
    this is identical to using the unit-sum representative; for other
    matrices the choice keeps the product linear in Aitchison geometry.

    ``A`` may be a stack of shape ``(..., p, p)`` broadcasting against ``x``.
    """
    A = np.asarray(A, dtype=float)
    x = _as_parts(x)
    p = x.shape[-1]
    if A.shape[-2:] != (p, p):
        raise CompositionError(f"matrix of shape {A.shape} cannot act on {p} parts")
    return clr_inv(np.einsum("...ij,...j->...i", A, clr(x)))


def center(xs) -> np.ndarray:
    """Closed part-wise geometric mean of a set of compositions."""
    xs = _as_parts(xs)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise CompositionError("center needs a non-empty (n, p) array")
    _check_positive(xs)
    return closure(np.exp(np.log(xs).mean(axis=0)))


# -- orthonormal bases ------------------------------------------------------


@dataclass(frozen=True)
class SimplexBasis:
    """Orthonormal basis of the simplex as a log-contrast matrix.

    ``contrast`` has shape ``(p - 1, p)``; its rows are the clr images of the
    basis compositions, so ``ilr(x) = contrast @ log(x)``.
    """

    contrast: np.ndarray
    part_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        V = np.asarray(self.contrast, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1] - 1:
            raise CompositionError(f"contrast matrix must be (p-1, p), got {V.shape}")
        V.setflags(write=False)
        object.__setattr__(self, "contrast", V)
        names = tuple(self.part_names) or tuple(f"part{i + 1}" for i in range(V.shape[1]))
        if len(names) != V.shape[1]:
            raise CompositionError("part_names length does not match contrast matrix")
        object.__setattr__(self, "part_names", names)

    @property
    def p(self) -> int:
        return self.contrast.shape[1]

    @property
    def vectors(self) -> np.ndarray:
        """Basis compositions, one per row."""
        return clr_inv(self.contrast)

    def ilr(self, x) -> np.ndarray:
        return ilr(x, self)

    def ilr_inv(self, y) -> np.ndarray:
        return ilr_inv(y, self)

    def lift(self, M) -> np.ndarray:
        """p x p matrix acting on compositions like ``M`` acts on coordinates."""
        V = self.contrast
        return V.T @ np.asarray(M, dtype=float) @ V

    def coordinate_matrix(self, A) -> np.ndarray:
        """Matrix of ``x -> A (.) x`` in ILR coordinates.

        Column ``i`` holds ``ilr(A (.) psi_i)``, i.e. entry ``(j, i)`` is
        ``<A (.) psi_i, psi_j>_a``.
        """
        psi = self.vectors
        return np.stack([self.ilr(boxdot(A, psi[i])) for i in range(self.p - 1)], axis=1)


def _sign_rows_from_tree(tree, leaves_out: list) -> list[dict]:
    """Post-order list of splits for a nested-tuple binary tree."""
    if isinstance(tree, (int, np.integer)):
        leaves_out.append(int(tree))
        return []
    if len(tree) != 2:
        raise CompositionError(f"partition node must have exactly 2 children: {tree!r}")
    left_leaves: list = []
    right_leaves: list = []
    rows = _sign_rows_from_tree(tree[0], left_leaves)
    rows += _sign_rows_from_tree(tree[1], right_leaves)
    rows.append({"plus": left_leaves, "minus": right_leaves})
    leaves_out.extend(left_leaves + right_leaves)
    return rows


def _signs_from_partition(partition) -> np.ndarray:
    arr = None
    try:
        arr = np.asarray(partition, dtype=float)
    except (ValueError, TypeError):
        pass
    if arr is not None and arr.ndim == 2 and arr.shape[0] == arr.shape[1] - 1:
        return np.sign(arr)
    leaves: list = []
    rows = _sign_rows_from_tree(partition, leaves)
    p = len(leaves)
    if sorted(leaves) != list(range(p)):
        raise CompositionError(f"partition leaves must be 0..{p - 1} exactly once")
    S = np.zeros((p - 1, p))
    for r, split in enumerate(rows):
        S[r, split["plus"]] = 1
        S[r, split["minus"]] = -1
    return S


def _validate_sbp(S: np.ndarray) -> None:
    p = S.shape[1]
    full = frozenset(range(p))
    supports = [frozenset(np.flatnonzero(row)) for row in S]
    if supports.count(full) != 1:
        raise CompositionError("exactly one split must involve every part")
    for row in S:
        for side in (frozenset(np.flatnonzero(row > 0)), frozenset(np.flatnonzero(row < 0))):
            if not side:
                raise CompositionError("each split needs parts on both sides")
            n_children = supports.count(side)
            if len(side) > 1 and n_children != 1:
                raise CompositionError(f"group {sorted(side)} must be split exactly once")
            if len(side) == 1 and n_children:
                raise CompositionError("a single part cannot be split")


def build_sbp_basis(partition, part_names: Sequence[str] = ()) -> SimplexBasis:
    """Orthonormal basis from a sequential binary partition.

    ``partition`` is either a ``(p-1, p)`` sign matrix (``+1``/``-1``/``0``,
    one row per split, rows kept in the given order) or a nested pair tree
    of part indices such as ``((0, 1), 2)``, whose splits are emitted
    children-first.

    For ``((0, 1), 2)`` the coordinates are ``ln(z1/z2)/sqrt(2)`` and
    ``sqrt(2/3) ln(sqrt(z1 z2)/z3)``.
    """
    S = _signs_from_partition(partition)
    _validate_sbp(S)
    V = np.zeros_like(S)
    for i, row in enumerate(S):
        r = np.count_nonzero(row > 0)
        s = np.count_nonzero(row < 0)
        V[i, row > 0] = np.sqrt(s / (r * (r + s)))
        V[i, row < 0] = -np.sqrt(r / (s * (r + s)))
    return SimplexBasis(V, tuple(part_names))


def default_partition(p: int):
    """Left-nested tree ``(((0, 1), 2), ...)``."""
    if p < 2:
        raise CompositionError("p must be at least 2")
    tree = 0
    for i in range(1, p):
        tree = (tree, i)
    return tree


def default_basis(p: int = 3, part_names: Sequence[str] = ()) -> SimplexBasis:
    return build_sbp_basis(default_partition(p), part_names)


def ilr(x, basis: SimplexBasis) -> np.ndarray:
    x = _as_parts(x)
    if x.shape[-1] != basis.p:
        raise CompositionError(f"basis has {basis.p} parts, data has {x.shape[-1]}")
    _check_positive(x)
    return np.log(x) @ basis.contrast.T


def ilr_inv(y, basis: SimplexBasis) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != basis.p - 1:
        raise CompositionError(f"basis needs {basis.p - 1} coordinates, got {y.shape[-1]}")
    return clr_inv(y @ basis.contrast)
