"""Dense complex tensor core.

Tensors are plain ``numpy.ndarray`` values with ``complex128`` dtype and
row-major linearization over the declared axis order.  All factorizations
(SVD, QR, LQ) act on an arbitrary bipartition of the axes; the matricization
always follows the row-major convention so a reshape never silently
transposes data.

Every function here is pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class TensorError(ValueError):
    """Malformed tensor arguments (bad permutation, axis mismatch, NaN input)."""


def astensor(a) -> np.ndarray:
    """Coerce to a complex128 ndarray, rejecting NaN/Inf entries."""
    t = np.asarray(a, dtype=np.complex128)
    if not np.all(np.isfinite(t.real)) or not np.all(np.isfinite(t.imag)):
        raise TensorError("tensor contains NaN or Inf entries")
    return t


def frob(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.ravel(a)))


@dataclass(frozen=True)
class TruncationSpec:
    """Requested rank cap and relative discarded-weight tolerance.

    ``max_rank=None`` means unbounded.  ``rel_tol`` is compared against the
    relative Frobenius weight of the discarded singular-value tail.
    """

    max_rank: int | None = None
    rel_tol: float = 0.0

    def __post_init__(self):
        if self.max_rank is not None and self.max_rank < 1:
            raise TensorError("max_rank must be positive or None")
        if not 0.0 <= self.rel_tol < 1.0:
            raise TensorError("rel_tol must lie in [0, 1)")


UNBOUNDED = TruncationSpec()


@dataclass(frozen=True)
class TruncationReport:
    """Realized rank and relative discarded weight of one truncation."""

    kept_rank: int
    discarded_weight: float


def permute(a: np.ndarray, order) -> np.ndarray:
    """Reorder the axes of ``a`` by the permutation ``order``."""
    order = tuple(order)
    if sorted(order) != list(range(a.ndim)):
        raise TensorError(f"{order} is not a permutation of 0..{a.ndim - 1}")
    return np.transpose(a, order)


def contract(a: np.ndarray, b: np.ndarray, pairs) -> np.ndarray:
    """Contract ``a`` and ``b`` over the given ``(axis_of_a, axis_of_b)`` pairs.

    The result carries a's unpaired axes (in order) followed by b's.
    """
    pairs = list(pairs)
    ax_a = [p[0] for p in pairs]
    ax_b = [p[1] for p in pairs]
    if len(set(ax_a)) != len(ax_a) or len(set(ax_b)) != len(ax_b):
        raise TensorError("an axis may be paired at most once")
    for i, j in pairs:
        if a.shape[i] != b.shape[j]:
            raise TensorError(
                f"contracted axes disagree: a.shape[{i}]={a.shape[i]} vs "
                f"b.shape[{j}]={b.shape[j]}"
            )
    return np.tensordot(a, b, axes=(ax_a, ax_b))


def _matricize(a: np.ndarray, left_axes):
    """Bring ``left_axes`` to the front and flatten into a matrix."""
    left_axes = tuple(left_axes)
    if len(set(left_axes)) != len(left_axes) or not left_axes:
        raise TensorError("left_axes must be a nonempty set of distinct axes")
    if any(ax < 0 or ax >= a.ndim for ax in left_axes):
        raise TensorError("left_axes out of range")
    right_axes = tuple(ax for ax in range(a.ndim) if ax not in left_axes)
    if not right_axes:
        raise TensorError("left_axes must be a proper subset of the axes")
    perm = left_axes + right_axes
    at = np.transpose(a, perm)
    lshape = at.shape[: len(left_axes)]
    rshape = at.shape[len(left_axes):]
    return at.reshape(int(np.prod(lshape)), int(np.prod(rshape))), lshape, rshape


def _svd(m: np.ndarray):
    """SVD with a divide-and-conquer -> general-rectangular fallback."""
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")


def truncation_rank(s: np.ndarray, spec: TruncationSpec) -> int:
    """Rank kept by ``spec``: the rank cap composed with the tail tolerance.

    Keeps ``k = min(max_rank, smallest k whose discarded tail weight is
    within rel_tol)`` and always at least 1.
    """
    total = float(np.sum(s**2))
    if total == 0.0:
        return 1
    # tail[k] = relative weight discarded when keeping k values
    tail = np.sqrt(np.maximum(np.cumsum((s**2)[::-1])[::-1], 0.0) / total)
    k = len(s)
    for i in range(len(s)):
        if (tail[i + 1] if i + 1 < len(s) else 0.0) <= spec.rel_tol:
            k = i + 1
            break
    if spec.max_rank is not None:
        k = min(k, spec.max_rank)
    return max(k, 1)


def svd_split(a: np.ndarray, left_axes, spec: TruncationSpec = UNBOUNDED):
    """Truncated SVD of ``a`` across the ``left_axes`` | rest bipartition.

    Returns ``(u, s, v, report)`` where ``u`` carries the left axes plus a
    new trailing bond axis, ``v`` carries the bond axis first, and
    ``a ~= u @ diag(s) @ v`` with relative Frobenius error equal to
    ``report.discarded_weight``.
    """
    a = astensor(a)
    m, lshape, rshape = _matricize(a, left_axes)
    u, s, vh = _svd(m)
    k = truncation_rank(s, spec)
    total = float(np.sum(s**2))
    discarded = float(np.sqrt(np.sum(s[k:] ** 2) / total)) if total > 0 else 0.0
    report = TruncationReport(kept_rank=k, discarded_weight=discarded)
    ut = u[:, :k].reshape(lshape + (k,))
    vt = vh[:k].reshape((k,) + rshape)
    return ut, s[:k].copy(), vt, report


def qr_split(a: np.ndarray, left_axes):
    """Exact QR factorization across the bipartition; Q isometric over the bond.

    Phases are fixed so the R diagonal is real and nonnegative.
    """
    a = astensor(a)
    m, lshape, rshape = _matricize(a, left_axes)
    q, r = np.linalg.qr(m)
    d = np.diagonal(r).copy()
    phase = np.where(np.abs(d) > 0, d / np.abs(np.where(np.abs(d) > 0, d, 1)), 1.0)
    q = q * phase[np.newaxis, :]
    r = r * np.conj(phase)[:, np.newaxis]
    k = q.shape[1]
    return q.reshape(lshape + (k,)), r.reshape((k,) + rshape)


def lq_split(a: np.ndarray, left_axes):
    """Exact LQ factorization; Q isometric over the bond from the right axes."""
    a = astensor(a)
    m, lshape, rshape = _matricize(a, left_axes)
    q, r = np.linalg.qr(m.T)
    d = np.diagonal(r).copy()
    phase = np.where(np.abs(d) > 0, d / np.abs(np.where(np.abs(d) > 0, d, 1)), 1.0)
    q = q * phase[np.newaxis, :]
    r = r * np.conj(phase)[:, np.newaxis]
    k = q.shape[1]
    l = r.T.reshape(lshape + (k,))
    qt = q.T.reshape((k,) + rshape)
    return l, qt


def isometry_defect(a: np.ndarray, out_axes) -> float:
    """Frobenius deviation of ``a`` from an isometry into ``out_axes``.

    Contracts ``a`` with its conjugate over all axes not in ``out_axes`` and
    compares against the identity on the outgoing product space.
    """
    out_axes = tuple(out_axes)
    in_axes = tuple(ax for ax in range(a.ndim) if ax not in out_axes)
    g = np.tensordot(np.conj(a), a, axes=(in_axes, in_axes))
    n = int(np.prod([a.shape[ax] for ax in out_axes])) if out_axes else 1
    g = g.reshape(n, n)
    return float(np.linalg.norm(g - np.eye(n)))
