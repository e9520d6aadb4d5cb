"""Isometric tensor-ring decomposition of a three-axis tensor.

The decomposition factors ``b`` with axes ``(left, up, right)`` into three
tensors ``q``, ``u``, ``v`` contracted in a ring:

* ``q`` with axes ``(left, a, c)`` — isometric: contracting over ``left``
  gives the identity on the product of the two new bonds,
* ``u`` with axes ``(a, up, k)`` — carries the weight (non-isometric),
* ``v`` with axes ``(k, c, right)`` — isometric over ``(c, right)``,

where bond ``a`` is capped by ``eta``, bond ``c`` by ``chi`` and the bond
``k`` between ``u`` and ``v`` by ``eta``.  The method is greedy: one SVD to
split ``left`` from the rest, a reshape of the new bond into the ``(a, c)``
pair, an optional unitary disentangler on that pair, and a second truncated
SVD.  An optional trailing block axis on ``b`` rides with the ``up`` group
and ends on ``u``.

The disentangler minimizes the Renyi-1/2 entropy across the second SVD's
cut by Riemannian conjugate gradient on the unitary group; lowering that
entropy concentrates the Schmidt spectrum and thereby lowers the truncation
error of the second SVD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import TensorError, TruncationSpec, astensor, contract, frob, \
    truncation_rank


@dataclass(frozen=True)
class RingFactors:
    """Factors of one ring decomposition and its realized relative error."""

    q: np.ndarray
    u: np.ndarray
    v: np.ndarray
    err: float


@dataclass(frozen=True)
class Disentangler:
    """A unitary acting on the product of the two split bond axes."""

    d_matrix: np.ndarray

    def __post_init__(self):
        m = self.d_matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise TensorError("disentangler must be a square matrix")
        dev = np.linalg.norm(m.conj().T @ m - np.eye(m.shape[0]))
        if dev > 1e-10:
            raise TensorError("disentangler is not unitary")


def renyi_half_entropy(s) -> float:
    """Renyi-1/2 entropy ``2 ln(sum of normalized Schmidt coefficients)``."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or np.any(s < 0):
        raise TensorError("singular values must be nonnegative and nonempty")
    total = float(np.linalg.norm(s))
    if total == 0.0:
        raise TensorError("all-zero singular values have no entropy")
    return float(2.0 * np.log(np.sum(s / total)))


def _split_axes(v_tilde):
    """Cut of the second SVD for a reshaped first-SVD factor.

    Rank 3 ``(a, c, rest)`` cuts ``(a) | (c, rest)``; rank 4
    ``(a, c, up, right)`` cuts ``(a, up) | (c, right)``.
    """
    if v_tilde.ndim == 3:
        return (0,), (1, 2)
    if v_tilde.ndim == 4:
        return (0, 2), (1, 3)
    raise TensorError("expected a rank-3 or rank-4 tensor")


def _cut_matrix(t, left_axes, right_axes):
    perm = tuple(left_axes) + tuple(right_axes)
    nl = int(np.prod([t.shape[ax] for ax in left_axes]))
    return np.transpose(t, perm).reshape(nl, -1)


def _apply_pair_unitary(d, t):
    """Apply a unitary on the product of axes 0 and 1 of ``t``."""
    a, c = t.shape[0], t.shape[1]
    dt = d.reshape(a, c, a, c)
    out = np.tensordot(dt, t, axes=([2, 3], [0, 1]))
    return out


def _nuclear_gradient(d, t, left_axes, right_axes):
    """Nuclear norm across the cut and its Euclidean gradient w.r.t. ``d``.

    First-order perturbation of singular values gives
    ``d(sum sigma) = Re tr(U^H dM V)``; chaining through the linear map
    ``D -> matrix(D t)`` yields the gradient below.
    """
    t2 = _apply_pair_unitary(d, t)
    m = _cut_matrix(t2, left_axes, right_axes)
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    z = u @ vh  # dM-direction of steepest nuclear-norm increase
    zt = z.reshape([t2.shape[ax] for ax in left_axes]
                   + [t2.shape[ax] for ax in right_axes])
    inv = np.argsort(tuple(left_axes) + tuple(right_axes))
    zt = np.transpose(zt, tuple(inv))  # back to t2's axis order
    rest = tuple(range(2, t.ndim))
    grad = np.tensordot(zt, np.conj(t), axes=(rest, rest))
    a, c = t.shape[0], t.shape[1]
    return float(np.sum(s)), s, grad.reshape(a * c, a * c) / 2.0


def optimize_disentangler(v_tilde, max_iters: int = 30):
    """Minimize the Renyi-1/2 entropy across the second-SVD cut.

    Riemannian conjugate gradient on the unitary group with QR retraction
    and a backtracking line search; uphill steps are rejected, so the
    returned entropy trace is non-increasing.  Stops early when the relative
    entropy change drops below 1e-8.

    Returns ``(Disentangler, transformed tensor, entropy trace)``.
    """
    t = astensor(v_tilde)
    left_axes, right_axes = _split_axes(t)
    n = t.shape[0] * t.shape[1]
    d = np.eye(n, dtype=np.complex128)
    nrm = frob(t)
    if nrm == 0.0:
        return Disentangler(d), t.copy(), [0.0]
    nuc, s, grad = _nuclear_gradient(d, t, left_axes, right_axes)
    trace = [renyi_half_entropy(s)]
    direction = None
    prev_skew = None
    step = 1.0
    for _ in range(max_iters):
        skew = d.conj().T @ grad
        skew = (skew - skew.conj().T) / 2.0
        gnorm2 = float(np.real(np.vdot(skew, skew)))
        if gnorm2 < 1e-30:
            break
        if direction is None:
            direction = -skew
        else:
            beta = max(0.0, float(np.real(np.vdot(skew, skew - prev_skew)))
                       / float(np.real(np.vdot(prev_skew, prev_skew))))
            direction = -skew + beta * direction
            if float(np.real(np.vdot(direction, -skew))) <= 0:
                direction = -skew  # restart on a non-descent direction
        prev_skew = skew
        accepted = False
        for _ in range(25):
            cand, _ = np.linalg.qr(d + step * (d @ direction))
            nuc_c, s_c, grad_c = _nuclear_gradient(cand, t, left_axes,
                                                   right_axes)
            if nuc_c < nuc:
                d, nuc, s, grad = cand, nuc_c, s_c, grad_c
                accepted = True
                step = min(step * 2.0, 1e6)
                break
            step /= 2.0
        if not accepted:
            break
        trace.append(renyi_half_entropy(s))
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) \
                <= 1e-8 * max(abs(trace[-2]), 1e-30):
            break
    return Disentangler(d), _apply_pair_unitary(d, t), trace


def _svd_tail(vt4, eta: int) -> float:
    """Discarded weight of the second SVD at rank cap ``eta``."""
    m = vt4.transpose(0, 2, 1, 3).reshape(vt4.shape[0] * vt4.shape[2], -1)
    s = np.linalg.svd(m, compute_uv=False)
    return float(np.sqrt(np.sum(s[eta:] ** 2)))


def _choose_bond_split(rank, eta, chi, n1):
    """Sizes ``(a, c)`` of the reshaped first-SVD bond.

    Maximizes the representable rank ``min(a * c, rank)`` subject to
    ``a <= eta``, ``c <= chi`` and ``a * c <= n1`` (so the padded ``q``
    can stay exactly isometric); among maximizers prefers the smallest
    product (least padding), then the smallest ``a``.
    """
    best = None
    for a in range(1, eta + 1):
        for c in range(1, chi + 1):
            if a * c > n1:
                continue
            key = (min(a * c, rank), -(a * c), -a)
            if best is None or key > best[0]:
                best = (key, a, c)
    if best is None:
        raise TensorError("no feasible bond split: left axis too small")
    return best[1], best[2]


def decompose_ring(b, eta: int, chi: int,
                   with_disentangler: bool = True) -> RingFactors:
    """Greedy isometric tensor-ring decomposition of ``b``.

    ``b`` has axes ``(left, up, right)`` or ``(left, up, right, block)``;
    the block axis travels with the ``up`` group and ends trailing on ``u``.
    The reported ``err`` is exact: the two truncations are orthogonal, so
    ``err**2`` is the sum of their squared relative discarded weights
    (the second weighted by the mass surviving the first).
    """
    if eta < 1 or chi < 1:
        raise TensorError("eta and chi must be at least 1")
    b = astensor(b)
    if b.ndim not in (3, 4):
        raise TensorError("expected axes (left, up, right[, block])")
    has_block = b.ndim == 4
    n1, n2, n3 = b.shape[0], b.shape[1], b.shape[2]
    pb = b.shape[3] if has_block else 1
    nrm = frob(b)

    m = b.reshape(n1, -1)  # left | (up, right[, block])
    um, s, vh = np.linalg.svd(m, full_matrices=False)
    tol = len(s) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    rank = max(int(np.sum(s > tol)), 1)
    a, c = _choose_bond_split(rank, eta, chi, n1)
    k1 = min(a * c, rank)
    disc1 = float(np.sqrt(np.sum(s[k1:] ** 2)) / nrm) if nrm > 0 else 0.0

    if a * c > um.shape[1]:  # padding needs orthonormal complement columns
        um_full = np.linalg.svd(m, full_matrices=True)[0]
        cols = um_full[:, :a * c]
    else:
        cols = um[:, :a * c]
    q = cols.reshape(n1, a, c)
    vt = np.zeros((a * c, n2, n3, pb), dtype=np.complex128)
    vt[:k1] = (s[:k1, None] * vh[:k1]).reshape(k1, n2, n3, pb)
    vt = vt.reshape(a, c, n2, n3, pb)

    # fold block into the up group for the generic rank-4 disentangler path
    vt4 = vt.transpose(0, 1, 2, 4, 3).reshape(a, c, n2 * pb, n3)
    kmax = min(a * n2 * pb, c * n3)
    if with_disentangler and kmax > eta:
        dis, vt4_d, _ = optimize_disentangler(vt4)
        # the entropy objective is a proxy; keep D only if the realized
        # truncation tail actually shrinks
        if _svd_tail(vt4_d, eta) <= _svd_tail(vt4, eta):
            vt4 = vt4_d
            dm = dis.d_matrix.reshape(a, c, a, c)
            # q absorbs D^H so the ring contraction is unchanged
            q = np.tensordot(q, np.conj(dm), axes=([1, 2], [2, 3]))

    m2 = vt4.transpose(0, 2, 1, 3).reshape(a * n2 * pb, c * n3)
    u2, s2, vh2 = np.linalg.svd(m2, full_matrices=False)
    k2 = truncation_rank(s2, TruncationSpec(max_rank=eta))
    tot2 = float(np.linalg.norm(s2))
    disc2_local = float(np.sqrt(np.sum(s2[k2:] ** 2)) / tot2) \
        if tot2 > 0 else 0.0
    u = (u2[:, :k2] * s2[:k2]).reshape(a, n2, pb, k2)
    u = np.transpose(u, (0, 1, 3, 2))  # (a, up, k, block)
    if not has_block:
        u = u[..., 0]
    v = vh2[:k2].reshape(k2, c, n3)

    surv2 = 1.0 - disc1 ** 2
    err = float(np.sqrt(disc1 ** 2 + surv2 * disc2_local ** 2))
    return RingFactors(q=q, u=u, v=v, err=err)


def contract_ring(f: RingFactors) -> np.ndarray:
    """Reassemble ``(left, up, right[, block])`` from ring factors."""
    qu = contract(f.q, f.u, [(1, 0)])  # (left, c, up, k[, block])
    out = contract(qu, f.v, [(1, 1), (3, 0)])
    # out: (left, up[, block], right) -> put block last
    if out.ndim == 4:
        out = np.transpose(out, (0, 1, 3, 2))
    return out
