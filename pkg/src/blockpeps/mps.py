"""Matrix product states with a block axis: canonical forms, center/block
shifts, and the zip-up operator-times-state product.

A chain of ``L`` cores represents ``p`` states at once.  Core ``i`` has axes
``(left bond, physical, right bond)``; the orthogonality-center core carries
one extra trailing block axis of size ``p`` (kept even for ``p = 1`` so the
code has a single path).  Boundary bonds have length 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (TensorError, TruncationReport, TruncationSpec, UNBOUNDED,
                     astensor, contract, lq_split, qr_split, svd_split)


@dataclass(frozen=True)
class BlockMps:
    """A block MPS; ``cores[center]`` is rank 4 with a trailing block axis."""

    cores: tuple
    center: int
    p: int

    def __post_init__(self):
        L = len(self.cores)
        if L == 0:
            raise TensorError("a BlockMps needs at least one core")
        if not 0 <= self.center < L:
            raise TensorError("center index outside the chain")
        for i, c in enumerate(self.cores):
            want = 4 if i == self.center else 3
            if c.ndim != want:
                raise TensorError(
                    f"core {i} has rank {c.ndim}, expected {want}")
            if i > 0 and self.cores[i - 1].shape[2] != c.shape[0]:
                raise TensorError(f"bond mismatch between cores {i - 1}, {i}")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise TensorError("boundary bonds must have length 1")
        if self.cores[self.center].shape[3] != self.p:
            raise TensorError("block axis size differs from p")

    @property
    def length(self) -> int:
        return len(self.cores)


def random_block_mps(dims, bond, p, seed) -> BlockMps:
    """A random (generally non-canonical) block MPS with center at core 0."""
    rng = np.random.default_rng(seed)
    L = len(dims)
    bonds = [1] + [bond] * (L - 1) + [1]
    # keep every bond attainable so canonical forms stay full-rank
    for i in range(1, L):
        bonds[i] = min(bonds[i], int(np.prod(dims[:i])),
                       int(np.prod(dims[i:])))
    cores = []
    for i, d in enumerate(dims):
        shape = (bonds[i], d, bonds[i + 1])
        if i == 0:
            shape = shape + (p,)
        cores.append(astensor(rng.standard_normal(shape)
                              + 1j * rng.standard_normal(shape)))
    return BlockMps(cores=tuple(cores), center=0, p=p)


def canonicalize(m: BlockMps, j: int) -> BlockMps:
    """Gauge the chain so core ``j`` is the orthogonality center.

    Cores left of ``j`` become left-isometries and cores right of ``j``
    right-isometries via exact QR/LQ sweeps; the block axis rides with the
    non-isometric factor, so it ends on core ``j``.  The represented states
    are unchanged.
    """
    if not 0 <= j < m.length:
        raise TensorError("target center outside the chain")
    cores = list(m.cores)
    # left-to-right sweep up to j
    for i in range(j):
        c = cores[i]
        q, r = qr_split(c, (0, 1))  # r: (k, right[, p])
        cores[i] = q
        nxt = contract(r, cores[i + 1], [(1, 0)])
        if r.ndim == 3:  # block axis was here; push it to the back
            nxt = np.transpose(nxt, (0, 2, 3, 1))
        cores[i + 1] = nxt
    # right-to-left sweep down to j
    for i in range(m.length - 1, j, -1):
        c = cores[i]
        left_axes = (0, 3) if c.ndim == 4 else (0,)
        l, q = lq_split(c, left_axes)  # l: (left[, p], k), q: (k, d, right)
        cores[i] = q
        prv = contract(cores[i - 1], l, [(2, 0)])
        if prv.ndim == 4:  # (prev-left, d, p, k) -> (prev-left, d, k, p)
            prv = np.transpose(prv, (0, 1, 3, 2))
        cores[i - 1] = prv
    if cores[j].ndim == 3:
        raise TensorError("block axis did not arrive at the target center")
    return BlockMps(cores=tuple(cores), center=j, p=m.p)


def shift_block_center(m: BlockMps, direction: str) -> BlockMps:
    """Move the center (and block axis) one core left or right, losslessly."""
    if direction not in ("left", "right"):
        raise TensorError("direction must be 'left' or 'right'")
    j = m.center
    if direction == "right":
        if j == m.length - 1:
            raise TensorError("cannot shift right past the chain end")
        return canonicalize(m, j + 1)
    if j == 0:
        raise TensorError("cannot shift left past the chain start")
    return canonicalize(m, j - 1)


def _orthogonalize_operator(ops):
    """Gauge an operator column so its weight sits on core 0.

    Sweeps from the last core toward the first with exact LQ factorizations;
    a trailing block axis on any core is routed with the L factor so it also
    lands on core 0.  Returns the new list of cores and the index carrying
    the block axis (or None).
    """
    ops = [astensor(o) for o in ops]
    for i in range(len(ops) - 1, 0, -1):
        o = ops[i]
        left_axes = (0, 4) if o.ndim == 5 else (0,)
        l, q = lq_split(o, left_axes)  # l: (wl[, p], k), q: (k, po, pi, wr)
        ops[i] = q
        prv = contract(ops[i - 1], l, [(3, 0)])
        if prv.ndim == 5:  # (wl, po, pi, p, k) -> (wl, po, pi, k, p)
            prv = np.transpose(prv, (0, 1, 2, 4, 3))
        ops[i - 1] = prv
    block_at = 0 if ops[0].ndim == 5 else None
    return ops, block_at


def zipup_apply(operator_column, state_column: BlockMps,
                spec: TruncationSpec = UNBOUNDED):
    """Contract an operator column into a block MPS with on-the-fly truncation.

    Operator cores have axes ``(bond, phys out, phys in, bond)`` plus an
    optional trailing block axis on one core; the state contributes its own
    block axis through its center core.  The operator is first orthogonalized
    so its weight sits on core 0, then a single sweep contracts core pairs and
    truncates each new bond by ``spec``.  The result's center (with the
    combined block axis) ends on the last core.

    Returns ``(BlockMps, TruncationReport)``; the report's discarded weight
    is the root-sum-square over all per-bond truncations.
    """
    L = state_column.length
    if len(operator_column) != L:
        raise TensorError("operator and state columns differ in length")
    for i, o in enumerate(operator_column):
        if o.ndim not in (4, 5):
            raise TensorError(f"operator core {i} must have rank 4 or 5")
        if o.shape[2] != state_column.cores[i].shape[1]:
            raise TensorError(f"physical dimension mismatch at core {i}")
        if i > 0 and operator_column[i - 1].shape[3] != o.shape[0]:
            raise TensorError(f"operator bond mismatch at core {i}")
    ops, _ = _orthogonalize_operator(operator_column)
    # gauge the state so every core past the zip frontier is an isometry
    # toward it; the truncated spectra are then true Schmidt spectra
    state_column = canonicalize(state_column, 0)

    # carried: (new bond, operator bond, state bond, spectator block)
    carried = np.ones((1, 1, 1, 1), dtype=np.complex128)
    cores = []
    discards = []
    max_rank = 1
    for i in range(L):
        o, s = ops[i], state_column.cores[i]
        t = contract(carried, o, [(1, 0)])
        # t: (m, sb, p, po, pi, wr[, p_op])
        if t.ndim == 7:  # merge an operator block axis into the spectator
            if t.shape[6] == 1:
                t = t[..., 0]
            elif t.shape[2] == 1:
                t = np.moveaxis(t[:, :, 0], 5, 2)
            else:
                raise TensorError("two nontrivial block axes met during zip-up")
        t = contract(t, s, [(1, 0), (4, 1)])
        # t: (m, p, po, wr, sr[, p_state])
        if t.ndim == 6:
            if t.shape[5] == 1:
                t = t[..., 0]
            elif t.shape[1] == 1:
                t = np.moveaxis(t[:, 0], 4, 1)
            else:
                raise TensorError("two nontrivial block axes met during zip-up")
        # t: (m, p, po, wr, sr)
        if i < L - 1:
            u, sv, v, rep = svd_split(t, (0, 2), spec)
            discards.append(rep.discarded_weight)
            max_rank = max(max_rank, rep.kept_rank)
            cores.append(u)  # (m, po, k)
            carried = np.transpose(sv[:, None, None, None] * v, (0, 2, 3, 1))
        else:
            if t.shape[3] != 1 or t.shape[4] != 1:
                raise TensorError("boundary bonds must close to length 1")
            cores.append(np.transpose(t[:, :, :, 0, 0], (0, 2, 1))[
                :, :, None, :])  # (m, po, 1, p)
    p = cores[-1].shape[3]
    out = BlockMps(cores=tuple(cores), center=L - 1, p=p)
    rss = float(np.sqrt(np.sum(np.asarray(discards) ** 2))) if discards else 0.0
    return out, TruncationReport(kept_rank=max_rank, discarded_weight=rss)
