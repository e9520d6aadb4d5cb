"""Block isometric PEPS: the 2D tensor grid, its orthogonality center and
block axis, and the column splitting that relocates them.

Grid conventions
----------------
``grid[i][j]`` holds the tensor of lattice site row ``i`` (counted from the
top), column ``j`` (from the left), with axes ``(up, left, down, right,
physical)``; boundary bonds have length 1.  The orthogonality-center tensor
carries one extra trailing block axis of size ``p`` (kept even for
``p = 1``).  ``labels[i][j]`` records which original lattice site the grid
position currently represents, so rotations never lose the physical site
identity.

Every non-center tensor is an isometry: contracting it with its conjugate
over its incoming axes gives the identity on the product of its outgoing
axes.  The outgoing axes are stored per tensor (``out_axes``) because column
splits and rotations re-orient them.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tring
from .tensor import (TensorError, TruncationSpec, astensor, contract,
                     isometry_defect, lq_split, qr_split, svd_split)

_UP, _LEFT, _DOWN, _RIGHT, _PHYS = 0, 1, 2, 3, 4

_SNAPSHOT_MAGIC = b"BPSN"
_SNAPSHOT_VERSION = 1


class SnapshotError(ValueError):
    """Unreadable, corrupted, or version-incompatible snapshot data."""


@dataclass(frozen=True)
class BlockIsoPeps:
    """An Lx x Ly block isometric PEPS.

    ``cum_discard`` is the running root-sum-square of the relative discarded
    weights of every truncation since the state was created (or the counter
    reset); it is a diagnostic, not a rigorous error bound.
    """

    grid: tuple
    center: tuple
    p: int
    chi_max: int
    eta_max: int
    cum_discard: float
    labels: tuple
    out_axes: tuple

    @property
    def lx(self) -> int:
        return len(self.grid)

    @property
    def ly(self) -> int:
        return len(self.grid[0])

    @property
    def d(self) -> int:
        return self.grid[0][0].shape[_PHYS]

    def tensor(self, i, j) -> np.ndarray:
        return self.grid[i][j]

    def _with_grid(self, grid, **kw):
        return replace(self, grid=tuple(tuple(row) for row in grid), **kw)


def _default_out_axes(lx, ly, center):
    """Arrow pattern of a freshly built state with center at ``center``.

    Columns right of the center column point up and left; the center column
    points up toward the center (down above it); columns left of the center
    point up and right.
    """
    ci, cj = center
    out = [[None] * ly for _ in range(lx)]
    for i in range(lx):
        for j in range(ly):
            if j > cj:
                out[i][j] = (_UP, _LEFT)
            elif j < cj:
                out[i][j] = (_UP, _RIGHT)
            elif i > ci:
                out[i][j] = (_UP,)
            elif i < ci:
                out[i][j] = (_DOWN,)
            else:
                out[i][j] = ()
    return tuple(tuple(row) for row in out)


def _tensor_shape(i, j, lx, ly, d, vbond, hbond):
    up = vbond[i - 1][j] if i > 0 else 1
    down = vbond[i][j] if i < lx - 1 else 1
    left = hbond[i][j - 1] if j > 0 else 1
    right = hbond[i][j] if j < ly - 1 else 1
    return (up, left, down, right, d)


def random_state(lx, ly, d, p, chi, eta, seed) -> BlockIsoPeps:
    """A seeded random state in canonical form with center at the top left.

    Bond dimensions start at the caps (``eta`` vertical, ``chi``
    horizontal) and are shrunk until every tensor can be an exact isometry
    (outgoing dimension no larger than incoming); tensors are then QR
    factors of Gaussian draws and the center's ``p`` slices are
    orthonormalized.
    """
    if min(lx, ly, d, p, chi, eta) < 1:
        raise TensorError("all sizes must be at least 1")
    center = (0, 0)
    out = _default_out_axes(lx, ly, center)
    vbond = [[eta] * ly for _ in range(lx - 1)]
    hbond = [[chi] * (ly - 1) for _ in range(lx)]

    def bond_ref(i, j, ax):
        if ax == _UP:
            return vbond[i - 1], j
        if ax == _DOWN:
            return vbond[i], j
        if ax == _LEFT:
            return hbond[i], j - 1
        return hbond[i], j

    changed = True
    while changed:
        changed = False
        for i in range(lx):
            for j in range(ly):
                shape = _tensor_shape(i, j, lx, ly, d, vbond, hbond)
                oset = out[i][j]
                n_out = int(np.prod([shape[a] for a in oset])) if oset else 1
                n_in = int(np.prod([shape[a] for a in range(5)
                                    if a not in oset]))
                if n_out > n_in:
                    row, k = bond_ref(i, j, max(oset, key=lambda a: shape[a]))
                    if row[k] > 1:
                        row[k] -= 1
                        changed = True
    rng = np.random.default_rng(seed)
    grid = [[None] * ly for _ in range(lx)]
    for i in range(lx):
        for j in range(ly):
            shape = _tensor_shape(i, j, lx, ly, d, vbond, hbond)
            g = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            if (i, j) == center:
                n = int(np.prod(shape))
                block = rng.standard_normal((n, p)) \
                    + 1j * rng.standard_normal((n, p))
                q, _ = np.linalg.qr(block)
                grid[i][j] = astensor(q.reshape(shape + (p,)))
            else:
                oset = out[i][j]
                in_axes = tuple(a for a in range(5) if a not in oset)
                m = np.transpose(g, in_axes + oset)
                n_in = int(np.prod([shape[a] for a in in_axes]))
                q, _ = np.linalg.qr(m.reshape(n_in, -1))
                t = q.reshape([shape[a] for a in in_axes]
                              + [shape[a] for a in oset])
                t = np.transpose(t, np.argsort(in_axes + oset))
                grid[i][j] = astensor(t)
    labels = tuple(tuple(i * ly + j for j in range(ly)) for i in range(lx))
    return BlockIsoPeps(grid=tuple(tuple(r) for r in grid), center=center,
                        p=p, chi_max=chi, eta_max=eta, cum_discard=0.0,
                        labels=labels, out_axes=out)


def isometry_audit(state: BlockIsoPeps) -> float:
    """Largest isometry deviation over all non-center tensors."""
    worst = 0.0
    for i in range(state.lx):
        for j in range(state.ly):
            if (i, j) == state.center:
                continue
            worst = max(worst, isometry_defect(state.grid[i][j],
                                               state.out_axes[i][j]))
    return worst


def block_overlap(state: BlockIsoPeps) -> np.ndarray:
    """The p x p Gram matrix of the block members.

    In canonical form the global inner products collapse onto the center
    tensor, so entry ``(a, b)`` is the inner product of center slices ``a``
    and ``b``.
    """
    c = state.grid[state.center[0]][state.center[1]]
    axes = tuple(range(c.ndim - 1))
    return np.tensordot(np.conj(c), c, axes=(axes, axes))


def norms(state: BlockIsoPeps) -> np.ndarray:
    return np.sqrt(np.real(np.diag(block_overlap(state))))


def orthonormalize_block(state: BlockIsoPeps, replace_seed: int = 0):
    """Gram-Schmidt orthonormalize the center slices (span preserved).

    Modified Gram-Schmidt with one reorthogonalization pass.  A slice whose
    post-projection norm falls below 1e-10 is replaced by a seeded random
    vector orthonormalized against the previous slices.

    Returns ``(state, replaced)`` where ``replaced`` is the tuple of slice
    indices that had to be regenerated.
    """
    ci, cj = state.center
    c = state.grid[ci][cj]
    shape = c.shape[:-1]
    n = int(np.prod(shape))
    m = c.reshape(n, state.p).copy()
    rng = np.random.default_rng(replace_seed)
    replaced = []
    for k in range(state.p):
        for _ in range(2):  # MGS plus one reorthogonalization pass
            for prev in range(k):
                m[:, k] -= m[:, prev] * (np.conj(m[:, prev]) @ m[:, k])
        nk = np.linalg.norm(m[:, k])
        if nk < 1e-10:
            replaced.append(k)
            v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            for _ in range(2):
                for prev in range(k):
                    v -= m[:, prev] * (np.conj(m[:, prev]) @ v)
            m[:, k] = v / np.linalg.norm(v)
        else:
            m[:, k] /= nk
    grid = [list(r) for r in state.grid]
    grid[ci][cj] = m.reshape(shape + (state.p,))
    return state._with_grid(grid), tuple(replaced)


def move_center_within_column(state: BlockIsoPeps,
                              target_row: int) -> BlockIsoPeps:
    """Move the center (and block axis) to ``target_row`` by exact QR steps."""
    ci, cj = state.center
    if not 0 <= target_row < state.lx:
        raise TensorError("target row outside the lattice")
    s = state
    while s.center[0] < target_row:
        s = _center_step(s, down=True)
    while s.center[0] > target_row:
        s = _center_step(s, down=False)
    return s


def move_center_to_top(state: BlockIsoPeps) -> BlockIsoPeps:
    return move_center_within_column(state, 0)


def move_center_to_bottom(state: BlockIsoPeps) -> BlockIsoPeps:
    return move_center_within_column(state, state.lx - 1)


def _center_step(state: BlockIsoPeps, down: bool) -> BlockIsoPeps:
    ci, cj = state.center
    ni = ci + 1 if down else ci - 1
    c = state.grid[ci][cj]  # (up, left, down, right, phys, p)
    grid = [list(r) for r in state.grid]
    out = [list(r) for r in state.out_axes]
    if down:
        q, r = qr_split(c, (_UP, _LEFT, _RIGHT, _PHYS))
        # q: (up, left, right, phys, k); r: (k, down, p)
        grid[ci][cj] = np.transpose(q, (0, 1, 4, 2, 3))
        nxt = contract(r, grid[ni][cj], [(1, _UP)])
        # (k, p, left, down, right, phys) -> (k, left, down, right, phys, p)
        grid[ni][cj] = np.transpose(nxt, (0, 2, 3, 4, 5, 1))
        out[ci][cj] = (_DOWN,)
    else:
        l, q = lq_split(c, (_UP, 5))
        # l: (up, p, k); q: (k, left, down, right, phys)
        grid[ci][cj] = q
        prv = contract(grid[ni][cj], l, [(_DOWN, 0)])
        # (up, left, right, phys, p, k) -> (up, left, k, right, phys, p)
        grid[ni][cj] = np.transpose(prv, (0, 1, 5, 2, 3, 4))
        out[ci][cj] = (_UP,)
    out[ni][cj] = ()
    return replace(state, grid=tuple(tuple(r) for r in grid),
                   out_axes=tuple(tuple(r) for r in out), center=(ni, cj))


def rotate_ccw(state: BlockIsoPeps) -> BlockIsoPeps:
    """Rotate the grid ninety degrees counter-clockwise.

    Site ``(i, j)`` moves to ``(ly - 1 - j, i)``; each tensor's lattice axes
    permute as new ``(up, left, down, right) = old (right, up, left, down)``;
    labels ride along so dense contractions are frame-independent.
    """
    lx, ly = state.lx, state.ly
    grid = [[None] * lx for _ in range(ly)]
    labels = [[None] * lx for _ in range(ly)]
    out = [[None] * lx for _ in range(ly)]
    for i in range(lx):
        for j in range(ly):
            t = state.grid[i][j]
            perm = (_RIGHT, _UP, _LEFT, _DOWN, _PHYS)
            if t.ndim == 6:
                perm = perm + (5,)
            ni, nj = ly - 1 - j, i
            grid[ni][nj] = np.transpose(t, perm)
            labels[ni][nj] = state.labels[i][j]
            out[ni][nj] = tuple(sorted((a + 1) % 4
                                       for a in state.out_axes[i][j]))
    ci, cj = state.center
    return BlockIsoPeps(grid=tuple(tuple(r) for r in grid),
                        center=(ly - 1 - cj, ci), p=state.p,
                        chi_max=state.chi_max, eta_max=state.eta_max,
                        cum_discard=state.cum_discard,
                        labels=tuple(tuple(r) for r in labels),
                        out_axes=tuple(tuple(r) for r in out))


def _accumulate(cum: float, inc: float) -> float:
    return float(np.sqrt(cum * cum + inc * inc))


def moses_move_column(state: BlockIsoPeps, with_disentangler: bool = True,
                      zip_tol: float = 1e-6) -> BlockIsoPeps:
    """Split the center column and absorb its non-isometric part rightward.

    Requires the center (with block axis) at the bottom of its column ``j``
    with ``j < ly - 1``.  The column is split bottom to top into an
    isometric column times a physical-index-free column via per-site
    isometric ring decompositions (final site: truncated SVD); the leftover
    column is orthogonalized top to bottom and then zipped into column
    ``j + 1`` bottom to top with per-bond truncation.  The center and block
    end at the top of column ``j + 1``; all truncations are added to
    ``cum_discard``.
    """
    lx, ly = state.lx, state.ly
    ci, cj = state.center
    if cj >= ly - 1:
        raise TensorError("no column to the right of the center")
    if ci != lx - 1:
        raise TensorError("center must sit at the bottom of its column")
    grid = [list(r) for r in state.grid]
    out = [list(r) for r in state.out_axes]
    discard = state.cum_discard

    # --- split column cj bottom to top -----------------------------------
    c = grid[lx - 1][cj]  # (up, left, 1, right, phys, p)
    # working tensor axes: (up, left, eta_prev, kappa_prev, right, phys, p);
    # eta_prev / kappa_prev are the bonds down to the already-split part
    work = np.expand_dims(c, 3)
    r_cores = [None] * lx  # (kappa_up, chi_left, kappa_down, right[, p])
    for i in range(lx - 1, 0, -1):
        u_dim, l_dim = work.shape[0], work.shape[1]
        ep, kp = work.shape[2], work.shape[3]
        r_dim, s_dim, p_dim = work.shape[4], work.shape[5], work.shape[6]
        b = np.transpose(work, (5, 1, 2, 0, 3, 4, 6))
        b = b.reshape(s_dim * l_dim * ep, u_dim, kp * r_dim, p_dim)
        f = tring.decompose_ring(b, eta=state.eta_max, chi=state.chi_max,
                                 with_disentangler=with_disentangler)
        discard = _accumulate(discard, f.err)
        a, cdim = f.q.shape[1], f.q.shape[2]
        q = f.q.reshape(s_dim, l_dim, ep, a, cdim)
        grid[i][cj] = np.transpose(q, (3, 1, 2, 4, 0))
        out[i][cj] = (_UP, _RIGHT)
        k = f.v.shape[0]
        r_cores[i] = f.v.reshape(k, cdim, kp, r_dim)
        above = grid[i - 1][cj]  # (up, left, down, right, phys)
        # f.u: (a, old up bond, k, p)
        nxt = contract(above, f.u, [(_DOWN, 1)])
        # (up, left, right, phys, a, k, p) ->
        # (up, left, a, k, right, phys, p)
        work = np.transpose(nxt, (0, 1, 4, 5, 2, 3, 6))
    # top site: plain truncated SVD, block to the non-isometric factor
    u_dim, l_dim = work.shape[0], work.shape[1]
    ep, kp = work.shape[2], work.shape[3]
    r_dim, s_dim, p_dim = work.shape[4], work.shape[5], work.shape[6]
    if u_dim != 1:
        raise TensorError("top boundary bond must have length 1")
    theta = np.transpose(work[0], (4, 0, 1, 2, 3, 5))
    # theta: (phys, left, eta_prev, kappa_prev, right, p)
    uq, sv, vh, rep = svd_split(theta, (0, 1, 2),
                                TruncationSpec(max_rank=state.chi_max))
    discard = _accumulate(discard, rep.discarded_weight)
    c0 = uq.shape[3]
    grid[0][cj] = np.transpose(uq[:, :, :, None, :], (3, 1, 2, 4, 0))
    out[0][cj] = (_UP, _RIGHT)
    r_cores[0] = (sv[:, None, None, None] * vh)[None]
    # r_cores[0]: (1, chi_left, kappa_down, right, p)

    # --- zip the leftover column into column cj + 1, top to bottom --------
    # The leftover column needs no gauging: its weight (and the block) sit
    # in the top core, and every other core is already isometric toward its
    # upper bond, as is the target column toward up/left — so the un-zipped
    # part stays isometric seen from the zip frontier, which makes each
    # truncated SVD spectrum the true Schmidt spectrum of that cut.
    spec = TruncationSpec(max_rank=state.eta_max, rel_tol=zip_tol)
    # carried: (m, kappa iface, column iface, p)
    carried = np.ones((1, 1, 1, 1), dtype=np.complex128)
    for i in range(lx):
        rc = r_cores[i]
        t = contract(carried, rc, [(1, 0)])
        # t: (m, ci, p, chi, kappa_down, right[, p_r])
        if t.ndim == 7:
            if t.shape[2] != 1:
                raise TensorError("two block axes met during absorption")
            t = np.moveaxis(t[:, :, 0], 5, 2)
        cc = grid[i][cj + 1]  # (up, left, down, right, phys)
        t = contract(t, cc, [(1, _UP), (5, _LEFT)])
        # t: (m, p, chi, kappa_down, down, right, phys)
        if i < lx - 1:
            uq, sv, vh, rep = svd_split(t, (0, 2, 5, 6), spec)
            discard = _accumulate(discard, rep.discarded_weight)
            # uq: (m, chi, right, phys, k) -> (up=m, left=chi, down=k,
            # right, phys)
            grid[i][cj + 1] = np.transpose(uq, (0, 1, 4, 2, 3))
            out[i][cj + 1] = (_DOWN,)
            # vh: (k, p, kappa_down, down) -> (m=k, kappa, column, p)
            carried = np.transpose(sv[:, None, None, None] * vh,
                                   (0, 2, 3, 1))
        else:
            if t.shape[3] != 1 or t.shape[4] != 1:
                raise TensorError("bottom boundary bonds must close")
            bot = t[:, :, :, 0, 0]  # (m, p, chi, right, phys)
            # -> center tensor (up=m, left=chi, down=1, right, phys, p)
            grid[i][cj + 1] = np.transpose(
                bot, (0, 2, 3, 4, 1))[:, :, np.newaxis]
            out[i][cj + 1] = ()
    moved = replace(state, grid=tuple(tuple(r) for r in grid),
                    out_axes=tuple(tuple(r) for r in out),
                    center=(lx - 1, cj + 1), cum_discard=discard)
    # lossless relocation so callers always find the center at the top
    return move_center_to_top(moved)


def save_snapshot(state: BlockIsoPeps, path) -> None:
    """Write a versioned binary snapshot of the state."""
    header = {
        "version": _SNAPSHOT_VERSION,
        "lx": state.lx, "ly": state.ly, "p": state.p,
        "center": list(state.center),
        "chi_max": state.chi_max, "eta_max": state.eta_max,
        "cum_discard": state.cum_discard,
        "labels": [list(r) for r in state.labels],
        "out_axes": [[list(o) for o in r] for r in state.out_axes],
        "shapes": [[list(state.grid[i][j].shape)
                    for j in range(state.ly)] for i in range(state.lx)],
    }
    hb = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_SNAPSHOT_MAGIC)
    buf.write(struct.pack("<II", _SNAPSHOT_VERSION, len(hb)))
    buf.write(hb)
    for i in range(state.lx):
        for j in range(state.ly):
            buf.write(np.ascontiguousarray(state.grid[i][j]).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_snapshot(path) -> BlockIsoPeps:
    """Read a snapshot written by ``save_snapshot``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _SNAPSHOT_MAGIC:
        raise SnapshotError("not a state snapshot")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _SNAPSHOT_VERSION:
        raise SnapshotError(f"snapshot version {version} is not supported")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        off = 12 + hlen
        grid = []
        for i in range(header["lx"]):
            row = []
            for j in range(header["ly"]):
                shape = tuple(header["shapes"][i][j])
                n = int(np.prod(shape)) * 16
                arr = np.frombuffer(raw[off:off + n],
                                    dtype=np.complex128).reshape(shape)
                if arr.size != int(np.prod(shape)):
                    raise SnapshotError("snapshot truncated")
                off += n
                row.append(arr.copy())
            grid.append(tuple(row))
        return BlockIsoPeps(
            grid=tuple(grid), center=tuple(header["center"]),
            p=header["p"], chi_max=header["chi_max"],
            eta_max=header["eta_max"], cum_discard=header["cum_discard"],
            labels=tuple(tuple(r) for r in header["labels"]),
            out_axes=tuple(tuple(tuple(o) for o in r)
                           for r in header["out_axes"]))
    except SnapshotError:
        raise
    except Exception as e:  # malformed header or short payload
        raise SnapshotError(f"corrupted snapshot: {e}") from e
