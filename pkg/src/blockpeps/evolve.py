"""Imaginary-time evolution of a block isometric PEPS and the subspace
iteration driver built on it.

One evolution step applies the first-order split of ``exp(-tau H)``: all
vertical two-site gates column by column (with a column split relocating the
center between columns), then a ninety-degree counter-clockwise rotation so
the horizontal gates can reuse the vertical machinery, then a second
rotation.  Consecutive steps therefore run in frames that alternate by 180
degrees; site labels keep the physics frame-independent.

Energies are Rayleigh quotients evaluated with the same sweep machinery,
contracting each bond's Hamiltonian term where the evolution would apply a
gate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import isopeps
from .exact import site_position
from .models import Gate, ModelSpec, heisenberg_model, make_gates, tfi_model
from .tensor import TensorError, TruncationSpec, contract, lq_split, qr_split, \
    svd_split


class EvolveError(RuntimeError):
    """Mid-run failure; carries the offending state for diagnostics."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass
class TraceRow:
    """Per-iteration diagnostics of the subspace iteration."""

    iteration: int
    energies: tuple | None
    norms: tuple
    gram_cond: float
    discard_increment: float
    wall_ms: float
    replaced: tuple = ()


@dataclass
class EnergyTrace:
    rows: list = field(default_factory=list)


@dataclass(frozen=True)
class RunConfig:
    """Settings of one subspace-iteration experiment."""

    model_kind: str
    lx: int
    ly: int
    p: int
    chi: int
    eta: int
    tau: float
    iterations: int
    g: float = 0.0
    seed: int = 0
    zip_tol: float = 1e-6
    disentangler_iters: int = 10
    energy_period: int = 1
    checkpoint_period: int = 10
    energy_cap_factor: int = 1

    def __post_init__(self):
        if self.model_kind not in ("tfi", "heisenberg"):
            raise ValueError(f"unknown model kind '{self.model_kind}'")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if min(self.lx, self.ly, self.p, self.chi, self.eta) < 1:
            raise ValueError("lattice sizes, p, chi, eta must be at least 1")
        if self.energy_period < 1 or self.checkpoint_period < 1:
            raise ValueError("periods must be at least 1")
        if self.energy_cap_factor < 1:
            raise ValueError("energy_cap_factor must be at least 1")


def build_model(config: RunConfig) -> ModelSpec:
    if config.model_kind == "tfi":
        return tfi_model(config.lx, config.ly, config.g)
    return heisenberg_model(config.lx, config.ly)


def _gate_table(model: ModelSpec, tau: float):
    """Gates keyed by the unordered pair of flat site labels."""
    table = {}
    for bond, gate in make_gates(model, tau):
        ka = site_position(*bond.site_a, model.ly)
        kb = site_position(*bond.site_b, model.ly)
        table[frozenset((ka, kb))] = (ka, gate)
    return table


def _term_table(model: ModelSpec):
    table = {}
    d = model.d
    for bond in model.bonds:
        ka = site_position(*bond.site_a, model.ly)
        kb = site_position(*bond.site_b, model.ly)
        table[frozenset((ka, kb))] = (ka, bond.term.reshape(d, d, d, d))
    return table


def _oriented(tensor4, first_label, upper_label):
    """Orient a two-site (out_a, out_b, in_a, in_b) tensor so the first
    slot acts on the grid-upper site."""
    if first_label == upper_label:
        return tensor4
    return np.transpose(tensor4, (1, 0, 3, 2))


def apply_bond_gate(state, i: int, gate, reduced: bool = True):
    """Apply a two-site gate on the center-column bond between rows i, i+1.

    The center (with block axis) must sit at row ``i``; it moves down to row
    ``i + 1``.  The new vertical bond is truncated at ``eta_max``.  The
    reduced path QR-factors the two tensors first so the gate and SVD act on
    the smallest possible problem; it is exactly equivalent to the direct
    contraction.
    """
    ci, cj = state.center
    if ci != i:
        raise TensorError("center must sit at the upper gate site")
    if i + 1 >= state.lx:
        raise TensorError("no bond below the last row")
    g4 = gate.gate_tensor() if isinstance(gate, Gate) else np.asarray(gate)
    if g4.shape != (state.d,) * 4:
        raise TensorError("gate does not match the physical dimension")
    spec = TruncationSpec(max_rank=state.eta_max)
    c = state.grid[i][cj]        # (u, l, d, r, s, p)
    b = state.grid[i + 1][cj]    # (u2, l2, d2, r2, s2)
    grid = [list(r) for r in state.grid]
    out = [list(r) for r in state.out_axes]
    if reduced:
        qt, x = qr_split(c, (0, 1, 3))       # qt: (u,l,r,k1); x: (k1,d,s,p)
        y, qb = lq_split(b, (0, 4))          # y: (u2,s2,k2); qb: (k2,l2,d2,r2)
        t = contract(x, y, [(1, 0)])         # (k1, s, p, s2, k2)
        t = contract(t, g4, [(1, 2), (3, 3)])  # (k1, p, k2, ot, ob)
        u, sv, v, rep = svd_split(t, (0, 3), spec)
        # u: (k1, ot, kb); v: (kb, p, k2, ob)
        top = contract(qt, u, [(3, 0)])      # (u, l, r, ot, kb)
        grid[i][cj] = np.transpose(top, (0, 1, 4, 2, 3))
        bot = contract(sv[:, None, None, None] * v, qb, [(2, 0)])
        # (kb, p, ob, l2, d2, r2)
        grid[i + 1][cj] = np.transpose(bot, (0, 3, 4, 5, 2, 1))
    else:
        theta = contract(c, b, [(2, 0)])
        # (u, l, r, s, p, l2, d2, r2, s2)
        theta = contract(theta, g4, [(3, 2), (8, 3)])
        # (u, l, r, p, l2, d2, r2, ot, ob)
        u, sv, v, rep = svd_split(theta, (0, 1, 2, 7), spec)
        # u: (u, l, r, ot, kb); v: (kb, p, l2, d2, r2, ob)
        grid[i][cj] = np.transpose(u, (0, 1, 4, 2, 3))
        bot = sv[:, None, None, None, None, None] * v
        grid[i + 1][cj] = np.transpose(bot, (0, 2, 3, 4, 5, 1))
    out[i][cj] = (isopeps._DOWN,)
    out[i + 1][cj] = ()
    discard = float(np.sqrt(state.cum_discard ** 2
                            + rep.discarded_weight ** 2))
    return replace(state, grid=tuple(tuple(r) for r in grid),
                   out_axes=tuple(tuple(r) for r in out),
                   center=(i + 1, cj), cum_discard=discard)


def tebd2_half_sweep(state, gate_table, reduced: bool = True,
                     with_disentangler: bool = True, zip_tol: float = 1e-6):
    """Apply all grid-vertical gates column by column.

    Requires the center at the grid's top-left site.  Gates are looked up by
    the unordered pair of site labels, so the same routine serves every
    rotation frame.  Ends with the center back at the top of the last
    column, ready for a rotation.
    """
    if state.center != (0, 0):
        raise TensorError("half sweep expects the center at the top left")
    s = state
    for j in range(s.ly):
        for i in range(s.lx - 1):
            upper, lower = s.labels[i][j], s.labels[i + 1][j]
            ka, gate = gate_table[frozenset((upper, lower))]
            g4 = _oriented(gate.gate_tensor(), ka, upper)
            s = apply_bond_gate(s, i, g4, reduced=reduced)
        if j < s.ly - 1:
            s = isopeps.moses_move_column(
                s, with_disentangler=with_disentangler, zip_tol=zip_tol)
    return isopeps.move_center_to_top(s)


def apply_trotter_step(state, gate_table, reduced: bool = True,
                       with_disentangler: bool = True, zip_tol: float = 1e-6):
    """One first-order split step: vertical gates, rotate, vertical gates
    of the rotated frame (the original horizontal gates), rotate.

    The returned state lives in the frame rotated by 180 degrees; labels
    keep all observables frame-independent, and the next step restores the
    original frame.
    """
    s = tebd2_half_sweep(state, gate_table, reduced=reduced,
                         with_disentangler=with_disentangler,
                         zip_tol=zip_tol)
    s = isopeps.rotate_ccw(s)
    s = tebd2_half_sweep(s, gate_table, reduced=reduced,
                         with_disentangler=with_disentangler,
                         zip_tol=zip_tol)
    return isopeps.rotate_ccw(s)


def rayleigh_quotients(state, model: ModelSpec,
                       with_disentangler: bool = True,
                       zip_tol: float = 1e-6,
                       cap_factor: int = 1) -> np.ndarray:
    """Per-member energies ``<T_a, H T_a> / <T_a, T_a>``.

    Reuses the evolution sweep: the center visits every bond (in both
    frames), and the bond's Hamiltonian term is contracted against the
    local two-site wavefunction instead of a gate being applied.  Column
    splits between columns are approximate, so the result inherits their
    truncation error; every bond term itself is evaluated exactly in the
    isometric environment.  ``cap_factor > 1`` lets the measurement sweeps
    use larger caps than the state's, shrinking that sweep bias without
    touching the state (the energies stay variational estimates of the
    same block members).
    """
    if cap_factor > 1:
        state = replace(state, chi_max=state.chi_max * cap_factor,
                        eta_max=state.eta_max * cap_factor)
    g = isopeps.block_overlap(state)
    nrm2 = np.real(np.diag(g))
    if np.any(nrm2 < 1e-24):
        raise EvolveError("a block member has (numerically) zero norm")
    terms = _term_table(model)
    energies = np.zeros(state.p, dtype=np.complex128)
    s = isopeps.move_center_to_top(state)
    if s.center[1] != 0:  # one rotation always lands the center in column 0
        s = isopeps.move_center_to_top(isopeps.rotate_ccw(s))
    for _half in range(2):
        for j in range(s.ly):
            for i in range(s.lx - 1):
                upper, lower = s.labels[i][j], s.labels[i + 1][j]
                ka, h4 = terms[frozenset((upper, lower))]
                h4 = _oriented(h4, ka, upper)
                c = s.grid[i][j]
                b = s.grid[i + 1][j]
                theta = contract(c, b, [(2, 0)])
                # (u, l, r, s, p, l2, d2, r2, s2)
                hth = contract(theta, h4, [(3, 2), (8, 3)])
                # (u, l, r, p, l2, d2, r2, ot, ob)
                val = np.tensordot(
                    np.conj(theta), hth,
                    axes=([0, 1, 2, 3, 5, 6, 7, 8],
                          [0, 1, 2, 7, 4, 5, 6, 8]))
                energies += np.diagonal(val)
                s = isopeps.move_center_within_column(s, i + 1)
            if j < s.ly - 1:
                s = isopeps.move_center_to_bottom(s)
                s = isopeps.moses_move_column(
                    s, with_disentangler=with_disentangler, zip_tol=zip_tol)
        s = isopeps.move_center_to_top(s)
        s = isopeps.rotate_ccw(s)
        s = isopeps.move_center_to_top(s)
    energies = energies / nrm2
    if np.any(np.abs(energies.imag) > 1e-8 *
              np.maximum(1.0, np.abs(energies.real))):
        raise EvolveError("Rayleigh quotients have a non-real part")
    return np.real(energies)


def subspace_iteration(config: RunConfig, initial_state=None,
                       initial_trace: EnergyTrace | None = None,
                       start_iteration: int = 0, callback=None):
    """Block power iteration on ``exp(-tau H)`` via repeated split steps.

    Each iteration applies one Trotter step, re-orthonormalizes the block,
    and (every ``energy_period`` iterations, and always on the last one)
    evaluates Rayleigh quotients.  ``callback(iteration, state, row)``, if
    given, runs after every iteration (the CLI uses it for checkpoints).

    Returns ``(final state, EnergyTrace)``.
    """
    model = build_model(config)
    table = _gate_table(model, config.tau)
    state = initial_state
    if state is None:
        state = isopeps.random_state(config.lx, config.ly, model.d, config.p,
                                     chi=config.chi, eta=config.eta,
                                     seed=config.seed)
    trace = initial_trace if initial_trace is not None else EnergyTrace()
    use_dis = config.disentangler_iters > 0
    end = start_iteration + config.iterations
    for it in range(start_iteration, end):
        t0 = time.perf_counter()
        prev = state.cum_discard
        state = apply_trotter_step(state, table, with_disentangler=use_dis,
                                   zip_tol=config.zip_tol)
        g = isopeps.block_overlap(state)
        nrm = np.sqrt(np.maximum(np.real(np.diag(g)), 0.0))
        cond = float(np.linalg.cond(g)) if config.p > 1 else 1.0
        state, replaced = isopeps.orthonormalize_block(
            state, replace_seed=config.seed + 7919 * (it + 1))
        audit = isopeps.isometry_audit(state)
        if audit > 1e-6:
            raise EvolveError(
                f"isometry audit failed at iteration {it}: {audit:.3e}",
                state=state)
        energies = None
        if (it + 1) % config.energy_period == 0 or it == end - 1:
            energies = tuple(float(e) for e in rayleigh_quotients(
                state, model, with_disentangler=use_dis,
                zip_tol=config.zip_tol,
                cap_factor=config.energy_cap_factor))
        inc = float(np.sqrt(max(state.cum_discard ** 2 - prev ** 2, 0.0)))
        row = TraceRow(iteration=it, energies=energies,
                       norms=tuple(float(x) for x in nrm),
                       gram_cond=cond, discard_increment=inc,
                       wall_ms=(time.perf_counter() - t0) * 1e3,
                       replaced=replaced)
        trace.rows.append(row)
        if callback is not None:
            callback(it, state, row)
    return state, trace
