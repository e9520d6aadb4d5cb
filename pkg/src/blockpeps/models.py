"""Lattice Hamiltonians as collections of two-site bond terms, plus Trotter gates.

A model lives on an ``lx`` x ``ly`` open-boundary rectangular lattice; sites
are addressed as ``(i, j)`` with row ``i`` counted from the top and column
``j`` from the left.  Single-site field terms are absorbed into the bond
terms with weights ``1/degree`` (kept as exact rationals) so the sum of the
embedded bond terms reproduces the intended global Hamiltonian exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg

SX = np.array([[0, 1], [1, 0]], dtype=np.complex128)
SY = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SZ = np.array([[1, 0], [0, -1]], dtype=np.complex128)
ID2 = np.eye(2, dtype=np.complex128)

_HERM_TOL = 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Bond:
    """A nearest-neighbor bond ``site_a -> site_b`` with a d^2 x d^2 Hermitian term.

    ``site_b`` is the neighbor below (vertical bond) or to the right
    (horizontal bond) of ``site_a``.
    """

    site_a: tuple[int, int]
    site_b: tuple[int, int]
    term: np.ndarray

    @property
    def vertical(self) -> bool:
        return self.site_b[0] == self.site_a[0] + 1


@dataclass(frozen=True)
class ModelSpec:
    lx: int
    ly: int
    d: int
    bonds: tuple[Bond, ...]
    name: str = "custom"

    def __post_init__(self):
        for b in self.bonds:
            (ia, ja), (ib, jb) = b.site_a, b.site_b
            if not (0 <= ia < self.lx and 0 <= ja < self.ly
                    and 0 <= ib < self.lx and 0 <= jb < self.ly):
                raise ModelError(f"bond {b.site_a}-{b.site_b} leaves the lattice")
            if (ib - ia, jb - ja) not in ((1, 0), (0, 1)):
                raise ModelError(f"bond {b.site_a}-{b.site_b} is not nearest-neighbor")
            dev = np.linalg.norm(b.term - b.term.conj().T)
            if dev > _HERM_TOL * max(1.0, np.linalg.norm(b.term)):
                raise ModelError(f"bond term {b.site_a}-{b.site_b} is not Hermitian")

    def bond_lookup(self) -> dict[frozenset, Bond]:
        return {frozenset((b.site_a, b.site_b)): b for b in self.bonds}


def _degree(i: int, j: int, lx: int, ly: int) -> int:
    return (i > 0) + (i < lx - 1) + (j > 0) + (j < ly - 1)


def _bond_sites(lx: int, ly: int):
    """Vertical bonds column-major, then horizontal bonds row-major."""
    for j in range(ly):
        for i in range(lx - 1):
            yield (i, j), (i + 1, j)
    for i in range(lx):
        for j in range(ly - 1):
            yield (i, j), (i, j + 1)


def _check_lattice(lx: int, ly: int):
    if lx < 1 or ly < 1 or lx * ly < 2:
        raise ModelError("lattice has no bonds")


def tfi_model(lx: int, ly: int, g: float) -> ModelSpec:
    """Transverse-field Ising model -sum sz.sz - g sum sx on the open lattice.

    The field on each site is distributed over its incident bonds with exact
    weight ``1/degree``, so summing the embedded bond terms recovers the
    global Hamiltonian with no partition ambiguity.
    """
    _check_lattice(lx, ly)
    bonds = []
    for sa, sb in _bond_sites(lx, ly):
        wa = Fraction(1, _degree(*sa, lx, ly))
        wb = Fraction(1, _degree(*sb, lx, ly))
        term = (-np.kron(SZ, SZ)
                - g * float(wa) * np.kron(SX, ID2)
                - g * float(wb) * np.kron(ID2, SX))
        bonds.append(Bond(sa, sb, term))
    return ModelSpec(lx, ly, 2, tuple(bonds), name=f"tfi(g={g})")


def heisenberg_model(lx: int, ly: int) -> ModelSpec:
    """Antiferromagnetic Heisenberg model sum sx.sx + sy.sy + sz.sz."""
    _check_lattice(lx, ly)
    term = np.kron(SX, SX) + np.kron(SY, SY) + np.kron(SZ, SZ)
    bonds = tuple(Bond(sa, sb, term) for sa, sb in _bond_sites(lx, ly))
    return ModelSpec(lx, ly, 2, bonds, name="heisenberg")


@dataclass(frozen=True)
class Gate:
    """Imaginary-time two-site gate exp(-tau * term)."""

    tau: float
    term: np.ndarray
    g_matrix: np.ndarray
    d: int = 2

    def gate_tensor(self) -> np.ndarray:
        """The gate reshaped to (out_a, out_b, in_a, in_b)."""
        d = self.d
        return self.g_matrix.reshape(d, d, d, d)


def make_gates(model: ModelSpec, tau: float) -> list[tuple[Bond, Gate]]:
    """One gate per bond via dense Hermitian eigendecomposition of the term."""
    if tau < 0:
        raise ModelError("tau must be nonnegative")
    gates = []
    cache: dict[bytes, Gate] = {}
    for b in model.bonds:
        key = np.ascontiguousarray(b.term).tobytes()
        gate = cache.get(key)
        if gate is None:
            w, v = np.linalg.eigh(b.term)
            gm = (v * np.exp(-tau * w)) @ v.conj().T
            gate = Gate(tau=tau, term=b.term, g_matrix=gm, d=model.d)
            cache[key] = gate
        gates.append((b, gate))
    return gates


def gate_lookup(gates: list[tuple[Bond, Gate]]) -> dict[frozenset, tuple[Bond, Gate]]:
    return {frozenset((b.site_a, b.site_b)): (b, g) for b, g in gates}
