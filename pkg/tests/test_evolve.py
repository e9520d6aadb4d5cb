"""Gate application, sweep schedule, energy sweeps, and the iteration driver."""

from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from blockpeps import evolve, exact, isopeps, models
from blockpeps.evolve import (EvolveError, RunConfig, apply_bond_gate,
                              apply_trotter_step, build_model,
                              rayleigh_quotients, subspace_iteration,
                              tebd2_half_sweep)
from blockpeps.tensor import TensorError

from conftest import dense_members


def big_caps(state, cap=64):
    return replace(state, chi_max=cap, eta_max=cap)


def dense_h(model):
    return exact.assemble(model).matrix.toarray()


class TestRunConfig:
    def test_rejects_unknown_model(self):
        with pytest.raises(ValueError):
            RunConfig("xy", 2, 2, 1, 2, 2, 0.1, 10)

    def test_rejects_negative_tau(self):
        with pytest.raises(ValueError):
            RunConfig("tfi", 2, 2, 1, 2, 2, -0.1, 10)

    def test_rejects_zero_iterations_and_bad_periods(self):
        with pytest.raises(ValueError):
            RunConfig("tfi", 2, 2, 1, 2, 2, 0.1, 0)
        with pytest.raises(ValueError):
            RunConfig("tfi", 2, 2, 1, 2, 2, 0.1, 1, energy_period=0)
        with pytest.raises(ValueError):
            RunConfig("tfi", 2, 2, 1, 2, 2, 0.1, 1, energy_cap_factor=0)

    def test_build_model_dispatch(self):
        assert build_model(RunConfig("tfi", 2, 2, 1, 2, 2, 0.1, 1,
                                     g=1.5)).name == "tfi(g=1.5)"
        assert build_model(RunConfig("heisenberg", 2, 2, 1, 2, 2,
                                     0.1, 1)).name == "heisenberg"


class TestApplyBondGate:
    def setup_state(self, seed=3):
        st = isopeps.random_state(3, 2, 2, 2, chi=2, eta=2, seed=seed)
        return big_caps(st)

    def gate_and_dense(self, st, model, tau, i=0, j=0):
        table = evolve._gate_table(model, tau)
        upper, lower = st.labels[i][j], st.labels[i + 1][j]
        ka, gate = table[frozenset((upper, lower))]
        g4 = evolve._oriented(gate.gate_tensor(), ka, upper)
        gm = exact._embed_two_site(gate.g_matrix, min(upper, lower),
                                   max(upper, lower), st.lx * st.ly, 2)
        return g4, gm.toarray()

    def test_matches_dense_gate_action(self):
        st = self.setup_state()
        model = models.tfi_model(3, 2, 2.0)
        g4, gm = self.gate_and_dense(st, model, 0.1)
        v0 = dense_members(st)
        out = apply_bond_gate(st, 0, g4)
        assert out.center == (1, 0)
        assert isopeps.isometry_audit(out) < 1e-10
        assert np.allclose(dense_members(out), v0 @ gm.T, atol=1e-9)

    def test_reduced_and_direct_paths_agree(self):
        st = self.setup_state()
        model = models.heisenberg_model(3, 2)
        g4, _ = self.gate_and_dense(st, model, 0.2)
        a = apply_bond_gate(st, 0, g4, reduced=True)
        b = apply_bond_gate(st, 0, g4, reduced=False)
        assert np.allclose(dense_members(a), dense_members(b), atol=1e-9)

    def test_requires_center_at_upper_site(self):
        st = self.setup_state()
        model = models.tfi_model(3, 2, 1.0)
        g4, _ = self.gate_and_dense(st, model, 0.1, i=1)
        with pytest.raises(TensorError):
            apply_bond_gate(st, 1, g4)  # center is at row 0

    def test_no_bond_below_last_row(self):
        st = self.setup_state()
        st = isopeps.move_center_within_column(st, 2)
        with pytest.raises(TensorError):
            apply_bond_gate(st, 2, np.eye(4).reshape(2, 2, 2, 2))


class TestTrotterStep:
    def test_half_sweep_requires_top_left_center(self):
        st = isopeps.random_state(2, 2, 2, 1, chi=2, eta=2, seed=1)
        st = isopeps.move_center_within_column(st, 1)
        model = models.tfi_model(2, 2, 1.0)
        with pytest.raises(TensorError):
            tebd2_half_sweep(st, evolve._gate_table(model, 0.1))

    def test_zero_tau_step_is_identity(self):
        st = big_caps(isopeps.random_state(2, 3, 2, 2, chi=2, eta=2, seed=8))
        model = models.tfi_model(2, 3, 2.5)
        table = evolve._gate_table(model, 0.0)
        v0 = dense_members(st)
        out = apply_trotter_step(st, table, zip_tol=0.0)
        assert np.allclose(dense_members(out), v0, atol=1e-8)

    def test_commuting_terms_reproduce_exact_propagator(self):
        # at g = 0 every bond term commutes, so one split step must equal
        # the exact imaginary-time propagator (no splitting error at all)
        st = big_caps(isopeps.random_state(2, 3, 2, 1, chi=2, eta=2,
                                           seed=12))
        model = models.tfi_model(2, 3, 0.0)
        table = evolve._gate_table(model, 0.3)
        v0 = dense_members(st)
        out = apply_trotter_step(st, table, zip_tol=0.0)
        want = v0 @ scipy.linalg.expm(-0.3 * dense_h(model)).T
        assert np.allclose(dense_members(out), want, atol=1e-8)

    def test_step_returns_center_to_top_left(self):
        st = big_caps(isopeps.random_state(3, 3, 2, 2, chi=2, eta=2, seed=4))
        model = models.heisenberg_model(3, 3)
        out = apply_trotter_step(st, evolve._gate_table(model, 0.05))
        assert out.center == (0, 0)
        assert isopeps.isometry_audit(out) < 1e-8

    def test_step_approximates_propagator_to_second_order(self):
        st = big_caps(isopeps.random_state(2, 2, 2, 1, chi=2, eta=2, seed=6))
        model = models.tfi_model(2, 2, 2.0)
        v0 = dense_members(st)
        errs = []
        for tau in (0.2, 0.1):
            out = apply_trotter_step(st, evolve._gate_table(model, tau),
                                     zip_tol=0.0)
            want = v0 @ scipy.linalg.expm(-tau * dense_h(model)).T
            errs.append(np.linalg.norm(dense_members(out) - want)
                        / np.linalg.norm(want))
        # halving tau must cut the splitting error roughly fourfold
        assert errs[1] < errs[0] / 2.5


class TestRayleighQuotients:
    def test_matches_dense_quotients(self):
        st = big_caps(isopeps.random_state(3, 3, 2, 2, chi=2, eta=2,
                                           seed=19))
        model = models.tfi_model(3, 3, 1.3)
        got = rayleigh_quotients(st, model, zip_tol=0.0)
        v = dense_members(st)
        h = dense_h(model)
        want = np.real(np.einsum("ai,ai->a", v.conj(), (h @ v.T).T)
                       / np.einsum("ai,ai->a", v.conj(), v))
        assert np.allclose(got, want, atol=1e-7)

    def test_cap_factor_agrees_in_the_exact_regime(self):
        st = big_caps(isopeps.random_state(2, 3, 2, 2, chi=2, eta=2,
                                           seed=20))
        model = models.heisenberg_model(2, 3)
        a = rayleigh_quotients(st, model, zip_tol=0.0)
        b = rayleigh_quotients(st, model, zip_tol=0.0, cap_factor=2)
        assert np.allclose(a, b, atol=1e-8)

    def test_zero_norm_member_rejected(self):
        st = isopeps.random_state(2, 2, 2, 2, chi=2, eta=2, seed=3)
        grid = [list(r) for r in st.grid]
        c = grid[0][0].copy()
        c[..., 1] = 0.0
        grid[0][0] = c
        with pytest.raises(EvolveError):
            rayleigh_quotients(st._with_grid(grid),
                               models.tfi_model(2, 2, 1.0))


class TestSubspaceIteration:
    def test_single_bond_chain_converges_to_exact_pair(self):
        # a 1x2 lattice has one bond, so the split propagator is exact and
        # the block iteration must reach the two lowest eigenpairs
        cfg = RunConfig("tfi", 1, 2, p=2, chi=4, eta=4, tau=0.25,
                        iterations=150, g=1.5, seed=2, energy_period=150)
        state, trace = subspace_iteration(cfg)
        w, _ = exact.lowest_eigenpairs(
            exact.assemble(models.tfi_model(1, 2, 1.5)), 2)
        got = np.sort(np.asarray(trace.rows[-1].energies))
        assert np.allclose(got, w, rtol=1e-7)

    def test_energy_period_controls_evaluations(self):
        cfg = RunConfig("tfi", 2, 2, p=1, chi=2, eta=4, tau=0.1,
                        iterations=5, g=3.5, seed=1, energy_period=2)
        _, trace = subspace_iteration(cfg)
        have = [r.energies is not None for r in trace.rows]
        # evaluated when (iteration + 1) is a multiple of 2, plus the last
        assert have == [False, True, False, True, True]

    def test_deterministic_given_config(self):
        cfg = RunConfig("heisenberg", 2, 2, p=2, chi=3, eta=4, tau=0.1,
                        iterations=4, seed=9)
        _, t1 = subspace_iteration(cfg)
        _, t2 = subspace_iteration(cfg)
        for a, b in zip(t1.rows, t2.rows):
            assert a.energies == b.energies
            assert a.norms == b.norms

    def test_split_run_matches_single_run(self):
        cfg = RunConfig("tfi", 2, 2, p=2, chi=3, eta=4, tau=0.1,
                        iterations=6, g=3.0, seed=5, energy_period=2)
        full_state, full_trace = subspace_iteration(cfg)
        head_cfg = replace(cfg, iterations=3)
        head_state, head_trace = subspace_iteration(head_cfg)
        tail_cfg = replace(cfg, iterations=3)
        tail_state, tail_trace = subspace_iteration(
            tail_cfg, initial_state=head_state, initial_trace=head_trace,
            start_iteration=3)
        a = np.asarray(full_trace.rows[-1].energies)
        b = np.asarray(tail_trace.rows[-1].energies)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_callback_sees_every_iteration(self):
        seen = []
        cfg = RunConfig("tfi", 2, 2, p=1, chi=2, eta=4, tau=0.1,
                        iterations=3, g=1.0, seed=1)
        subspace_iteration(cfg, callback=lambda it, st, row:
                           seen.append((it, row.iteration)))
        assert seen == [(0, 0), (1, 1), (2, 2)]

    def test_trace_norms_and_discard_recorded(self):
        cfg = RunConfig("tfi", 2, 2, p=2, chi=2, eta=4, tau=0.1,
                        iterations=2, g=2.0, seed=7)
        _, trace = subspace_iteration(cfg)
        for row in trace.rows:
            assert len(row.norms) == 2
            assert row.discard_increment >= 0.0
            assert row.gram_cond >= 1.0
            assert row.wall_ms > 0.0
