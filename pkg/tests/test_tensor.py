"""Factorization and truncation primitives against dense linear algebra."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockpeps.tensor import (TensorError, TruncationSpec, UNBOUNDED,
                              astensor, contract, frob, isometry_defect,
                              lq_split, permute, qr_split, svd_split,
                              truncation_rank)


def random_tensor(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def reassemble(u, s, v):
    """Contract u @ diag(s) @ v back over the bond axes."""
    return np.tensordot(u * s, v, axes=([u.ndim - 1], [0]))


class TestAstensor:
    def test_coerces_to_complex128(self):
        t = astensor([[1, 2], [3, 4]])
        assert t.dtype == np.complex128

    def test_rejects_nan_and_inf(self):
        with pytest.raises(TensorError):
            astensor([np.nan, 1.0])
        with pytest.raises(TensorError):
            astensor([1.0, np.inf * 1j])


class TestPermuteContract:
    def test_permute_rejects_non_permutation(self):
        with pytest.raises(TensorError):
            permute(np.zeros((2, 3)), (0, 0))

    def test_contract_matches_tensordot(self, rng):
        a = random_tensor(rng, (2, 3, 4))
        b = random_tensor(rng, (4, 3, 5))
        got = contract(a, b, [(2, 0), (1, 1)])
        want = np.tensordot(a, b, axes=([2, 1], [0, 1]))
        assert np.allclose(got, want)

    def test_contract_rejects_shape_mismatch(self, rng):
        with pytest.raises(TensorError):
            contract(random_tensor(rng, (2, 3)),
                     random_tensor(rng, (4, 5)), [(1, 0)])

    def test_contract_rejects_repeated_axis(self, rng):
        a = random_tensor(rng, (2, 2))
        with pytest.raises(TensorError):
            contract(a, a, [(0, 0), (0, 1)])


class TestTruncationRank:
    def test_unbounded_keeps_everything(self):
        s = np.array([3.0, 2.0, 1.0])
        assert truncation_rank(s, UNBOUNDED) == 3

    def test_rank_cap(self):
        s = np.array([3.0, 2.0, 1.0])
        assert truncation_rank(s, TruncationSpec(max_rank=2)) == 2

    def test_rel_tol_drops_small_tail(self):
        # tail weight of dropping the last value: 1e-8 / ||s|| < 1e-6
        s = np.array([1.0, 1e-8])
        assert truncation_rank(s, TruncationSpec(rel_tol=1e-6)) == 1

    def test_keeps_at_least_one(self):
        s = np.array([0.0, 0.0])
        assert truncation_rank(s, TruncationSpec(max_rank=5)) == 1

    def test_spec_validation(self):
        with pytest.raises(TensorError):
            TruncationSpec(max_rank=0)
        with pytest.raises(TensorError):
            TruncationSpec(rel_tol=1.0)


class TestSvdSplit:
    def test_exact_reconstruction_unbounded(self, rng):
        a = random_tensor(rng, (3, 4, 2, 5))
        u, s, v, rep = svd_split(a, (0, 2))
        back = reassemble(u, s, v)  # axes (3, 2, k) x (k, 4, 5)
        want = np.transpose(a, (0, 2, 1, 3))
        assert np.allclose(back, want, atol=1e-12)
        assert rep.discarded_weight == 0.0

    def test_reported_weight_equals_realized_error(self, rng):
        a = random_tensor(rng, (6, 6))
        u, s, v, rep = svd_split(a, (0,), TruncationSpec(max_rank=3))
        err = frob(reassemble(u, s, v) - a) / frob(a)
        assert np.isclose(err, rep.discarded_weight, rtol=1e-10)
        assert rep.kept_rank == 3

    def test_u_isometric_v_coisometric(self, rng):
        a = random_tensor(rng, (4, 3, 5))
        u, s, v, _ = svd_split(a, (0, 1), TruncationSpec(max_rank=2))
        assert isometry_defect(u, (u.ndim - 1,)) < 1e-12
        assert isometry_defect(v, (0,)) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 6),
           st.integers(0, 2 ** 31 - 1))
    def test_truncated_svd_is_best_rank_k(self, m, n, k, seed):
        rng = np.random.default_rng(seed)
        a = random_tensor(rng, (m, n))
        u, s, v, rep = svd_split(a, (0,), TruncationSpec(max_rank=k))
        sig = np.linalg.svd(a, compute_uv=False)
        kk = min(k, len(sig))
        best = np.sqrt(np.sum(sig[kk:] ** 2)) / np.linalg.norm(sig)
        assert np.isclose(rep.discarded_weight, best, atol=1e-12)


class TestQrLq:
    def test_qr_exact_and_isometric(self, rng):
        a = random_tensor(rng, (3, 4, 5))
        q, r = qr_split(a, (0, 2))
        back = np.tensordot(q, r, axes=([2], [0]))
        assert np.allclose(back, np.transpose(a, (0, 2, 1)), atol=1e-12)
        assert isometry_defect(q, (q.ndim - 1,)) < 1e-12

    def test_lq_exact_and_coisometric(self, rng):
        a = random_tensor(rng, (3, 4, 5))
        l, q = lq_split(a, (1,))
        back = np.tensordot(l, q, axes=([1], [0]))
        assert np.allclose(back, np.transpose(a, (1, 0, 2)), atol=1e-12)
        assert isometry_defect(q, (0,)) < 1e-12

    def test_qr_phase_convention_is_deterministic(self, rng):
        # R diagonal real nonnegative makes the factorization unique for
        # full-rank input, so repeated calls agree exactly
        a = random_tensor(rng, (5, 3))
        q1, r1 = qr_split(a, (0,))
        q2, r2 = qr_split(a.copy(), (0,))
        assert np.array_equal(q1, q2) and np.array_equal(r1, r2)
        assert np.all(np.diagonal(r1).real >= 0)
        assert np.allclose(np.diagonal(r1).imag, 0.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5),
           st.integers(0, 2 ** 31 - 1))
    def test_qr_then_contract_roundtrips(self, a_dim, b_dim, c_dim, seed):
        rng = np.random.default_rng(seed)
        t = random_tensor(rng, (a_dim, b_dim, c_dim))
        q, r = qr_split(t, (0, 1))
        back = np.tensordot(q, r, axes=([2], [0]))
        assert np.allclose(back, t, atol=1e-10)


class TestIsometryDefect:
    def test_identity_has_zero_defect(self):
        assert isometry_defect(np.eye(4).reshape(4, 2, 2), (1, 2)) < 1e-14

    def test_scaled_identity_has_positive_defect(self):
        d = isometry_defect(2.0 * np.eye(3), (1,))
        assert np.isclose(d, np.linalg.norm(4 * np.eye(3) - np.eye(3)))

    def test_empty_out_axes_measures_norm(self, rng):
        v = random_tensor(rng, (4,))
        v = v / np.linalg.norm(v)
        assert isometry_defect(v, ()) < 1e-12
