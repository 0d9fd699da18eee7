import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sourcebias import linalg
from sourcebias.errors import NotSpd, SingularBlock, SingularUpdate, ValidationError

from conftest import random_spd


class TestSymMatrix:
    def test_symmetrizes_small_asymmetry(self):
        m = linalg.SymMatrix([[1.0, 2.0 + 1e-12], [2.0, 1.0]])
        assert m[0, 1] == m[1, 0]
        assert m.max_asymmetry == pytest.approx(1e-12, rel=1e-3)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValidationError) as exc:
            linalg.SymMatrix([[1.0, 2.0], [0.0, 1.0]])
        assert exc.value.code == "NOT_SYMMETRIC"

    def test_rejects_non_square(self):
        with pytest.raises(ValidationError):
            linalg.SymMatrix(np.ones((2, 3)))

    def test_immutable(self):
        m = linalg.SymMatrix(np.eye(2))
        with pytest.raises(ValueError):
            m.entries[0, 0] = 5.0
        with pytest.raises(AttributeError):
            m.entries = np.eye(3)

    def test_array_protocol(self):
        m = linalg.SymMatrix([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_array_equal(np.asarray(m) @ np.ones(2), [3.0, 3.0])
        np.testing.assert_array_equal(m @ np.ones(2), [3.0, 3.0])
        assert m.dim == 2


class TestShermanMorrison:
    def test_two_by_two(self):
        out = linalg.sherman_morrison_inverse(np.eye(2), [1, 1], [1, 1])
        np.testing.assert_allclose(out, np.linalg.inv([[2.0, 1.0], [1.0, 2.0]]), atol=1e-15)
        np.testing.assert_allclose(out, [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]], atol=1e-15)

    def test_zero_update(self):
        np.testing.assert_array_equal(linalg.sherman_morrison_inverse(np.eye(2), [0, 0], [3, -7]), np.eye(2))

    def test_singular(self):
        with pytest.raises(SingularUpdate):
            linalg.sherman_morrison_inverse(np.eye(1), [1.0], [-1.0])

    def test_nonsymmetric_update(self, rng):
        g = random_spd(rng, 4)
        x, y = rng.normal(size=4), rng.normal(size=4)
        out = linalg.sherman_morrison_inverse(np.linalg.inv(g), x, y)
        assert linalg.inverse_residual(g + np.outer(x, y), out) < 1e-10

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_residual_property(self, n, seed):
        r = np.random.default_rng(seed)
        g = random_spd(r, n)
        x = r.normal(size=n)
        out = linalg.sherman_morrison_inverse(np.linalg.inv(g), x, x)
        assert linalg.inverse_residual(g + np.outer(x, x), out) < 1e-10


class TestWoodbury:
    def test_rank_one_matches_sherman_morrison(self, rng):
        g = random_spd(rng, 5)
        g_inv = np.linalg.inv(g)
        x = rng.normal(size=5)
        a = linalg.woodbury_inverse(g_inv, x[:, None], np.eye(1), x[:, None])
        b = linalg.sherman_morrison_inverse(g_inv, x, x)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_kronecker_structure(self):
        u = linalg.kronecker(np.ones((2, 1)), np.eye(2))
        out = linalg.woodbury_inverse(np.eye(4), u, np.eye(2), u)
        np.testing.assert_allclose(out, np.linalg.inv(np.eye(4) + u @ u.T), atol=1e-14)

    def test_zero_columns(self):
        g_inv = np.diag([1.0, 0.5, 0.25])
        np.testing.assert_array_equal(linalg.woodbury_inverse(g_inv, np.zeros((3, 0)), np.eye(0), np.zeros((3, 0))), g_inv)

    def test_singular_capacitance(self):
        u = np.array([[1.0], [0.0]])
        with pytest.raises(SingularUpdate):
            linalg.woodbury_inverse(np.eye(2), u, -np.eye(1), u)

    def test_rank_update_object(self, rng):
        base = linalg.SymMatrix(random_spd(rng, 4))
        u = rng.normal(size=(4, 2))
        mid = linalg.SymMatrix(random_spd(rng, 2))
        ru = linalg.RankUpdate(base, u, u, mid)
        assert ru.rank == 2
        assert linalg.inverse_residual(ru.dense(), ru.inverse()) < 1e-10


class TestBlockInverse:
    def test_two_by_two(self):
        out = linalg.block_inverse([[2.0]], [[1.0]], [[1.0]], [[2.0]])
        np.testing.assert_allclose(out, np.array([[2.0, -1.0], [-1.0, 2.0]]) / 3, atol=1e-15)

    def test_decoupled(self, rng):
        a, d = random_spd(rng, 2), random_spd(rng, 3)
        out = linalg.block_inverse(a, np.zeros((2, 3)), np.zeros((3, 2)), d)
        np.testing.assert_allclose(out[:2, :2], np.linalg.inv(a), atol=1e-12)
        np.testing.assert_allclose(out[2:, 2:], np.linalg.inv(d), atol=1e-12)
        np.testing.assert_array_equal(out[:2, 2:], 0.0)

    def test_singular_schur(self):
        with pytest.raises(SingularBlock):
            linalg.block_inverse([[1.0]], [[1.0]], [[1.0]], [[1.0]])

    @settings(max_examples=500, deadline=None)
    @given(st.integers(2, 10), st.integers(0, 2**32 - 1))
    def test_matches_dense(self, n, seed):
        r = np.random.default_rng(seed)
        m = random_spd(r, n)
        k = int(r.integers(1, n))
        out = linalg.block_inverse(m[:k, :k], m[:k, k:], m[k:, :k], m[k:, k:])
        np.testing.assert_allclose(out, np.linalg.inv(m), atol=1e-10)
        assert linalg.inverse_residual(m, out) < 1e-10


class TestSpdCheck:
    def test_identity(self):
        assert linalg.spd_check(np.eye(3)) == (True, pytest.approx(1.0), pytest.approx(1.0))

    def test_baseline_covariance(self):
        ok, lo, hi = linalg.spd_check(np.eye(2) + 1.0)
        assert ok
        assert (lo, hi) == (pytest.approx(1.0), pytest.approx(3.0))

    def test_indefinite(self):
        ok, lo, hi = linalg.spd_check([[1.0, 2.0], [2.0, 1.0]])
        assert not ok
        assert (lo, hi) == (pytest.approx(-1.0), pytest.approx(3.0))

    def test_require_spd(self):
        with pytest.raises(NotSpd):
            linalg.require_spd(np.diag([1.0, 0.0]))


class TestWeyl:
    def test_identity_axis(self):
        assert linalg.weyl_bounds_check(np.eye(2), [1.0, 0.0])

    def test_zero_vector(self):
        assert linalg.weyl_bounds_check(np.diag([3.0, 1.0, -2.0]), np.zeros(3))

    def test_report_fields(self):
        rep = linalg.weyl_report(np.diag([2.0, 1.0]), [1.0, 1.0])
        assert rep["lower_chain"] and rep["upper_chain"]
        assert rep["lambda2_bound"] in (True, False)
        assert linalg.weyl_report(np.eye(1), [1.0])["lambda2_bound"] is None

    def test_lambda2_variant_can_fail(self):
        # lambda_1(G + xx') = 2 exceeds lambda_2(G) + x'x = 1 when x aligns with the top eigenvector
        rep = linalg.weyl_report(np.diag([1.0, 0.0]), [1.0, 0.0])
        assert rep["lambda2_bound"] is False
        assert rep["upper_chain"]

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_symmetric(self, seed):
        r = np.random.default_rng(seed)
        a = r.normal(size=(6, 6))
        assert linalg.weyl_bounds_check(a + a.T, r.normal(size=6))


class TestKronecker:
    def test_identity(self):
        np.testing.assert_array_equal(linalg.kronecker(np.eye(2), np.eye(2)), np.eye(4))

    def test_ones_identity(self):
        out = linalg.kronecker(np.ones((2, 2)), np.eye(2))
        np.testing.assert_array_equal(out, np.block([[np.eye(2), np.eye(2)], [np.eye(2), np.eye(2)]]))

    def test_common_state_block(self, rng):
        omega0 = random_spd(rng, 2)
        u = linalg.kronecker(np.ones((2, 1)), np.eye(2))
        expected = np.zeros((4, 4))
        for i in range(2):
            for j in range(2):
                expected[2 * i:2 * i + 2, 2 * j:2 * j + 2] = omega0
        np.testing.assert_allclose(u @ omega0 @ u.T, expected, atol=1e-15)


class TestDeterminants:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_determinant_lemma(self, n, seed):
        r = np.random.default_rng(seed)
        g = random_spd(r, n)
        x = r.normal(size=n)
        lhs = linalg.cholesky_logdet(g + np.outer(x, x))
        rhs = linalg.cholesky_logdet(g) + np.log1p(x @ np.linalg.solve(g, x))
        assert abs(np.expm1(lhs - rhs)) < 1e-10

    def test_cholesky_logdet_rejects_indefinite(self):
        with pytest.raises(NotSpd):
            linalg.cholesky_logdet([[1.0, 2.0], [2.0, 1.0]])
