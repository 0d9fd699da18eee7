import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sourcebias import klsolver, linalg
from sourcebias.errors import BudgetExceeded
from sourcebias.scenario import MODES, Scenario, build_signal_model, random_scenario

from conftest import baseline


def correlated_metric(v, rho, da, db):
    den = (1 + (1 - rho) * v) * (1 + v + rho * v)
    return np.array([(1 + v) * da - rho * v * db, -rho * v * da + (1 + v) * db]) / den


class TestKlDivergence:
    def test_identical(self):
        sig = np.array([[2.0, 1.0], [1.0, 2.0]])
        assert klsolver.kl_divergence(np.ones(2), sig, np.ones(2), sig) == 0.0

    def test_mean_shift(self):
        sig = np.array([[2.0, 1.0], [1.0, 2.0]])
        assert klsolver.kl_divergence([1.0, 0.0], sig, [0.0, 0.0], sig) == pytest.approx(1 / 3, abs=1e-15)

    def test_scalar_variance(self):
        out = klsolver.kl_divergence([0.0], [[2.0]], [0.0], [[1.0]])
        assert out == pytest.approx(0.5 * (0.5 - 1 + np.log(2.0)), abs=1e-15)
        assert out == pytest.approx(0.0966, abs=1e-4)


class TestGeneralSolver:
    def test_two_sources(self):
        sm = build_signal_model(baseline())
        delta, distortion = klsolver.solve_general(sm, [1.0])
        np.testing.assert_allclose(delta.learned_part, [0.5], atol=1e-15)
        np.testing.assert_allclose(distortion, [-0.5], atol=1e-15)

    def test_zero(self):
        sm = build_signal_model(baseline(n=4, m=(0, 1), dt=(1.0, 2.0)))
        delta, distortion = klsolver.solve_general(sm, [0.0, 0.0])
        np.testing.assert_array_equal(delta.full, 0.0)
        np.testing.assert_array_equal(distortion, 0.0)

    def test_shock_fixture(self, shock_fixture):
        delta, _ = klsolver.solve_general(build_signal_model(shock_fixture), shock_fixture.delta_tilde)
        np.testing.assert_allclose(delta.learned_part, [4 / 7, 1 / 7], atol=1e-12)


class TestBaseline:
    @pytest.mark.parametrize(
        "v, dt, expected",
        [((1.0, 1.0, 1.0), (-1.0, 1.0), 0.0), ((1.0, 1.0), (1.0,), 0.5), ((0.5, 1.0, 1.0), (1.0, 1.0), 0.75)],
    )
    def test_golden(self, v, dt, expected):
        n = len(v)
        s = baseline(n=n, m=tuple(range(len(dt))), dt=dt, v=v)
        sol = klsolver.solve_baseline(s)
        assert abs(sol.delta.metric_value - expected) < 1e-12
        np.testing.assert_allclose(sol.delta.learned_part, expected, atol=1e-12)
        np.testing.assert_allclose(sol.blp_distortion, [-expected], atol=1e-12)

    def test_weights(self):
        s = baseline(n=4, m=(0, 1), dt=(1.0, 1.0), v=(0.5, 1.0, 1.0, 1.0))
        np.testing.assert_allclose(klsolver.solve(s).extras["gamma"], [0.5, 0.25], atol=1e-15)

    def test_familiar_part_exact(self, rng):
        s = random_scenario("baseline", rng)
        sol = klsolver.solve(s)
        np.testing.assert_array_equal(sol.delta.familiar_part, s.perceived_bias - s.true_bias[list(s.misspecified)])

    def test_grid_oracle(self):
        s = baseline(n=3, m=(0, 1), dt=(1.0, 1.0), v=(0.5, 1.0, 1.0))
        sm = build_signal_model(s)
        grid = klsolver.brute_force_oracle(sm, s.delta_tilde, "grid")
        np.testing.assert_allclose(grid.learned_part, [0.75], atol=1e-6)


class TestLoadings:
    def test_golden(self):
        s = baseline(n=2, loadings=np.array([2.0, 3.0]))
        sol = klsolver.solve(s)
        assert sol.delta.metric_value == pytest.approx(2 / 5, abs=1e-14)
        np.testing.assert_allclose(sol.delta.learned_part, [6 / 5], atol=1e-14)

    def test_unit_loadings_reduce_to_baseline(self, rng):
        s = random_scenario("baseline", rng)
        loaded = s.replace(loadings=np.ones(s.n_sources))
        np.testing.assert_allclose(klsolver.solve(loaded).delta.full, klsolver.solve(s).delta.full, atol=1e-15)

    def test_zero(self):
        with pytest.warns(UserWarning):
            s = baseline(n=3, dt=(0.0,), loadings=np.array([2.0, 3.0, 1.0]))
        np.testing.assert_array_equal(klsolver.solve(s).delta.full, 0.0)


class TestShock:
    def test_golden(self, shock_fixture):
        sol = klsolver.solve(shock_fixture)
        assert (sol.extras["P"], sol.extras["Q"], sol.extras["R"]) == (3.0, 1.0, 7.0)
        assert abs(sol.delta.full[3] - 4 / 7) < 1e-12
        assert abs(sol.delta.full[4] - 1 / 7) < 1e-12
        assert sol.delta.metric_value == pytest.approx(1 / 7, abs=1e-15)

    def test_zero_shock_reduces_to_baseline(self, rng):
        s = random_scenario("baseline", rng)
        shocked = s.replace(shock_loadings=np.zeros(s.n_sources))
        np.testing.assert_allclose(klsolver.solve(shocked).delta.full, klsolver.solve(s).delta.full, atol=1e-14)

    def test_wdoom_on_fixture(self, shock_fixture):
        beta = shock_fixture.shock_loadings.copy()
        beta[4] = -2.5
        a = klsolver.solve(shock_fixture).delta.full
        b = klsolver.solve(shock_fixture.replace(shock_loadings=beta)).delta.full
        assert b[3] == pytest.approx(a[3], abs=1e-14)
        assert abs(b[4] - a[4]) > 0.1


class TestLatent:
    def test_golden(self):
        s = baseline(n=3, m=(0, 1), dt=(1.0, 0.0), latent_factor=True)
        sol = klsolver.solve(s)
        assert sol.delta.metric_value == pytest.approx(0.5, abs=1e-14)
        assert sol.delta.latent_component == pytest.approx(-0.5, abs=1e-14)
        np.testing.assert_allclose(sol.delta.learned_part, [0.5], atol=1e-14)

    def test_predictor_unaffected(self, rng):
        sol = klsolver.solve(random_scenario("latent", rng))
        np.testing.assert_allclose(sol.blp_distortion, 0.0, atol=1e-12)

    def test_single_source_collapse(self, rng):
        v = rng.uniform(0.2, 4.0, 3)
        s = baseline(n=3, dt=(1.7,), v=v, latent_factor=True)
        assert klsolver.solve(s).delta.metric_value == pytest.approx(1.7, abs=1e-14)


class TestMultidim:
    def test_correlated_golden(self, corr_fixture):
        sol = klsolver.solve(corr_fixture)
        np.testing.assert_allclose(sol.delta.metric, [2 / 3, -2 / 3], atol=1e-12)
        np.testing.assert_allclose(sol.delta.metric, correlated_metric(1.0, 0.5, 1.0, -1.0), atol=1e-14)

    def test_uncorrelated_errors_decouple(self, corr_fixture):
        s = corr_fixture.replace(error_covs=[np.eye(2), np.eye(2)])
        np.testing.assert_allclose(klsolver.solve(s).delta.metric, [0.5, -0.5], atol=1e-14)

    @pytest.mark.parametrize("v, rho", [(1.0, 0.2), (2.0, 0.7), (0.5, -0.4)])
    def test_correlated_formula(self, corr_fixture, v, rho):
        cov = v * np.array([[1.0, rho], [rho, 1.0]])
        s = corr_fixture.replace(error_covs=[cov, np.eye(2)], perceived_bias=np.array([[0.8, -0.3]]))
        np.testing.assert_allclose(klsolver.solve(s).delta.metric, correlated_metric(v, rho, 0.8, -0.3), atol=1e-13)

    def test_scalar_state_reduces_to_baseline(self, rng):
        s = random_scenario("baseline", rng)
        covs = [np.array([[vi]]) for vi in s.noise_variance]
        md = s.replace(error_covs=covs, state_cov=np.eye(1))
        assert md.mode == "multidim"
        np.testing.assert_allclose(klsolver.solve(md).delta.full, klsolver.solve(s).delta.full, atol=1e-14)


class TestLearnCovariance:
    def test_golden(self):
        s = baseline(learn_covariance=True)
        sol = klsolver.solve(s)
        sig = np.array([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(sol.delta.full, [1.0, 0.5], atol=1e-15)
        assert abs(sol.delta_factor - 2 / 3) < 1e-12
        assert sol.extras["quad_form_shortcut"] == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_allclose(np.asarray(sol.sigma_hat), sig + np.outer([1, 0.5], [1, 0.5]), atol=1e-12)
        assert np.linalg.det(np.asarray(sol.sigma_hat)) == pytest.approx(4.5, abs=1e-10)
        assert np.linalg.det(sig) * (1 + 0.5) == pytest.approx(4.5, abs=1e-12)

    def test_degenerate(self):
        with pytest.warns(UserWarning):
            s = baseline(dt=(0.0,), learn_covariance=True)
        sol = klsolver.solve(s)
        assert sol.degenerate
        assert sol.delta_factor == 1.0
        assert sol.kl_at_solution == 0.0

    def test_factor_tends_to_one(self):
        out = []
        for scale in (1.0, 0.1, 0.01):
            out.append(klsolver.solve(baseline(n=3, m=(0, 1), dt=(scale, -2 * scale), learn_covariance=True)).delta_factor)
        assert all(0.0 < f < 1.0 for f in out)
        assert out[0] < out[1] < out[2]
        assert 1.0 - out[2] < 1e-3

    def test_matches_joint_oracle(self):
        # minimizing over biases and an unrestricted covariance lands on Sigma* + dd'
        for seed in range(5):
            s = random_scenario("learn_covariance", np.random.default_rng(seed), n_range=(2, 4))
            sm = build_signal_model(s)
            sol = klsolver.solve(s)
            learned, sigma = klsolver.brute_force_joint_oracle(sm, s.delta_tilde)
            np.testing.assert_allclose(learned, sol.delta.learned_part, atol=1e-5)
            np.testing.assert_allclose(sigma, np.asarray(sol.sigma_hat), atol=1e-5)

    def test_invariants(self, rng):
        for _ in range(50):
            s = random_scenario("learn_covariance", rng)
            sol = klsolver.solve(s)
            sm = build_signal_model(s)
            d = sol.delta.full
            assert sol.delta_factor == pytest.approx(1 / (1 + d @ np.linalg.solve(np.asarray(sm.sigma_star), d)), abs=1e-12)
            assert 0 < sol.delta_factor < 1
            np.testing.assert_allclose(np.asarray(sol.sigma_hat), np.asarray(sm.sigma_star) + np.outer(d, d), atol=1e-12)


class TestOracles:
    @pytest.mark.parametrize("mode", MODES)
    def test_three_routes_agree(self, mode):
        g = np.random.default_rng(MODES.index(mode))
        for _ in range(40):
            s = random_scenario(mode, g)
            sm = build_signal_model(s)
            closed = klsolver.solve(s, sm).delta
            general, _ = klsolver.solve_general(sm, s.delta_tilde)
            descent = klsolver.brute_force_oracle(sm, s.delta_tilde)
            np.testing.assert_allclose(general.full, closed.full, atol=1e-8)
            np.testing.assert_allclose(descent.full, closed.full, atol=1e-8)
            np.testing.assert_allclose(descent.metric, closed.metric, atol=1e-8)

    @pytest.mark.parametrize("mode", MODES)
    def test_first_order_conditions(self, mode):
        g = np.random.default_rng(100 + MODES.index(mode))
        for _ in range(30):
            s = random_scenario(mode, g)
            sm = build_signal_model(s)
            assert klsolver.foc_residual(sm, klsolver.solve(s, sm).delta) < 1e-9

    @pytest.mark.parametrize("mode", ["baseline", "latent", "multidim", "learn_covariance"])
    def test_learned_part_uniform(self, mode):
        g = np.random.default_rng(7)
        for _ in range(30):
            s = random_scenario(mode, g)
            d = klsolver.solve(s).delta
            rows = d.learned_part.reshape(-1, s.state_dim)
            assert np.max(np.abs(rows - d.metric)) < 1e-10

    def test_grid_matches_descent(self):
        g = np.random.default_rng(3)
        for mode in ("baseline", "loadings", "shock"):
            s = random_scenario(mode, g, n_range=(2, 4))
            sm = build_signal_model(s)
            grid = klsolver.brute_force_oracle(sm, s.delta_tilde, "grid")
            np.testing.assert_allclose(grid.full, klsolver.solve(s).delta.full, atol=1e-6)

    def test_grid_budget(self):
        s = baseline(n=13, v=np.ones(13))
        with pytest.raises(BudgetExceeded):
            klsolver.brute_force_oracle(build_signal_model(s), s.delta_tilde, "grid")

    def test_zero_misspecification(self):
        with pytest.warns(UserWarning):
            s = baseline(n=3, dt=(0.0,))
        sm = build_signal_model(s)
        for method in ("descent", "grid"):
            np.testing.assert_array_equal(klsolver.brute_force_oracle(sm, [0.0], method).full, 0.0)

    def test_restarts_agree(self, rng):
        s = random_scenario("shock", rng)
        sm = build_signal_model(s)
        a = klsolver.brute_force_oracle(sm, s.delta_tilde, x0=rng.normal(size=sm.free.size) * 10)
        b = klsolver.brute_force_oracle(sm, s.delta_tilde, x0=rng.normal(size=sm.free.size) * 10)
        np.testing.assert_allclose(a.full, b.full, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["baseline", "loadings", "shock", "latent", "multidim"]), st.integers(0, 2**32 - 1))
    def test_kl_minimal_among_feasible(self, mode, seed):
        r = np.random.default_rng(seed)
        s = random_scenario(mode, r)
        sm = build_signal_model(s)
        sol = klsolver.solve(s, sm)
        base = sol.delta.parameter_vector(sm)
        zero = np.zeros(sm.dim)
        for _ in range(1000 // 30 + 1):
            trial = base.copy()
            trial[sm.free] += r.normal(size=sm.free.size)
            kl = klsolver.kl_divergence(sm.design @ trial, sm.sigma_star, zero, sm.sigma_star)
            assert kl >= sol.kl_at_solution - 1e-12

    def test_kl_nonnegative_and_zero_only_at_truth(self, rng):
        sol = klsolver.solve(random_scenario("baseline", rng))
        assert sol.kl_at_solution > 0
