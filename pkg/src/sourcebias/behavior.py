"""Behavioral and welfare consequences of a long-run misperception.

Predictors are best linear predictors of the state given the signals; welfare
is the negative mean squared prediction error. The portfolio section solves a
mean-variance allocation with a budget constraint taken as binding.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import linalg, rng
from .errors import InternalConsistencyError, InvalidPortfolio
from .klsolver import KlSolution
from .scenario import Scenario, SignalModel, build_signal_model

# Analytic identities (welfare gap, decomposition) must agree to this tolerance.
IDENTITY_TOL = 1e-10


def blp(sm: SignalModel, bias_belief, sigma=None):
    """Best linear predictor of the state under a belief about the biases.

    Parameters
    ----------
    sm : SignalModel
        Supplies the state/signal covariance and the design mapping bias
        parameters to signal means.
    bias_belief : array_like
        Believed bias parameters, either ``N*K`` source coordinates or the
        full parameter vector (with a latent entry in latent-factor mode).
    sigma : array_like, optional
        Believed signal covariance; defaults to the true one.

    Returns
    -------
    coeffs, intercept
        ``BLP(X) = coeffs @ X + intercept``. For a scalar state ``coeffs`` is a
        vector and ``intercept`` a float; otherwise ``(K, N*K)`` and ``(K,)``.
    """
    if sigma is None:
        sigma = sm.sigma_star
    sigma = np.asarray(sigma, dtype=float)
    linalg.require_spd(sigma, "signal covariance")
    c = np.asarray(sm.state_signal_cov)
    weights = linalg.cholesky_solve(sigma, c.T).T
    belief = np.asarray(bias_belief, dtype=float).reshape(-1)
    mean = sm.design @ belief if belief.size == sm.design.shape[1] else belief
    intercept = -weights @ mean
    if weights.shape[0] == 1:
        return weights[0], float(intercept[0])
    return weights, intercept


def _predictor_mse(sm: SignalModel, weights, shift) -> float:
    """``E|w (X - b*) - w shift - omega|^2`` under the truth, summed over state coordinates."""
    w = np.atleast_2d(weights)
    sigma = np.asarray(sm.sigma_star)
    c = np.asarray(sm.state_signal_cov)
    bias = w @ shift
    var = np.trace(w @ sigma @ w.T) - 2.0 * np.trace(w @ c.T) + np.trace(np.asarray(sm.state_cov))
    return float(var + bias @ bias)


@dataclass(frozen=True, eq=False)
class BehaviorReport:
    blp_star_coeffs: np.ndarray
    blp_star_intercept: float | np.ndarray
    blp_hat_coeffs: np.ndarray
    blp_hat_intercept: float | np.ndarray
    distortion: float | np.ndarray
    eu_star: float
    eu_hat: float
    decomposition: dict | None = None
    extras: dict = field(default_factory=dict)

    @property
    def eu_gap(self) -> float:
        return self.eu_hat - self.eu_star

    def rows(self):
        dist = np.atleast_1d(self.distortion)
        out = []
        if dist.size == 1:
            out.append(("blp_distortion", float(dist[0]), None))
        else:
            out.extend((f"blp_distortion_{k + 1}", float(d), None) for k, d in enumerate(dist))
        out += [("eu_star", self.eu_star, None), ("eu_hat", self.eu_hat, None), ("eu_gap", self.eu_gap, None)]
        if self.decomposition is not None:
            d = self.decomposition
            out += [
                ("term_I", d["term_I"], None),
                ("term_II_mean", d["term_II_mean"], d["term_II_se"]),
                ("term_III", d["term_III"], None),
            ]
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def rows_to_csv(rows) -> str:
    """``quantity,value,stderr`` CSV; an empty stderr cell means the value is exact."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "value", "stderr"])
    for name, value, se in rows:
        w.writerow([name, format(value, ".17g"), "" if se is None else format(se, ".17g")])
    return buf.getvalue()


def _perceived(s: Scenario, sm: SignalModel, sol: KlSolution):
    """Believed parameter vector and believed covariance in the long run."""
    truth = np.zeros(sm.design.shape[1])
    truth[: s.true_bias.size] = s.true_bias.reshape(-1)
    belief = truth + sol.delta.parameter_vector(sm)
    sigma = sm.sigma_star if sol.sigma_hat is None else sol.sigma_hat
    return truth, belief, sigma


def welfare_gap(s: Scenario, sol: KlSolution, sm: SignalModel | None = None) -> BehaviorReport:
    """Predictors and expected utilities under the truth and under the limiting belief.

    Expected utilities are evaluated exactly from second moments, then
    checked against the closed forms ``-metric**2`` (known covariance) and
    ``-delta_factor * metric**2`` (learned covariance).
    """
    sm = sm or build_signal_model(s)
    truth, belief, sigma_hat = _perceived(s, sm, sol)
    w_star, b_star = blp(sm, truth)
    w_hat, b_hat = blp(sm, belief, sigma_hat)
    shift = sm.design @ (belief - truth)
    eu_star = -_predictor_mse(sm, w_star, np.zeros(sm.dim))
    eu_hat = -_predictor_mse(sm, w_hat, shift)
    metric = sol.delta.metric
    extras = {}
    if sol.sigma_hat is None:
        distortion = sol.blp_distortion
        expected_gap = -float(distortion @ distortion)
    else:
        distortion = np.atleast_1d(-sol.delta_factor * metric)
        expected_gap = -float(sol.delta_factor * metric @ metric)
    gap = eu_hat - eu_star
    if abs(gap - expected_gap) > IDENTITY_TOL * max(1.0, abs(expected_gap)):
        raise InternalConsistencyError(f"welfare gap {gap!r} differs from closed form {expected_gap!r}")
    if s.mode in ("baseline", "learn_covariance"):
        extras["eu_star_closed_form"] = -1.0 / (1.0 + float(np.sum(s.precision)))
    extras["eu_gap_closed_form"] = expected_gap
    if distortion.size == 1:
        distortion = float(distortion[0])
    return BehaviorReport(w_star, b_star, w_hat, b_hat, distortion, eu_star, eu_hat, extras=extras)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def _true_draws(s: Scenario, sm: SignalModel, seed: int, n_draws: int, sign: float = 1.0):
    """States and centred signals ``X - b*`` drawn from the truth (keyed welfare stream)."""
    n, k = s.n_sources, s.state_dim
    width = k + n * k + 1
    z = sign * rng.standard_normals(seed, rng.WELFARE, 0, n_draws, width)
    omega = z[:, :k] @ np.linalg.cholesky(np.asarray(sm.state_cov)).T
    if s.mode == "multidim":
        noise = np.empty((n_draws, n * k))
        for i, cov in enumerate(s.error_covs):
            sl = slice(i * k, (i + 1) * k)
            noise[:, sl] = z[:, k + i * k:k + (i + 1) * k] @ np.linalg.cholesky(np.asarray(cov)).T
    else:
        noise = z[:, k:k + n] * np.sqrt(s.noise_variance)
    x = omega @ np.asarray(sm.state_signal_cov) + noise
    if s.shock_loadings is not None:
        x = x + z[:, -1:] * s.shock_loadings
    return omega, x


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    return float(np.mean(values)), float(np.std(values, ddof=1) / np.sqrt(values.size))


def _predictions(s, sm, sol, omega, x):
    truth, belief, sigma_hat = _perceived(s, sm, sol)
    w_star, _ = blp(sm, truth)
    w_hat, _ = blp(sm, belief, sigma_hat)
    shift = sm.design @ (belief - truth)
    p_star = x @ np.atleast_2d(w_star).T
    p_hat = (x - shift) @ np.atleast_2d(w_hat).T
    return p_star, p_hat


def monte_carlo_eu_gap(s: Scenario, sol: KlSolution, seed: int, n_draws: int, *, antithetic: bool = True):
    """Monte Carlo estimate of ``EU_hat - EU*`` and its standard error.

    With ``antithetic`` each draw is paired with its negation and the pair
    averages are treated as the i.i.d. sample. In the known-covariance modes
    the per-pair difference is then exactly constant, so the standard error
    is zero up to rounding.
    """
    sm = build_signal_model(s)

    def per_draw(sign):
        omega, x = _true_draws(s, sm, seed, n_draws, sign)
        p_star, p_hat = _predictions(s, sm, sol, omega, x)
        return np.sum((p_star - omega) ** 2, axis=1) - np.sum((p_hat - omega) ** 2, axis=1)

    d = per_draw(1.0)
    if antithetic:
        d = 0.5 * (d + per_draw(-1.0))
    return _mean_se(d)


def monte_carlo_cross_terms(s: Scenario, sol: KlSolution, seed: int, n_draws: int) -> dict:
    """Plain Monte Carlo estimates of ``G = E[(BLP_hat - BLP*)^2]`` and ``H = E[(omega - BLP*)(BLP_hat - BLP*)]``."""
    sm = build_signal_model(s)
    omega, x = _true_draws(s, sm, seed, n_draws)
    p_star, p_hat = _predictions(s, sm, sol, omega, x)
    diff = p_hat - p_star
    g, g_se = _mean_se(np.sum(diff**2, axis=1))
    h, h_se = _mean_se(np.sum((omega - p_star) * diff, axis=1))
    return {"G": g, "G_se": g_se, "H": h, "H_se": h_se}


def decompose_distortion(s: Scenario, sol: KlSolution, seed: int, n_draws: int) -> dict:
    """Split the learned-covariance predictor distortion into its three parts.

    ``term_I`` (bias learning) and ``term_III`` (compound effect) are exact;
    the zero-mean ``term_II`` (covariance learning) is estimated by plain
    Monte Carlo under the truth. ``term_II_within_4se`` records whether the
    estimate is within four standard errors of zero; it is reported rather
    than raised so a run is never lost to an unlucky seed.
    """
    if s.mode != "learn_covariance":
        raise ValueError("decomposition applies to the learned-covariance mode only")
    sm = build_signal_model(s)
    d = sol.delta.full
    ones = np.ones(sm.dim)
    sig_inv = np.asarray(sm.sigma_star_inv)
    hat_inv = linalg.cholesky_solve(np.asarray(sol.sigma_hat), np.eye(sm.dim))
    diff_inv = hat_inv - sig_inv
    term_1 = -float(ones @ sig_inv @ d)
    term_3 = -float(ones @ diff_inv @ d)
    expected_3 = -(1.0 - sol.delta_factor) * term_1
    if abs(term_3 - expected_3) > IDENTITY_TOL * max(1.0, abs(term_1)):
        raise InternalConsistencyError(f"compound term {term_3!r} differs from {expected_3!r}")
    if np.any(d) and n_draws > 1:
        _, x = _true_draws(s, sm, seed, n_draws)
        term_2, se = _mean_se(x @ (diff_inv @ ones))
    else:
        term_2, se = 0.0, 0.0
    return {
        "term_I": term_1,
        "term_II_mean": term_2,
        "term_II_se": se,
        "term_III": term_3,
        "total_mean": term_1 + term_3,
        "term_II_within_4se": bool(abs(term_2) <= 4.0 * se + 1e-12),
    }


# ---------------------------------------------------------------------------
# Portfolio
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PortfolioScenario:
    """Projects with predictor precisions ``eta``; project 1 (index 0) carries the misperception."""

    eta: np.ndarray
    risk_aversion: float
    wealth: float
    mu_star: np.ndarray
    metric: float

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float).reshape(-1)
        mu = np.array(self.mu_star, dtype=float).reshape(-1)
        issues = []
        if eta.size < 1:
            issues.append(("BAD_SHAPE", "need at least one project"))
        if mu.size != eta.size:
            issues.append(("BAD_SHAPE", "mu_star and eta lengths differ"))
        if not np.all(np.isfinite(eta)) or np.any(eta <= 0):
            issues.append(("NONPOSITIVE_ETA", "eta must be positive"))
        if not np.isfinite(self.risk_aversion) or self.risk_aversion <= 0:
            issues.append(("NONPOSITIVE_RISK_AVERSION", "risk_aversion must be positive"))
        if not np.isfinite(self.wealth) or self.wealth <= 0:
            issues.append(("NONPOSITIVE_WEALTH", "wealth must be positive"))
        if not np.all(np.isfinite(mu)) or not np.isfinite(self.metric):
            issues.append(("BAD_VALUE", "non-finite mu_star or metric"))
        if issues:
            raise InvalidPortfolio(issues)
        eta.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "mu_star", mu)
        object.__setattr__(self, "risk_aversion", float(self.risk_aversion))
        object.__setattr__(self, "wealth", float(self.wealth))
        object.__setattr__(self, "metric", float(self.metric))

    @property
    def n_projects(self) -> int:
        return self.eta.size

    @property
    def mu_hat(self) -> np.ndarray:
        mu = self.mu_star.copy()
        mu[0] -= self.metric
        return mu

    @classmethod
    def from_dict(cls, raw: dict) -> "PortfolioScenario":
        allowed = {"eta", "risk_aversion", "wealth", "mu_star", "metric", "n_projects"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise InvalidPortfolio([("UNKNOWN_KEY", f"unknown keys: {unknown}")])
        missing = sorted({"eta", "risk_aversion", "wealth", "mu_star", "metric"} - set(raw))
        if missing:
            raise InvalidPortfolio([("MISSING_KEY", f"missing keys: {missing}")])
        if "n_projects" in raw and raw["n_projects"] != len(raw["eta"]):
            raise InvalidPortfolio([("BAD_SHAPE", "n_projects does not match eta")])
        try:
            return cls(raw["eta"], raw["risk_aversion"], raw["wealth"], raw["mu_star"], raw["metric"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidPortfolio):
                raise
            raise InvalidPortfolio([("BAD_TYPE", str(exc))]) from exc


@dataclass(frozen=True, eq=False)
class PortfolioReport:
    alpha_star: np.ndarray
    alpha_hat: np.ndarray
    delta_alpha: np.ndarray
    eu_gap: float
    budget_binding: bool

    def rows(self):
        out = [(f"alpha_star_{k + 1}", float(a), None) for k, a in enumerate(self.alpha_star)]
        out += [(f"alpha_hat_{k + 1}", float(a), None) for k, a in enumerate(self.alpha_hat)]
        out += [(f"delta_alpha_{k + 1}", float(a), None) for k, a in enumerate(self.delta_alpha)]
        out.append(("eu_gap", self.eu_gap, None))
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def allocation(eta, mu, risk_aversion: float, wealth: float) -> np.ndarray:
    """Optimal allocation with the budget spent in full."""
    eta = np.asarray(eta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    level = (eta @ mu - risk_aversion * wealth) / eta.sum()
    return eta / risk_aversion * (mu - level)


def portfolio_objective(alpha, mu, eta, risk_aversion: float) -> float:
    alpha = np.asarray(alpha, dtype=float)
    return float(alpha @ mu - 0.5 * risk_aversion * np.sum(alpha**2 / eta))


def portfolio(ps: PortfolioScenario) -> PortfolioReport:
    """Allocations under the true and misperceived predictors and the resulting utility loss.

    ``budget_binding`` is False when the unconstrained optimum would leave
    wealth unspent; the equality-constrained formulas are still reported.
    """
    eta, lam = ps.eta, ps.risk_aversion
    a_star = allocation(eta, ps.mu_star, lam, ps.wealth)
    a_hat = allocation(eta, ps.mu_hat, lam, ps.wealth)
    total = eta.sum()
    e1 = eta[0]
    delta_alpha = e1 * eta / (lam * total) * ps.metric
    delta_alpha[0] = -(e1 / lam) * (1.0 - e1 / total) * ps.metric
    gap = -(ps.metric**2 / (2.0 * lam)) * e1 * (1.0 - e1 / total)
    direct = a_hat - a_star
    if np.max(np.abs(direct - delta_alpha)) > 1e-9 * max(1.0, float(np.max(np.abs(a_star)))):
        raise InternalConsistencyError("allocation difference disagrees with its closed form")
    binding = bool(eta @ ps.mu_star >= lam * ps.wealth)
    return PortfolioReport(a_star, a_hat, delta_alpha, float(gap), binding)


def portfolio_qp_oracle(ps: PortfolioScenario, mu=None, *, binding: bool = True) -> np.ndarray:
    """Solve the allocation problem numerically (SLSQP), independent of the closed form.

    With ``binding`` the budget is an equality; otherwise the inequality
    version is solved.
    """
    mu = ps.mu_star if mu is None else np.asarray(mu, dtype=float)
    eta, lam = ps.eta, ps.risk_aversion
    kind = "eq" if binding else "ineq"
    cons = [{"type": kind, "fun": lambda a: ps.wealth - a.sum(), "jac": lambda a: -np.ones_like(a)}]
    res = optimize.minimize(
        lambda a: -portfolio_objective(a, mu, eta, lam),
        np.full(eta.size, ps.wealth / eta.size),
        jac=lambda a: -(mu - lam * a / eta),
        constraints=cons,
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": 500},
    )
    a = res.x
    # The objective is quadratic: one Newton step on the KKT system of the
    # active set removes SLSQP's residual stopping error.
    active = binding or abs(ps.wealth - a.sum()) < 1e-6
    hess = np.diag(lam / eta)
    grad = hess @ a - mu
    if active:
        k = eta.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = hess
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([-grad, [ps.wealth - a.sum()]])
        step = np.linalg.solve(kkt, rhs)[:k]
    else:
        step = np.linalg.solve(hess, -grad)
    return a + step


def single_project_precision(s: Scenario) -> float:
    """Precision of the state predictor in the baseline model, ``1 + sum(nu)``."""
    return 1.0 + float(np.sum(s.precision))
