"""Limiting beliefs: the KL-minimizing bias misperception for every model variant.

Three independent routes compute the same object:

* closed forms (``solve_baseline``, ``solve_loadings``, ...), built from
  rank-one and rank-K inverse identities;
* :func:`solve_general`, the first-order-condition linear system on the
  block views of the covariance;
* :func:`brute_force_oracle`, direct numerical minimization of the quadratic
  objective using only a Cholesky factorization of the dense covariance.

Closed forms check themselves against :func:`solve_general` at runtime.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import optimize

from . import linalg
from .errors import BudgetExceeded, InternalConsistencyError, SingularBlock
from .scenario import Scenario, SignalModel, build_signal_model

# Runtime self-check of closed forms against the linear-system route.
CROSSCHECK_MAX_DIM = 50
CROSSCHECK_TOL = 1e-8
GRID_MAX_DIM = 12
GRID_FINAL_STEP = 1e-6
GRID_MAX_POINTS = 200_000
CG_GRAD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Delta:
    """Long-run misperception ``b_hat - b*``.

    ``full`` covers all ``N*K`` source-bias coordinates (source-major).
    ``familiar_part`` and ``learned_part`` are its restrictions to the
    misspecified and unfamiliar sources. ``metric`` is the K-vector
    aggregate; ``latent_component`` is set only in latent-factor mode.
    """

    full: np.ndarray
    familiar_part: np.ndarray
    learned_part: np.ndarray
    metric: np.ndarray
    latent_component: float | None = None

    @property
    def metric_value(self) -> float:
        """The metric as a float (single-dimensional state only)."""
        if self.metric.size != 1:
            raise ValueError("metric is a vector; use .metric")
        return float(self.metric[0])

    def parameter_vector(self, sm: SignalModel) -> np.ndarray:
        """Misperception in the bias-parameter space of ``sm`` (adds the latent entry)."""
        if sm.design.shape[1] == self.full.size:
            return self.full.copy()
        return np.concatenate([self.full, [self.latent_component]])


@dataclass(frozen=True, eq=False)
class KlSolution:
    delta: Delta
    kl_at_solution: float
    solver_path: str
    sigma_hat: linalg.SymMatrix | None = None
    delta_factor: float | None = None
    degenerate: bool = False
    blp_distortion: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _make_delta(sm: SignalModel, delta_tilde, learned, metric, latent=None) -> Delta:
    full = np.zeros(sm.dim)
    familiar = np.asarray(delta_tilde, dtype=float).reshape(-1)
    learned = np.asarray(learned, dtype=float).reshape(-1)
    full[sm.familiar] = familiar
    full[sm.unfamiliar] = learned
    return Delta(
        full=full,
        familiar_part=familiar.copy(),
        learned_part=learned,
        metric=np.atleast_1d(np.asarray(metric, dtype=float)).reshape(-1),
        latent_component=None if latent is None else float(latent),
    )


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------

def kl_divergence(b, sigma, b_star, sigma_star) -> float:
    """KL divergence of ``N(b, sigma)`` from the truth ``N(b_star, sigma_star)``.

    Log-determinants and the inverse action use Cholesky factors; a
    non-SPD input raises :class:`~sourcebias.errors.NotSpd`.
    """
    sigma = np.asarray(sigma, dtype=float)
    sigma_star = np.asarray(sigma_star, dtype=float)
    d = np.asarray(b, dtype=float) - np.asarray(b_star, dtype=float)
    n = sigma.shape[0]
    solved = linalg.cholesky_solve(sigma, np.column_stack([sigma_star, d]))
    trace = float(np.trace(solved[:, :n]))
    quad = float(d @ solved[:, n])
    logdet = linalg.cholesky_logdet(sigma) - linalg.cholesky_logdet(sigma_star)
    return max(0.0, 0.5 * (trace - n + quad + logdet))


def _kl_known_cov(sm: SignalModel, delta: Delta) -> float:
    shift = sm.design @ delta.parameter_vector(sm)
    return kl_divergence(shift, sm.sigma_star, np.zeros(sm.dim), sm.sigma_star)


# ---------------------------------------------------------------------------
# General first-order-condition solver
# ---------------------------------------------------------------------------

def solve_general(sm: SignalModel, delta_tilde) -> tuple[Delta, np.ndarray]:
    """Solve the first-order conditions for the unfamiliar coordinates.

    With an identity design, ``learned = C A^{-1} delta_tilde`` via one linear
    solve with ``A``; the predictor shift is ``-c_M A^{-1} delta_tilde`` where
    ``c_M`` is the state/familiar-signal covariance. In latent-factor mode the
    system is ``E x = -F delta_tilde`` on the transformed quadratic form.

    Returns the misperception and the (K-vector) predictor shift.
    """
    dt = np.asarray(delta_tilde, dtype=float).reshape(-1)
    if sm.design.shape[1] == sm.dim:
        y = linalg.checked_solve(sm.block_a, dt)
        learned = sm.block_c @ y
        metric = sm.state_signal_cov[:, sm.familiar] @ y
        return _make_delta(sm, dt, learned, metric), -metric
    q = sm.quad_form
    e = q[np.ix_(sm.free, sm.free)]
    f = q[np.ix_(sm.free, sm.fixed)]
    x = linalg.checked_solve(e, -f @ dt)
    latent = x[-1]
    delta = _make_delta(sm, dt, x[:-1], -latent, latent)
    shift = sm.design @ delta.parameter_vector(sm)
    distortion = -(sm.state_signal_cov @ (np.asarray(sm.sigma_star_inv) @ shift))
    return delta, distortion


def foc_residual(sm: SignalModel, delta: Delta) -> float:
    """Largest first-order-condition violation over the free coordinates."""
    grad = sm.quad_form @ delta.parameter_vector(sm)
    return float(np.max(np.abs(grad[sm.free]))) if sm.free.size else 0.0


def _crosscheck(sm: SignalModel, delta: Delta, what: str):
    if sm.dim > CROSSCHECK_MAX_DIM:
        return
    ref, _ = solve_general(sm, delta.familiar_part)
    gap = max(float(np.max(np.abs(ref.full - delta.full))), float(np.max(np.abs(ref.metric - delta.metric))))
    if delta.latent_component is not None:
        gap = max(gap, abs(ref.latent_component - delta.latent_component))
    if gap > CROSSCHECK_TOL:
        raise InternalConsistencyError(f"{what}: closed form differs from the linear-system solution by {gap:.3g}")


def _require_mode(s: Scenario, *modes):
    if s.mode not in modes:
        raise ValueError(f"scenario mode is {s.mode!r}; expected one of {modes}")


def _finish(s, sm, delta, what, **kw) -> KlSolution:
    _crosscheck(sm, delta, what)
    _, distortion = solve_general(sm, delta.familiar_part)
    kl = kw.pop("kl", None)
    if kl is None:
        kl = _kl_known_cov(sm, delta)
    return KlSolution(delta=delta, kl_at_solution=kl, solver_path="closed_form", blp_distortion=distortion, **kw)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def _baseline_metric(nu_m, dt):
    gamma = nu_m / (1.0 + nu_m.sum())
    return float(gamma @ dt), gamma


def solve_baseline(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    """Relative-precision weighted aggregate, replicated on every unfamiliar source."""
    _require_mode(s, "baseline", "learn_covariance")
    sm = sm or build_signal_model(s)
    dt = s.delta_tilde
    dbar, gamma = _baseline_metric(s.precision[list(s.misspecified)], dt)
    delta = _make_delta(sm, dt, np.full(len(s.unfamiliar), dbar), dbar)
    return _finish(s, sm, delta, "baseline", extras={"gamma": gamma})


def solve_loadings(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    _require_mode(s, "loadings")
    sm = sm or build_signal_model(s)
    m = list(s.misspecified)
    nu, alpha, dt = s.precision[m], s.loadings[m], s.delta_tilde
    dbar = float(np.sum(alpha * nu * dt) / (1.0 + np.sum(alpha**2 * nu)))
    delta = _make_delta(sm, dt, s.loadings[list(s.unfamiliar)] * dbar, dbar)
    return _finish(s, sm, delta, "loadings")


def shock_pqr(s: Scenario) -> tuple[float, float, float]:
    """The three aggregates that give the unfamiliar misperceptions under a common shock."""
    m = list(s.misspecified)
    nu, beta, dt = s.precision[m], s.shock_loadings[m], s.delta_tilde
    s_nu = nu.sum()
    s_bnu = np.sum(beta * nu)
    s_b2nu = np.sum(beta**2 * nu)
    s_nud = np.sum(nu * dt)
    s_bnud = np.sum(beta * nu * dt)
    p = s_bnud * (1.0 + s_nu) - s_nud * s_bnu
    q = s_nud * (1.0 + s_b2nu) - s_bnud * s_bnu
    r = (1.0 + s_b2nu) * (1.0 + s_nu) - s_bnu * s_bnu
    return float(p), float(q), float(r)


def solve_shock(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    """Common-shock (rank-two) model: ``delta_j = (P beta_j + Q) / R`` for unfamiliar j.

    The metric is ``Q / R``, which equals ``1_M' A^{-1} delta_tilde``.
    """
    _require_mode(s, "shock")
    sm = sm or build_signal_model(s)
    p, q, r = shock_pqr(s)
    if abs(r) <= linalg.PIVOT_TOL:
        raise SingularBlock("R vanishes")
    learned = (p * s.shock_loadings[list(s.unfamiliar)] + q) / r
    delta = _make_delta(sm, s.delta_tilde, learned, q / r)
    return _finish(s, sm, delta, "shock", extras={"P": p, "Q": q, "R": r})


def solve_latent(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    """Latent common factor: aggregate without the ``1 +`` in the denominator."""
    _require_mode(s, "latent")
    sm = sm or build_signal_model(s)
    nu = s.precision[list(s.misspecified)]
    dbar = float(np.sum(nu * s.delta_tilde) / nu.sum())
    delta = _make_delta(sm, s.delta_tilde, np.full(len(s.unfamiliar), dbar), dbar, -dbar)
    return _finish(s, sm, delta, "latent")


def solve_multidim(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    """K-dimensional state: precision-matrix weighted aggregate of familiar misspecifications."""
    _require_mode(s, "multidim")
    sm = sm or build_signal_model(s)
    k = s.state_dim
    precision_sum = linalg.dense_inverse(s.state_cov)
    weighted = np.zeros(k)
    dt = s.delta_tilde.reshape(-1, k)
    for row, i in zip(dt, s.misspecified):
        omega_inv = linalg.dense_inverse(s.error_covs[i])
        precision_sum = precision_sum + omega_inv
        weighted = weighted + omega_inv @ row
    dbar = linalg.checked_solve(precision_sum, weighted)
    delta = _make_delta(sm, dt, np.tile(dbar, len(s.unfamiliar)), dbar)
    return _finish(s, sm, delta, "multidim")


def solve_learn_covariance(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    """Biases and covariance both learned.

    The misperception is the known-covariance one; the perceived covariance
    adds ``Delta Delta'``; the moderation factor is ``1 / (1 + Delta' inv(Sigma*) Delta)``,
    evaluated both densely and through the familiar-only shortcut.
    """
    _require_mode(s, "learn_covariance")
    sm = sm or build_signal_model(s)
    base = solve_baseline(s, sm)
    delta = base.delta
    d = delta.full
    sigma = np.asarray(sm.sigma_star)
    quad_dense = float(d @ linalg.cholesky_solve(sigma, d))
    m = list(s.misspecified)
    dbar = delta.metric_value
    quad_short = float(np.sum(s.precision[m] * (delta.familiar_part - dbar) * delta.familiar_part))
    if abs(quad_dense - quad_short) > 1e-12 * max(1.0, abs(quad_dense)):
        raise InternalConsistencyError(f"quadratic form mismatch: {quad_dense!r} vs {quad_short!r}")
    degenerate = not np.any(d)
    factor = 1.0 / (1.0 + quad_dense)
    sigma_hat = linalg.SymMatrix(sigma + np.outer(d, d))
    kl = kl_divergence(d, sigma_hat, np.zeros(sm.dim), sigma)
    lam_min_noise = float(np.min(s.noise_variance))
    return KlSolution(
        delta=delta,
        kl_at_solution=kl,
        solver_path="closed_form",
        sigma_hat=sigma_hat,
        delta_factor=factor,
        degenerate=degenerate,
        blp_distortion=base.blp_distortion,
        extras={
            "quad_form_dense": quad_dense,
            "quad_form_shortcut": quad_short,
            # admissible eigenvalue floors for the perceived noise covariance lie in (0, this)
            "eigen_floor_bound": min(1.0, lam_min_noise),
            "gamma": base.extras["gamma"],
        },
    )


_SOLVERS = {
    "baseline": solve_baseline,
    "loadings": solve_loadings,
    "shock": solve_shock,
    "latent": solve_latent,
    "multidim": solve_multidim,
    "learn_covariance": solve_learn_covariance,
}


def solve(s: Scenario, sm: SignalModel | None = None) -> KlSolution:
    """Dispatch to the closed form for the scenario's mode."""
    return _SOLVERS[s.mode](s, sm)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

class _Objective:
    """``0.5 * x' Q x`` over the free coordinates, with ``Q`` from a Cholesky factor of Sigma*."""

    def __init__(self, sm: SignalModel, delta_tilde):
        self.sm = sm
        factor = sla.cho_factor(np.asarray(sm.sigma_star), lower=True)
        g = np.asarray(sm.design, dtype=float)
        q = g.T @ sla.cho_solve(factor, g)
        self.q = 0.5 * (q + q.T)
        self.dt = np.asarray(delta_tilde, dtype=float).reshape(-1)
        self.q_ff = self.q[np.ix_(sm.free, sm.free)]
        self.lin = self.q[np.ix_(sm.free, sm.fixed)] @ self.dt
        self.const = 0.5 * self.dt @ self.q[np.ix_(sm.fixed, sm.fixed)] @ self.dt

    def values(self, x):
        """Objective for each row of ``x``."""
        x = np.atleast_2d(x)
        return 0.5 * np.einsum("ij,jk,ik->i", x, self.q_ff, x) + x @ self.lin + self.const

    def gradient(self, x):
        return self.q_ff @ x + self.lin


def _conjugate_gradient(obj: _Objective, x0, tol=CG_GRAD_TOL):
    n = obj.q_ff.shape[0]
    x = np.array(x0, dtype=float)
    max_iter = 10 * n
    it = 0
    while it < max_iter:
        r = -obj.gradient(x)
        if np.linalg.norm(r) <= tol:
            break
        p = r.copy()
        rr = r @ r
        for _ in range(n):
            qp = obj.q_ff @ p
            step = rr / (p @ qp)
            x = x + step * p
            r = r - step * qp
            it += 1
            rr_new = r @ r
            if np.sqrt(rr_new) <= tol or it >= max_iter:
                break
            p = r + (rr_new / rr) * p
            rr = rr_new
    return x


def _grid_search(obj: _Objective, center, half_width):
    d = center.size
    g = 9
    while g > 3 and g**d > GRID_MAX_POINTS:
        g -= 2
    if g**d > GRID_MAX_POINTS:
        raise BudgetExceeded(f"grid with {d} free coordinates exceeds {GRID_MAX_POINTS} points")
    offsets = np.linspace(-1.0, 1.0, g)
    mesh = np.stack(np.meshgrid(*([offsets] * d), indexing="ij"), axis=-1).reshape(-1, d)
    # lexicographic order of the mesh makes argmin pick the lexicographically smallest tie
    c, h = np.array(center, dtype=float), float(half_width)
    for _ in range(100_000):
        step = 2.0 * h / (g - 1)
        pts = c + h * mesh
        vals = obj.values(pts)
        best = int(np.argmin(vals))
        on_edge = np.any(np.abs(mesh[best]) == 1.0)
        c = pts[best]
        if step <= GRID_FINAL_STEP and not on_edge:
            return c
        if not on_edge:
            h *= 0.5
    raise BudgetExceeded("grid refinement did not terminate")


def brute_force_oracle(sm: SignalModel, delta_tilde, method: str = "descent", *, x0=None) -> Delta:
    """Minimize the quadratic objective directly.

    ``method="descent"`` runs conjugate gradient to gradient norm ``1e-10``
    (at most ``10 * d`` iterations). ``method="grid"`` runs an exhaustive grid
    on ``[-5 max|dt|, 5 max|dt|]`` per coordinate, recentring and halving until
    the spacing reaches ``1e-6``; it is limited to ``N*K <= 12``.
    """
    obj = _Objective(sm, delta_tilde)
    dt = obj.dt
    d = sm.free.size
    if method == "grid":
        if sm.dim > GRID_MAX_DIM:
            raise BudgetExceeded(f"grid mode supports N*K <= {GRID_MAX_DIM}, got {sm.dim}")
        scale = float(np.max(np.abs(dt))) if dt.size else 0.0
        x = np.zeros(d) if scale == 0.0 else _grid_search(obj, np.zeros(d), 5.0 * scale)
    elif method == "descent":
        x = _conjugate_gradient(obj, np.zeros(d) if x0 is None else x0)
    else:
        raise ValueError(f"unknown method {method!r}")
    latent = None
    learned = x
    if sm.design.shape[1] != sm.dim:
        learned, latent = x[:-1], x[-1]
    param = np.zeros(sm.design.shape[1])
    param[sm.fixed] = dt
    param[sm.free] = x
    metric = -latent if latent is not None else sm.state_signal_cov @ (linalg.cholesky_solve(sm.sigma_star, sm.design @ param))
    return _make_delta(sm, dt, learned, metric, latent)


def brute_force_joint_oracle(sm: SignalModel, delta_tilde, *, gtol=1e-12):
    """Minimize KL jointly over unfamiliar biases and an unrestricted SPD covariance.

    The covariance is parameterized by a Cholesky factor with log-diagonal;
    BFGS runs from the true covariance with analytic gradients. Returns
    ``(learned_part, sigma_hat)``.
    """
    sigma_star = np.asarray(sm.sigma_star)
    n = sigma_star.shape[0]
    fam, free = sm.familiar, sm.unfamiliar
    dt = np.asarray(delta_tilde, dtype=float).reshape(-1)
    tril = np.tril_indices(n)
    diag_pos = np.array([i for i, (r, c) in enumerate(zip(*tril)) if r == c])
    logdet_star = linalg.cholesky_logdet(sigma_star)

    def unpack(theta):
        b = theta[: free.size]
        vals = theta[free.size:].copy()
        vals[diag_pos] = np.exp(vals[diag_pos])
        l_factor = np.zeros((n, n))
        l_factor[tril] = vals
        return b, l_factor

    def fun(theta):
        b, l_factor = unpack(theta)
        d = np.zeros(n)
        d[fam], d[free] = dt, b
        sigma = l_factor @ l_factor.T
        s_inv = sla.cho_solve((l_factor, True), np.eye(n))
        val = 0.5 * (np.trace(s_inv @ sigma_star) - n + d @ s_inv @ d
                     + 2.0 * np.sum(np.log(np.diag(l_factor))) - logdet_star)
        grad_sigma = 0.5 * (s_inv - s_inv @ (sigma_star + np.outer(d, d)) @ s_inv)
        grad_l = (2.0 * grad_sigma @ l_factor)[tril]
        grad_l[diag_pos] *= np.diag(l_factor)
        grad_b = (s_inv @ d)[free]
        del sigma
        return val, np.concatenate([grad_b, grad_l])

    l0 = np.linalg.cholesky(sigma_star)
    theta0 = l0[tril].copy()
    theta0[diag_pos] = np.log(theta0[diag_pos])
    theta0 = np.concatenate([np.zeros(free.size), theta0])
    res = optimize.minimize(fun, theta0, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": 20_000})
    b, l_factor = unpack(res.x)
    return b, l_factor @ l_factor.T
