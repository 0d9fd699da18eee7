"""Monte Carlo simulation of sequential Bayesian updating under a dogmatic prior.

The learner knows the true covariance, fixes the misspecified biases at their
perceived values, and holds a Gaussian prior on the remaining bias parameters,
so every posterior is Gaussian and updates in closed form.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass

import numpy as np

from . import linalg, rng
from .scenario import Scenario, SignalModel, build_signal_model

DEFAULT_PRIOR_VARIANCE = 100.0


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Gaussian belief over the free bias parameters (unfamiliar sources, then latent)."""

    mean: np.ndarray
    covariance: linalg.SymMatrix

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = linalg.SymMatrix(self.covariance)
        if cov.dim != mean.size:
            raise ValueError("prior mean and covariance dimensions differ")
        # Cholesky rather than an eigenvalue ratio, so near-dogmatic priors are allowed.
        linalg.cholesky_logdet(cov)
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(np.asarray(self.covariance)))


def diffuse_prior(sm: SignalModel, variance: float = DEFAULT_PRIOR_VARIANCE) -> PriorSpec:
    d = sm.free.size
    return PriorSpec(np.zeros(d), variance * np.eye(d))


@dataclass(frozen=True, eq=False)
class SimulationTrace:
    seed: int
    periods: int
    checkpoints: list
    posterior_means: list
    posterior_covs: list
    signals_digest: int
    coord_labels: list

    @property
    def final(self) -> PriorSpec:
        return PriorSpec(self.posterior_means[-1], self.posterior_covs[-1])

    def to_csv(self) -> str:
        """Rows ``period, coord_index, posterior_mean, posterior_sd`` (LF endings, full precision)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "coord_index", "posterior_mean", "posterior_sd"])
        for t, mean, cov in zip(self.checkpoints, self.posterior_means, self.posterior_covs):
            sd = np.sqrt(np.diag(np.asarray(cov)))
            for label, m, s in zip(self.coord_labels, mean, sd):
                w.writerow([t, label, format(m, ".17g"), format(s, ".17g")])
        return buf.getvalue()


def _signal_layout(s: Scenario):
    n, k = s.n_sources, s.state_dim
    if s.mode == "multidim":
        state_chol = np.linalg.cholesky(np.asarray(s.state_cov))
        noise_chols = [np.linalg.cholesky(np.asarray(c)) for c in s.error_covs]
        load = np.kron(np.ones((n, 1)), np.eye(k))
    else:
        state_chol = np.eye(1)
        noise_chols = [np.sqrt(np.array([[v]])) for v in s.noise_variance]
        weight = s.loadings if s.loadings is not None else np.ones(n)
        load = weight.reshape(n, 1)
    return state_chol, noise_chols, load


def generate_signals(s: Scenario, seed: int, t: int, start: int = 0) -> np.ndarray:
    """Signals for periods ``start..start+t-1`` drawn from the true model, shape ``(t, N*K)``.

    In latent-factor mode the true latent factor is taken as zero (it is not
    separately identified from the true biases).
    """
    n, k = s.n_sources, s.state_dim
    stop = start + t
    state_chol, noise_chols, load = _signal_layout(s)
    omega = rng.standard_normals(seed, rng.STATE, start, stop, k) @ state_chol.T
    z = rng.standard_normals(seed, rng.NOISE, start, stop, n * k)
    eps = np.empty_like(z)
    for i, c in enumerate(noise_chols):
        sl = slice(i * k, (i + 1) * k)
        eps[:, sl] = z[:, sl] @ c.T
    x = s.true_bias.reshape(-1) + omega @ load.T + eps
    if s.shock_loadings is not None:
        theta = rng.standard_normals(seed, rng.SHOCK, start, stop, 1)
        x = x + theta @ s.shock_loadings.reshape(1, n)
    return x


def signals_digest(batch: np.ndarray, h=None) -> int:
    h = h or hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(batch, dtype="<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


def _sufficient(sm: SignalModel, batch_sum, perceived):
    """Map a sum of signals to the free-coordinate score ``sum_t (r_t,u - Q_um b_m)`` per period."""
    r = sm.design.T @ (np.asarray(sm.sigma_star_inv) @ batch_sum)
    return r[sm.free], sm.quad_form[np.ix_(sm.free, sm.fixed)] @ perceived


def posterior_update(prior: PriorSpec, sm: SignalModel, batch, perceived=None) -> PriorSpec:
    """Conjugate update of the free-parameter belief on a batch of signals.

    ``perceived`` holds the dogmatic values of the fixed (misspecified)
    coordinates. Precision grows by ``T * Q_uu``; the mean solves the normal
    equations with the batch's sufficient statistic.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    t = batch.shape[0] if batch.size else 0
    if t == 0:
        return prior
    if perceived is None:
        if sm.fixed.size:
            raise ValueError("perceived values of the fixed coordinates are required")
        perceived = np.zeros(0)
    perceived = np.asarray(perceived, dtype=float).reshape(-1)
    q_uu = sm.quad_form[np.ix_(sm.free, sm.free)]
    prior_prec = linalg.dense_inverse(prior.covariance)
    r_u, cross = _sufficient(sm, batch.sum(axis=0), perceived)
    post_prec = prior_prec + t * q_uu
    post_prec = 0.5 * (post_prec + post_prec.T)
    rhs = prior_prec @ prior.mean + r_u - t * cross
    post_cov = linalg.dense_inverse(post_prec)
    mean = linalg.cholesky_solve(post_prec, rhs)
    return PriorSpec(mean, post_cov)


def coord_labels(s: Scenario, sm: SignalModel) -> list:
    """1-based labels of the free coordinates: bias coordinate index, or ``N*K + 1`` for the latent factor."""
    return [int(c) + 1 for c in sm.free]


def limit_mean(s: Scenario, sm: SignalModel, delta) -> np.ndarray:
    """Long-run posterior mean implied by a misperception ``delta``: true value plus misperception."""
    truth = np.zeros(sm.design.shape[1])
    truth[: s.true_bias.size] = s.true_bias.reshape(-1)
    return (truth + delta.parameter_vector(sm))[sm.free]


def run_convergence(s: Scenario, prior: PriorSpec | None, seed: int, t: int, checkpoints=None) -> SimulationTrace:
    """Simulate ``t`` periods and snapshot the posterior at each checkpoint.

    Default checkpoints are the powers of ten below ``t`` plus ``t`` itself.
    """
    if s.mode == "learn_covariance":
        raise ValueError("simulation with a learned covariance is not supported")
    sm = build_signal_model(s)
    if prior is None:
        prior = diffuse_prior(sm)
    if checkpoints is None:
        checkpoints = [10**j for j in range(int(np.log10(t)) + 1) if 10**j < t] + [t]
    checkpoints = sorted({int(c) for c in checkpoints})
    if not checkpoints or checkpoints[0] < 1 or checkpoints[-1] > t:
        raise ValueError("checkpoints must lie in 1..t")
    perceived = s.perceived_bias.reshape(-1)
    h = hashlib.blake2b(digest_size=8)
    means, covs = [], []
    post = prior
    done = 0
    boundaries = sorted(set(checkpoints) | set(range(rng.BLOCK, t, rng.BLOCK)) | {t})
    for stop in boundaries:
        batch = generate_signals(s, seed, stop - done, start=done)
        h.update(np.ascontiguousarray(batch, dtype="<f8").tobytes())
        post = posterior_update(post, sm, batch, perceived)
        done = stop
        if stop in checkpoints:
            means.append(post.mean.copy())
            covs.append(post.covariance)
    return SimulationTrace(
        seed=int(seed),
        periods=int(t),
        checkpoints=checkpoints,
        posterior_means=means,
        posterior_covs=covs,
        signals_digest=int.from_bytes(h.digest(), "little"),
        coord_labels=coord_labels(s, sm),
    )
