import numpy as np
import pytest

from sourcebias.scenario import Scenario


def random_spd(rng, n, lo=0.5, hi=3.0):
    """Well-conditioned SPD matrix with eigenvalues in [lo, hi]."""
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return (q * rng.uniform(lo, hi, n)) @ q.T


def baseline(n=2, m=(0,), dt=(1.0,), v=None, **kw):
    """Baseline scenario with zero true biases."""
    v = np.ones(n) if v is None else np.asarray(v, dtype=float)
    return Scenario(
        n_sources=n,
        misspecified=tuple(m),
        true_bias=np.zeros(n),
        perceived_bias=np.asarray(dt, dtype=float),
        noise_variance=v,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def two_source():
    return baseline()


@pytest.fixture
def shock_fixture():
    # five unit-variance sources, first three misspecified, common shock on sources 1 and 4
    return Scenario(
        n_sources=5,
        misspecified=(0, 1, 2),
        true_bias=np.zeros(5),
        perceived_bias=np.array([1.0, 0.0, 0.0]),
        noise_variance=np.ones(5),
        shock_loadings=np.array([1.0, 0.0, 0.0, 1.0, 0.0]),
    )


@pytest.fixture
def corr_fixture():
    rho = 0.5
    return Scenario(
        n_sources=2,
        misspecified=(0,),
        true_bias=np.zeros((2, 2)),
        perceived_bias=np.array([[1.0, -1.0]]),
        state_cov=np.eye(2),
        error_covs=[np.array([[1.0, rho], [rho, 1.0]]), np.eye(2)],
    )
