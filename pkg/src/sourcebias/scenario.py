"""Scenario description, validation, JSON I/O, and covariance assembly."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import InternalConsistencyError, NotSpd, ValidationError

MODES = ("baseline", "loadings", "shock", "latent", "multidim", "learn_covariance")

FILE_KEYS = {
    "n_sources", "misspecified", "true_bias", "perceived_bias", "noise_variance",
    "loadings", "shock_loadings", "latent_factor", "state_dim", "state_cov",
    "error_covs", "learn_covariance",
}
REQUIRED_FILE_KEYS = ("n_sources", "misspecified", "true_bias", "perceived_bias")

# Closed-form inverse vs dense LU inverse: tolerated disagreement (relative to max |inverse|).
INVERSE_CROSSCHECK_TOL = 1e-8


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scenario:
    """Sources, misspecifications and covariance structure.

    Indices are 0-based. ``perceived_bias`` is aligned with ``misspecified``
    (one row per misspecified source). Bias arrays have shape ``(N,)`` when
    ``state_dim == 1`` and ``(N, K)`` otherwise. Instances are validated on
    construction and raise :class:`ValidationError` listing every problem.
    """

    n_sources: int
    misspecified: tuple
    true_bias: np.ndarray
    perceived_bias: np.ndarray
    noise_variance: np.ndarray | None = None
    loadings: np.ndarray | None = None
    shock_loadings: np.ndarray | None = None
    latent_factor: bool = False
    state_dim: int = 1
    state_cov: np.ndarray | None = None
    error_covs: tuple | None = None
    learn_covariance: bool = False

    def __post_init__(self):
        issues = []
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731

        try:
            n = int(self.n_sources)
            if n != self.n_sources or n < 1:
                raise ValueError
        except (TypeError, ValueError):
            raise ValidationError([("BAD_VALUE", f"n_sources must be a positive integer, got {self.n_sources!r}")])
        set_("n_sources", n)
        k = int(self.state_dim)
        if k < 1 or k != self.state_dim:
            raise ValidationError([("BAD_VALUE", "state_dim must be a positive integer")])
        if k == 1 and (self.state_cov is not None or self.error_covs is not None):
            # infer the state dimension from the covariance inputs when not given
            shaped = self.state_cov if self.state_cov is not None else self.error_covs[0]
            k = int(np.atleast_2d(np.asarray(shaped, dtype=float)).shape[0])
        set_("state_dim", k)

        m_idx = [int(i) for i in np.atleast_1d(self.misspecified)]
        if len(set(m_idx)) != len(m_idx):
            issues.append(("BAD_INDEX", "misspecified indices must be distinct"))
        if any(i < 0 or i >= n for i in m_idx):
            issues.append(("BAD_INDEX", f"misspecified indices must lie in 1..{n}"))
        if not 1 <= len(m_idx) < n:
            issues.append(("BAD_M_SIZE", f"need 1 <= |M| < N, got |M|={len(m_idx)}, N={n}"))

        multidim = k > 1 or self.error_covs is not None or self.state_cov is not None
        bias_shape = (n,) if k == 1 else (n, k)
        tb = np.array(self.true_bias, dtype=float)
        if k == 1 and tb.ndim == 2 and tb.shape[1] == 1:
            tb = tb[:, 0]
        if tb.shape != bias_shape:
            issues.append(("BAD_SHAPE", f"true_bias must have shape {bias_shape}, got {tb.shape}"))
        pb = np.array(self.perceived_bias, dtype=float)
        if k == 1:
            pb = pb.reshape(-1)
        if pb.shape != (len(m_idx),) + bias_shape[1:]:
            issues.append(("BAD_SHAPE", "perceived_bias must have one entry per misspecified source"))

        v = None if self.noise_variance is None else np.array(self.noise_variance, dtype=float).reshape(-1)
        if v is None and self.error_covs is None:
            issues.append(("MISSING_KEY", "noise_variance is required unless error_covs is given"))
        if v is not None:
            if v.shape != (n,):
                issues.append(("BAD_SHAPE", f"noise_variance must have length {n}"))
            elif not np.all(v > 0):
                issues.append(("NONPOSITIVE_VARIANCE", "every noise variance must be > 0"))

        alpha = None if self.loadings is None else np.array(self.loadings, dtype=float).reshape(-1)
        if alpha is not None:
            if alpha.shape != (n,):
                issues.append(("BAD_SHAPE", f"loadings must have length {n}"))
            elif not np.all(alpha > 0):
                issues.append(("BAD_VALUE", "loadings must be positive"))
        beta = None if self.shock_loadings is None else np.array(self.shock_loadings, dtype=float).reshape(-1)
        if beta is not None and beta.shape != (n,):
            issues.append(("BAD_SHAPE", f"shock_loadings must have length {n}"))

        active = [name for name, on in (
            ("shock_loadings", beta is not None), ("latent_factor", bool(self.latent_factor)),
            ("multidimensional", multidim), ("learn_covariance", bool(self.learn_covariance)),
        ) if on]
        if len(active) > 1:
            issues.append(("MODE_CONFLICT", f"mutually exclusive modes requested: {', '.join(active)}"))
        if alpha is not None and active:
            issues.append(("MODE_CONFLICT", f"loadings cannot be combined with {active[0]}"))

        omega0 = None
        covs = None
        if multidim:
            omega0 = np.eye(k) if self.state_cov is None else np.array(self.state_cov, dtype=float)
            if omega0.shape != (k, k):
                issues.append(("BAD_SHAPE", f"state_cov must be {k}x{k}"))
            elif not _is_spd(omega0):
                issues.append(("NOT_SPD", "state_cov must be symmetric positive definite"))
            if self.error_covs is None:
                if v is not None and v.shape == (n,):
                    covs = [vi * np.eye(k) for vi in v]
            else:
                covs = [np.array(c, dtype=float).reshape(k, k) if np.size(c) == k * k else np.array(c, dtype=float)
                        for c in self.error_covs]
                if len(covs) != n:
                    issues.append(("BAD_SHAPE", f"error_covs must hold {n} matrices"))
                for i, c in enumerate(covs):
                    if c.shape != (k, k):
                        issues.append(("BAD_SHAPE", f"error_covs[{i + 1}] must be {k}x{k}"))
                    elif not _is_spd(c):
                        issues.append(("NOT_SPD", f"error_covs[{i + 1}] must be symmetric positive definite"))

        for name, arr in (("true_bias", tb), ("perceived_bias", pb)):
            if arr.size and not np.all(np.isfinite(arr)):
                issues.append(("BAD_VALUE", f"{name} must be finite"))

        if issues:
            raise ValidationError(issues)

        order = np.argsort(m_idx, kind="stable")
        set_("misspecified", tuple(m_idx[j] for j in order))
        set_("true_bias", _frozen(tb))
        set_("perceived_bias", _frozen(pb[order]))
        set_("noise_variance", _frozen(v))
        set_("loadings", _frozen(alpha))
        set_("shock_loadings", _frozen(beta))
        set_("latent_factor", bool(self.latent_factor))
        set_("learn_covariance", bool(self.learn_covariance))
        set_("state_cov", None if omega0 is None else _frozen(0.5 * (omega0 + omega0.T)))
        set_("error_covs", None if covs is None else tuple(_frozen(0.5 * (c + c.T)) for c in covs))

        if np.array_equal(self.perceived_bias, self.true_bias[list(self.misspecified)]):
            warnings.warn("perceived biases equal true biases on every misspecified source; "
                          "the scenario has no misspecification", stacklevel=3)

    # -- derived views -------------------------------------------------

    @property
    def mode(self) -> str:
        if self.loadings is not None:
            return "loadings"
        if self.shock_loadings is not None:
            return "shock"
        if self.latent_factor:
            return "latent"
        if self.error_covs is not None:
            return "multidim"
        if self.learn_covariance:
            return "learn_covariance"
        return "baseline"

    @property
    def n_misspecified(self) -> int:
        return len(self.misspecified)

    @property
    def unfamiliar(self) -> tuple:
        m = set(self.misspecified)
        return tuple(i for i in range(self.n_sources) if i not in m)

    @property
    def precision(self) -> np.ndarray:
        """Signal-to-noise ratios ``1 / v``."""
        if self.noise_variance is None:
            raise ValidationError([("MISSING_KEY", "scenario has no scalar noise variances")])
        return 1.0 / self.noise_variance

    @property
    def delta_tilde(self) -> np.ndarray:
        """Misspecifications ``perceived - true`` on M, flattened source-major."""
        return (self.perceived_bias - self.true_bias[list(self.misspecified)]).reshape(-1)

    def replace(self, **changes) -> "Scenario":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return Scenario(**kw)

    # -- file format ---------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "n_sources": self.n_sources,
            "misspecified": [i + 1 for i in self.misspecified],
            "true_bias": self.true_bias.tolist(),
            "perceived_bias": {str(i + 1): _tolist(b) for i, b in zip(self.misspecified, self.perceived_bias)},
        }
        if self.noise_variance is not None:
            out["noise_variance"] = self.noise_variance.tolist()
        if self.loadings is not None:
            out["loadings"] = self.loadings.tolist()
        if self.shock_loadings is not None:
            out["shock_loadings"] = self.shock_loadings.tolist()
        if self.latent_factor:
            out["latent_factor"] = True
        if self.state_dim != 1:
            out["state_dim"] = self.state_dim
        if self.state_cov is not None:
            out["state_cov"] = self.state_cov.tolist()
        if self.error_covs is not None:
            out["error_covs"] = [c.tolist() for c in self.error_covs]
        if self.learn_covariance:
            out["learn_covariance"] = True
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        """Parse the JSON file format (1-based indices, strict keys)."""
        if not isinstance(raw, dict):
            raise ValidationError([("BAD_TYPE", "scenario must be a JSON object")])
        issues = [("UNKNOWN_KEY", f"unknown key {k!r}") for k in sorted(set(raw) - FILE_KEYS)]
        issues += [("MISSING_KEY", f"missing key {k!r}") for k in REQUIRED_FILE_KEYS if k not in raw]
        if issues:
            raise ValidationError(issues)
        m = raw["misspecified"]
        if not isinstance(m, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in m):
            raise ValidationError([("BAD_TYPE", "misspecified must be an array of integers")])
        pb = raw["perceived_bias"]
        if not isinstance(pb, dict):
            raise ValidationError([("BAD_TYPE", "perceived_bias must map source index to value")])
        try:
            pb_keys = {int(key): val for key, val in pb.items()}
        except ValueError:
            raise ValidationError([("BAD_INDEX", "perceived_bias keys must be integers")])
        if set(pb_keys) != set(m):
            raise ValidationError([("BAD_INDEX", "perceived_bias keys must match misspecified exactly")])
        for key in ("latent_factor", "learn_covariance"):
            if key in raw and not isinstance(raw[key], bool):
                raise ValidationError([("BAD_TYPE", f"{key} must be a boolean")])
        try:
            return cls(
                n_sources=raw["n_sources"],
                misspecified=tuple(i - 1 for i in m),
                true_bias=raw["true_bias"],
                perceived_bias=[pb_keys[i] for i in m],
                noise_variance=raw.get("noise_variance"),
                loadings=raw.get("loadings"),
                shock_loadings=raw.get("shock_loadings"),
                latent_factor=raw.get("latent_factor", False),
                state_dim=raw.get("state_dim", 1),
                state_cov=raw.get("state_cov"),
                error_covs=raw.get("error_covs"),
                learn_covariance=raw.get("learn_covariance", False),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError([("BAD_TYPE", str(exc))]) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _tolist(x):
    x = np.asarray(x)
    return x.tolist() if x.ndim else float(x)


def _is_spd(m) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.allclose(m, m.T, rtol=0, atol=1e-9 * max(1.0, np.abs(m).max())):
        return False
    return linalg.spd_check(m)[0]


def validate(raw) -> Scenario:
    """Normalize a scenario given as a :class:`Scenario` or a file-format dict."""
    if isinstance(raw, Scenario):
        return raw.replace()
    return Scenario.from_dict(raw)


def load_scenario(path) -> Scenario:
    """Read a scenario JSON file. JSON parse errors surface as ``ValidationError(BAD_JSON)``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([("BAD_JSON", str(exc))]) from exc
    return Scenario.from_dict(raw)


# ---------------------------------------------------------------------------
# Signal model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SignalModel:
    """True signal covariance with its familiar/unfamiliar block views.

    Coordinates are source-major (``i * K + k``). ``order`` lists the
    familiar coordinates followed by the unfamiliar ones, which is the layout
    of ``[[A, B], [C, D]]``.

    The bias parameter may differ from the signal mean: signals have mean
    ``design @ b``. ``design`` is the identity except in latent-factor mode,
    where it appends a column of ones. ``quad_form`` is
    ``design.T @ inv(sigma_star) @ design`` and ``fixed`` / ``free`` index its
    rows.
    """

    sigma_star: linalg.SymMatrix
    sigma_star_inv: linalg.SymMatrix
    block_a: linalg.SymMatrix
    block_b: np.ndarray
    block_c: np.ndarray
    block_d: linalg.SymMatrix
    assembled_via: str
    familiar: np.ndarray
    unfamiliar: np.ndarray
    design: np.ndarray
    quad_form: np.ndarray
    fixed: np.ndarray
    free: np.ndarray
    state_signal_cov: np.ndarray
    state_cov: np.ndarray
    mode: str = "baseline"
    state_dim: int = 1
    n_sources: int = 1
    extras: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.sigma_star.dim

    @property
    def order(self) -> np.ndarray:
        return np.concatenate([self.familiar, self.unfamiliar])

    def reassemble(self) -> np.ndarray:
        """Put ``[[A, B], [C, D]]`` back in source order."""
        blocked = np.block([[np.asarray(self.block_a), self.block_b], [self.block_c, np.asarray(self.block_d)]])
        out = np.empty_like(blocked)
        o = self.order
        out[np.ix_(o, o)] = blocked
        return out


def _coords(sources, k):
    return np.array([i * k + j for i in sources for j in range(k)], dtype=int)


def build_signal_model(s: Scenario) -> SignalModel:
    """Assemble ``Sigma*`` for the scenario's mode and invert it by rank updates."""
    n, k = s.n_sources, s.state_dim
    mode = s.mode
    if mode == "multidim":
        omega0 = np.asarray(s.state_cov)
        blocks = [np.asarray(c) for c in s.error_covs]
        g = np.zeros((n * k, n * k))
        g_inv = np.zeros_like(g)
        for i, c in enumerate(blocks):
            sl = slice(i * k, (i + 1) * k)
            g[sl, sl] = c
            g_inv[sl, sl] = linalg.dense_inverse(c)
        u = linalg.kronecker(np.ones((n, 1)), np.eye(k))
        sigma = g + u @ omega0 @ u.T
        sigma_inv = linalg.woodbury_inverse(g_inv, u, linalg.dense_inverse(omega0), u)
        via = "kronecker_block"
        c_state = np.kron(np.ones((1, n)), omega0)
    else:
        v = s.noise_variance
        weight = s.loadings if s.loadings is not None else np.ones(n)
        sigma = np.diag(v) + np.outer(weight, weight)
        sigma_inv = linalg.sherman_morrison_inverse(np.diag(1.0 / v), weight, weight)
        via = "diag_plus_rank1"
        if s.shock_loadings is not None:
            beta = s.shock_loadings
            sigma = sigma + np.outer(beta, beta)
            sigma_inv = linalg.sherman_morrison_inverse(sigma_inv, beta, beta)
            via = "diag_plus_rank2"
        omega0 = np.eye(1)
        c_state = weight.reshape(1, n).copy()

    sym = linalg.SymMatrix(sigma)
    ok, lo, _ = linalg.spd_check(sym)
    if not ok:
        raise NotSpd(f"assembled covariance is not positive definite (min eigenvalue {lo:.3g})")
    dense = linalg.dense_inverse(sigma)
    gap = float(np.max(np.abs(dense - sigma_inv)))
    if gap > INVERSE_CROSSCHECK_TOL * max(1.0, float(np.max(np.abs(dense)))):
        raise InternalConsistencyError(f"rank-update inverse differs from dense inverse by {gap:.3g}")
    inv = linalg.SymMatrix(sigma_inv)

    fam = _coords(s.misspecified, k)
    unf = _coords(s.unfamiliar, k)
    if mode == "latent":
        design = np.hstack([np.eye(n), np.ones((n, 1))])
        free = np.concatenate([unf, [n]])
    else:
        design = np.eye(n * k)
        free = unf
    quad = design.T @ np.asarray(inv) @ design
    quad = 0.5 * (quad + quad.T)

    return SignalModel(
        sigma_star=sym,
        sigma_star_inv=inv,
        block_a=linalg.SymMatrix(sigma[np.ix_(fam, fam)]),
        block_b=_ro(sigma[np.ix_(fam, unf)]),
        block_c=_ro(sigma[np.ix_(unf, fam)]),
        block_d=linalg.SymMatrix(sigma[np.ix_(unf, unf)]),
        assembled_via=via,
        familiar=_ro(fam),
        unfamiliar=_ro(unf),
        design=_ro(design),
        quad_form=_ro(quad),
        fixed=_ro(fam),
        free=_ro(free),
        state_signal_cov=_ro(c_state),
        state_cov=_ro(omega0),
        mode=mode,
        state_dim=k,
        n_sources=n,
    )


def _ro(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Random scenarios (for property tests, sweeps and the acceptance harness)
# ---------------------------------------------------------------------------

def _random_spd(rng, k, lo=0.3, hi=3.0):
    q, _ = np.linalg.qr(rng.normal(size=(k, k)))
    lam = rng.uniform(lo, hi, size=k)
    m = (q * lam) @ q.T
    return 0.5 * (m + m.T)


def random_scenario(mode: str, rng: np.random.Generator, *, n_range=(2, 7), state_dim=None) -> Scenario:
    """Draw a valid scenario of the given mode with moderate conditioning."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    n_m = int(rng.integers(1, n))
    m_idx = tuple(sorted(rng.choice(n, size=n_m, replace=False).tolist()))
    k = 1
    if mode == "multidim":
        k = int(rng.integers(1, 4)) if state_dim is None else state_dim
    shape = (n,) if k == 1 else (n, k)
    true_bias = rng.normal(size=shape)
    delta = rng.normal(size=(n_m,) + shape[1:])
    delta[np.abs(delta) < 0.05] += 0.5
    perceived = true_bias[list(m_idx)] + delta
    kw = dict(n_sources=n, misspecified=m_idx, true_bias=true_bias, perceived_bias=perceived,
              noise_variance=rng.uniform(0.2, 5.0, size=n))
    if mode == "loadings":
        kw["loadings"] = rng.uniform(0.3, 2.5, size=n)
    elif mode == "shock":
        kw["shock_loadings"] = rng.normal(size=n)
    elif mode == "latent":
        kw["latent_factor"] = True
    elif mode == "multidim":
        kw["state_dim"] = k
        kw["state_cov"] = _random_spd(rng, k)
        kw["error_covs"] = [_random_spd(rng, k, 0.2, 5.0) for _ in range(n)]
        kw["noise_variance"] = None
    elif mode == "learn_covariance":
        kw["learn_covariance"] = True
    return Scenario(**kw)
