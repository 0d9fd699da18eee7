"""Parameter sweeps, finite-difference sensitivities and structural-property checks."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import behavior, klsolver, rng
from .errors import DegenerateMetric, ValidationError
from .scenario import Scenario

PARAMETERS = ("nu_i", "delta_i", "alpha_i", "beta_i", "rho", "eta_k")
SCENARIO_OUTPUTS = ("metric", "delta_hat", "blp_distortion", "eu_gap", "delta_factor")
PORTFOLIO_OUTPUTS = ("delta_alpha", "eu_gap")
INVARIANCE_TOL = 1e-10
# Stream for perturbation draws, kept apart from the signal and welfare streams.
PERTURB_STREAM = 7


def fd_step(x: float) -> float:
    return 1e-6 * max(1.0, abs(x))


def with_parameter(base, parameter: str, index: int, value: float, component: int = 0):
    """Copy of ``base`` with one parameter set to ``value``.

    ``index`` is a 0-based source (or project) index; ``component`` selects the
    state coordinate of a misperception when the state is multidimensional.
    """
    if parameter == "eta_k":
        if not isinstance(base, behavior.PortfolioScenario):
            raise ValueError("eta_k sweeps need a PortfolioScenario")
        eta = base.eta.copy()
        eta[index] = value
        return behavior.PortfolioScenario(eta, base.risk_aversion, base.wealth, base.mu_star, base.metric)
    if not isinstance(base, Scenario):
        raise ValueError(f"{parameter} sweeps need a Scenario")
    s = base
    if parameter == "nu_i":
        if s.mode == "multidim":
            raise ValueError("nu_i sweeps need scalar noise variances")
        v = s.noise_variance.copy()
        v[index] = 1.0 / value
        return s.replace(noise_variance=v)
    if parameter == "delta_i":
        if index not in s.misspecified:
            raise ValueError(f"source {index} is not misspecified")
        pos = s.misspecified.index(index)
        perceived = np.array(s.perceived_bias, dtype=float)
        truth = s.true_bias[index]
        if perceived.ndim == 1:
            perceived[pos] = truth + value
        else:
            perceived[pos, component] = truth[component] + value
        return s.replace(perceived_bias=perceived)
    if parameter == "alpha_i":
        if s.loadings is None:
            raise ValueError("alpha_i sweeps need a loadings scenario")
        a = s.loadings.copy()
        a[index] = value
        return s.replace(loadings=a)
    if parameter == "beta_i":
        if s.shock_loadings is None:
            raise ValueError("beta_i sweeps need a shock scenario")
        b = s.shock_loadings.copy()
        b[index] = value
        return s.replace(shock_loadings=b)
    if parameter == "rho":
        if s.mode != "multidim":
            raise ValueError("rho sweeps need a multidimensional scenario")
        covs = [np.asarray(c).copy() for c in s.error_covs]
        k = s.state_dim
        scale = covs[index][0, 0]
        covs[index] = scale * ((1.0 - value) * np.eye(k) + value * np.ones((k, k)))
        return s.replace(error_covs=covs)
    raise ValueError(f"unknown parameter {parameter!r}")


def evaluate(obj, outputs) -> dict:
    """Requested outputs for one scenario (or portfolio), each as a 1-D array."""
    out = {}
    if isinstance(obj, behavior.PortfolioScenario):
        rep = behavior.portfolio(obj)
        for name in outputs:
            out[name] = np.atleast_1d(rep.delta_alpha if name == "delta_alpha" else rep.eu_gap)
        return out
    sol = klsolver.solve(obj)
    report = None
    for name in outputs:
        if name == "metric":
            out[name] = sol.delta.metric
        elif name == "delta_hat":
            out[name] = sol.delta.learned_part
        elif name == "delta_factor":
            if sol.delta_factor is None:
                raise ValueError("delta_factor is defined only when the covariance is learned")
            out[name] = np.atleast_1d(sol.delta_factor)
        else:
            report = report or behavior.welfare_gap(obj, sol)
            value = report.distortion if name == "blp_distortion" else report.eu_gap
            out[name] = np.atleast_1d(value)
    return out


@dataclass(frozen=True)
class SweepSpec:
    """A one-parameter grid over a base scenario.

    ``index`` is the 0-based source or project index the parameter refers to;
    for ``rho`` it picks the source whose error components correlate.
    """

    base: object
    parameter: str
    index: int
    grid: tuple
    outputs: tuple = ("metric",)
    component: int = 0

    def __post_init__(self):
        grid = tuple(float(g) for g in np.atleast_1d(self.grid))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "outputs", tuple(self.outputs))
        issues = []
        if self.parameter not in PARAMETERS:
            issues.append(("BAD_PARAMETER", f"parameter must be one of {PARAMETERS}"))
        allowed = PORTFOLIO_OUTPUTS if self.parameter == "eta_k" else SCENARIO_OUTPUTS
        bad = [o for o in self.outputs if o not in allowed]
        if bad or not self.outputs:
            issues.append(("BAD_OUTPUT", f"outputs must be a non-empty subset of {allowed}"))
        if not grid or np.any(np.diff(grid) <= 0) or not np.all(np.isfinite(grid)):
            issues.append(("BAD_GRID", "grid must be finite and strictly increasing"))
        if issues:
            raise ValidationError(issues)
        # validate every grid point (and its finite-difference neighbours) up front
        for x in grid:
            for y in (x - fd_step(x), x + fd_step(x)):
                try:
                    point = with_parameter(self.base, self.parameter, self.index, y, self.component)
                    evaluate(point, self.outputs)
                except ValidationError as exc:
                    raise ValidationError([(exc.code, f"grid point {x!r}: {exc}")]) from exc
                except (ValueError, IndexError) as exc:
                    raise ValidationError([("BAD_GRID", f"grid point {x!r}: {exc}")]) from exc

    @classmethod
    def from_dict(cls, raw: dict, base) -> "SweepSpec":
        """Build from a JSON-style dict with a 1-based ``index``."""
        allowed = {"parameter", "index", "grid", "outputs", "component"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ValidationError([("UNKNOWN_KEY", f"unknown keys: {unknown}")])
        missing = sorted({"parameter", "grid"} - set(raw))
        if missing:
            raise ValidationError([("MISSING_KEY", f"missing keys: {missing}")])
        index = raw.get("index", 1)
        if not isinstance(index, int) or index < 1:
            raise ValidationError([("BAD_INDEX", "index must be a positive integer (1-based)")])
        return cls(
            base=base,
            parameter=raw["parameter"],
            index=index - 1,
            grid=tuple(raw["grid"]),
            outputs=tuple(raw.get("outputs", ("metric",))),
            component=int(raw.get("component", 1)) - 1,
        )


@dataclass(frozen=True, eq=False)
class SweepTable:
    columns: list
    rows: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([format(v, ".17g") for v in row])
        return buf.getvalue()


def _flatten(values: dict, outputs) -> tuple[list, np.ndarray]:
    names, parts = [], []
    for o in outputs:
        v = values[o]
        names += [o] if v.size == 1 else [f"{o}_{j + 1}" for j in range(v.size)]
        parts.append(v)
    return names, np.concatenate(parts)


def _grid_row(spec: SweepSpec, x: float):
    def at(y):
        return _flatten(evaluate(with_parameter(spec.base, spec.parameter, spec.index, y, spec.component), spec.outputs), spec.outputs)

    names, centre = at(x)
    h = fd_step(x)
    _, up = at(x + h)
    _, down = at(x - h)
    return names, np.concatenate([[x], centre, (up - down) / (2.0 * h)])


def run_sweep(spec: SweepSpec, max_workers: int | None = None) -> SweepTable:
    """Outputs and central-difference sensitivities at every grid point, in grid order."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(lambda x: _grid_row(spec, x), spec.grid))
    names = results[0][0]
    columns = ["param_value"] + names + [f"d_{n}/d_param" for n in names]
    return SweepTable(columns, np.vstack([r[1] for r in results]))


def sensitivity(base, parameter: str, index: int, output: str, x: float | None = None, component: int = 0) -> np.ndarray:
    """Central-difference derivative of ``output`` with respect to one parameter at ``x``.

    When ``x`` is None the base scenario's current value is used.
    """
    if x is None:
        x = current_value(base, parameter, index, component)
    h = fd_step(x)
    up = evaluate(with_parameter(base, parameter, index, x + h, component), [output])[output]
    down = evaluate(with_parameter(base, parameter, index, x - h, component), [output])[output]
    return (up - down) / (2.0 * h)


def current_value(base, parameter: str, index: int, component: int = 0) -> float:
    if parameter == "eta_k":
        return float(base.eta[index])
    if parameter == "nu_i":
        return float(base.precision[index])
    if parameter == "delta_i":
        pos = base.misspecified.index(index)
        return float(np.atleast_1d(base.perceived_bias[pos] - base.true_bias[index])[component])
    if parameter == "alpha_i":
        return float(base.loadings[index])
    if parameter == "beta_i":
        return float(base.shock_loadings[index])
    if parameter == "rho":
        c = np.asarray(base.error_covs[index])
        return float(c[0, 1] / c[0, 0])
    raise ValueError(f"unknown parameter {parameter!r}")


def find_opposite_signs(candidates, parameter: str, index: int, output: str, component: int = 0, min_abs: float = 1e-6):
    """Scan candidate scenarios for a strictly positive and a strictly negative sensitivity.

    Returns ``(positive_case, negative_case)``, either of which may be None
    if the scan found no such case. Sensitivities smaller than ``min_abs``
    count as neither sign.
    """
    pos = neg = None
    for cand in candidates:
        d = float(sensitivity(cand, parameter, index, output, component=component)[0])
        if d > min_abs and pos is None:
            pos = cand
        elif d < -min_abs and neg is None:
            neg = cand
        if pos is not None and neg is not None:
            break
    return pos, neg


# ---------------------------------------------------------------------------
# Structural checks
# ---------------------------------------------------------------------------

def _aggregates(s: Scenario) -> np.ndarray:
    sol = klsolver.solve(s)
    parts = [sol.delta.metric]
    if sol.delta_factor is not None:
        parts.append([sol.delta_factor])
    return np.concatenate(parts)


def _close(a, b) -> bool:
    return bool(np.all(np.abs(a - b) <= INVARIANCE_TOL * np.maximum(1.0, np.abs(b))))


def _random_cov(g: np.random.Generator, k: int) -> np.ndarray:
    a = g.normal(size=(k, k))
    return a @ a.T / k + g.uniform(0.2, 2.0) * np.eye(k)


def _perturbed(s: Scenario, g: np.random.Generator, familiar: bool) -> Scenario:
    targets = s.misspecified if familiar else s.unfamiliar
    changes = {}
    if s.mode == "multidim":
        covs = [np.asarray(c).copy() for c in s.error_covs]
        for j in targets:
            covs[j] = _random_cov(g, s.state_dim)
        changes["error_covs"] = covs
    else:
        v = s.noise_variance.copy()
        for j in targets:
            v[j] *= np.exp(g.uniform(-1.5, 1.5))
        changes["noise_variance"] = v
    if familiar:
        return s.replace(**changes)
    # append up to two correctly specified (learned) sources
    extra = int(g.integers(0, 3))
    if extra == 0:
        return s.replace(**changes)
    k = s.state_dim
    truth = np.asarray(s.true_bias)
    new_truth = g.normal(size=(extra,) + truth.shape[1:])
    changes["true_bias"] = np.concatenate([truth, new_truth])
    changes["n_sources"] = s.n_sources + extra
    if s.mode == "multidim":
        changes["error_covs"] = changes["error_covs"] + [_random_cov(g, k) for _ in range(extra)]
        if s.noise_variance is not None:
            changes["noise_variance"] = np.concatenate([s.noise_variance, g.uniform(0.2, 5.0, extra)])
    else:
        changes["noise_variance"] = np.concatenate([changes["noise_variance"], g.uniform(0.2, 5.0, extra)])
    return s.replace(**changes)


def check_doom(s: Scenario, perturbations: int, seed: int, *, perturb: str = "unfamiliar") -> bool:
    """True iff the aggregate misperception (and moderation factor) is unaffected by the perturbations.

    ``perturb="unfamiliar"`` redraws the noise of learned sources and appends
    new correctly specified ones; ``perturb="familiar"`` redraws the noise of
    misspecified sources instead, as a negative control.
    """
    if s.mode not in ("baseline", "latent", "multidim", "learn_covariance"):
        raise ValueError(f"check_doom does not apply to mode {s.mode!r}")
    if perturb not in ("unfamiliar", "familiar"):
        raise ValueError("perturb must be 'unfamiliar' or 'familiar'")
    ref = _aggregates(s)
    for p in range(perturbations):
        g = rng.block_generator(seed, PERTURB_STREAM, p)
        if not _close(_aggregates(_perturbed(s, g, perturb == "familiar")), ref):
            return False
    return True


def check_wdoom_shock(s: Scenario, perturbations: int, seed: int, *, perturb: str = "others") -> bool:
    """True iff each learned source's misperception ignores the other learned sources.

    For each unfamiliar ``j`` the shock loadings of the other unfamiliar
    sources and the noise of every unfamiliar source (including ``j``) are
    redrawn. ``perturb="familiar"`` redraws the shock loadings of the
    misspecified sources instead, as a negative control.
    """
    if s.mode != "shock":
        raise ValueError("check_wdoom_shock needs a shock scenario")
    if perturb not in ("others", "familiar"):
        raise ValueError("perturb must be 'others' or 'familiar'")
    ref = klsolver.solve(s).delta.full
    for p in range(perturbations):
        g = rng.block_generator(seed, PERTURB_STREAM, p)
        for j in s.unfamiliar:
            beta = s.shock_loadings.copy()
            v = s.noise_variance.copy()
            if perturb == "familiar":
                for i in s.misspecified:
                    beta[i] += g.normal()
            else:
                for l in s.unfamiliar:
                    v[l] *= np.exp(g.uniform(-1.5, 1.5))
                    if l != j:
                        beta[l] = g.normal(scale=2.0)
            new = klsolver.solve(s.replace(shock_loadings=beta, noise_variance=v)).delta.full
            if not _close(new[j:j + 1], ref[j:j + 1]):
                return False
    return True


def check_scaling(s: Scenario, alpha: float) -> bool:
    """True iff scaling every misspecified source's precision by ``alpha > 1`` strictly enlarges ``|metric|``."""
    if s.mode != "baseline":
        raise ValueError("check_scaling needs a baseline scenario")
    if not alpha > 1.0:
        raise ValueError("alpha must exceed 1")
    before = klsolver.solve(s).delta.metric_value
    if before == 0.0:
        raise DegenerateMetric("metric is zero; scaling leaves it unchanged")
    v = s.noise_variance.copy()
    m = list(s.misspecified)
    v[m] = v[m] / alpha
    after = klsolver.solve(s.replace(noise_variance=v)).delta.metric_value
    return abs(after) > abs(before)
