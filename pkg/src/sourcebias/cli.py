"""Command-line entry point: ``sourcebias solve|simulate|sweep|check|portfolio``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure (including a
failed check), 3 I/O error. Diagnostics go to stderr as ``error[CODE]: msg``.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import behavior, klsolver, learner, linalg, sweep
from .errors import NumericalError, SourceBiasError, ValidationError
from .scenario import build_signal_model, load_scenario

DEFAULT_DRAWS = 10**6
DEFAULT_PERIODS = 10**4
CHECK_TOL = 1e-8


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _CheckFailed(NumericalError):
    code = "CHECK_FAILED"

    def __init__(self, msg, output: str):
        super().__init__(msg)
        self.output = output


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sourcebias", description="Long-run beliefs about information-source biases.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scenario_required=True):
        sp.add_argument("--scenario", metavar="PATH", required=scenario_required, help="scenario JSON file")
        sp.add_argument("--seed", type=int, default=0, metavar="N", help="random seed (default 0)")
        sp.add_argument("--out", metavar="PATH", help="output file (default standard output)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv", help="output format (default csv)")

    sp = sub.add_parser("solve", help="closed-form long-run misperception, predictor distortion and welfare gap")
    common(sp)
    sp = sub.add_parser("simulate", help="Monte Carlo posterior path")
    common(sp)
    sp.add_argument("--periods", type=int, default=DEFAULT_PERIODS, metavar="N", help="number of periods")
    sp = sub.add_parser("sweep", help="one-parameter grid with finite-difference sensitivities")
    common(sp, scenario_required=False)
    sp.add_argument("--sweep-spec", metavar="PATH", required=True, help="sweep specification JSON file")
    sp = sub.add_parser("check", help="run the invariant suite for the scenario's mode")
    common(sp)
    sp.add_argument("--draws", type=int, default=DEFAULT_DRAWS, metavar="N", help="Monte Carlo draws")
    sp.add_argument("--periods", type=int, default=DEFAULT_PERIODS, metavar="N", help="simulated periods")
    sp = sub.add_parser("portfolio", help="allocation distortion for a misperceived project")
    sp.add_argument("--portfolio-spec", metavar="PATH", required=True, help="portfolio JSON file")
    sp.add_argument("--seed", type=int, default=0, metavar="N", help="random seed (default 0)")
    sp.add_argument("--out", metavar="PATH", help="output file (default standard output)")
    sp.add_argument("--format", choices=("csv", "json"), default="csv", help="output format (default csv)")
    return p


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError([("BAD_JSON", f"{path}: {exc}")]) from exc


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _emit_rows(rows, seed: int, fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"seed": seed, **{k: v for k, v, *_ in rows}}, indent=2) + "\n"
    out = [f"# seed={seed}", "quantity,value"]
    out += [f"{k},{_fmt(v)}" for k, v, *_ in rows]
    return "\n".join(out) + "\n"


def _vector_rows(name, values, labels=None):
    values = np.atleast_1d(values)
    if values.size == 1 and labels is None:
        return [(name, float(values[0]))]
    labels = labels or list(range(1, values.size + 1))
    return [(f"{name}_{lab}", float(v)) for lab, v in zip(labels, values)]


def cmd_solve(args) -> str:
    s = load_scenario(args.scenario)
    sm = build_signal_model(s)
    sol = klsolver.solve(s, sm)
    rep = behavior.welfare_gap(s, sol, sm)
    rows = _vector_rows("metric", sol.delta.metric)
    rows += _vector_rows("delta", sol.delta.full, [i + 1 for i in range(sol.delta.full.size)])
    if sol.delta.latent_component is not None:
        rows.append(("delta_latent", sol.delta.latent_component))
    rows += _vector_rows("blp_distortion", rep.distortion)
    rows += [("kl", sol.kl_at_solution), ("eu_star", rep.eu_star), ("eu_hat", rep.eu_hat), ("eu_gap", rep.eu_gap)]
    if sol.delta_factor is not None:
        rows.append(("delta_factor", sol.delta_factor))
    return _emit_rows(rows, args.seed, args.format)


def cmd_simulate(args) -> str:
    if args.periods < 1:
        raise ValidationError([("BAD_VALUE", "--periods must be positive")])
    s = load_scenario(args.scenario)
    trace = learner.run_convergence(s, None, args.seed, args.periods)
    if args.format == "json":
        return json.dumps({
            "seed": trace.seed,
            "periods": trace.periods,
            "signals_digest": f"{trace.signals_digest:016x}",
            "coord_index": trace.coord_labels,
            "checkpoints": trace.checkpoints,
            "posterior_means": [m.tolist() for m in trace.posterior_means],
            "posterior_sds": [np.sqrt(np.diag(np.asarray(c))).tolist() for c in trace.posterior_covs],
        }, indent=2) + "\n"
    return f"# seed={trace.seed}\n# signals_digest={trace.signals_digest:016x}\n" + trace.to_csv()


def cmd_sweep(args) -> str:
    raw = _read_json(args.sweep_spec)
    if not isinstance(raw, dict):
        raise ValidationError([("BAD_TYPE", "sweep spec must be a JSON object")])
    raw = dict(raw)
    if "portfolio" in raw:
        base = behavior.PortfolioScenario.from_dict(raw.pop("portfolio"))
    elif args.scenario is None:
        raise ValidationError([("MISSING_KEY", "--scenario is required unless the sweep spec embeds a portfolio")])
    else:
        base = load_scenario(args.scenario)
    table = sweep.run_sweep(sweep.SweepSpec.from_dict(raw, base))
    if args.format == "json":
        return json.dumps({"seed": args.seed, "columns": table.columns, "rows": table.rows.tolist()}, indent=2) + "\n"
    return f"# seed={args.seed}\n" + table.to_csv()


def _run_checks(s, seed: int, draws: int, periods: int):
    """Yield ``(name, passed, detail)`` for every check applicable to the scenario's mode."""
    sm = build_signal_model(s)
    sol = klsolver.solve(s, sm)
    yield "inverse_residual", linalg.inverse_residual(sm.sigma_star, sm.sigma_star_inv) < 1e-10, ""
    yield "foc_residual", klsolver.foc_residual(sm, sol.delta) < 1e-10, ""
    ref, _ = klsolver.solve_general(sm, s.delta_tilde)
    yield "general_solver", bool(np.max(np.abs(ref.full - sol.delta.full)) < CHECK_TOL), ""
    oracle = klsolver.brute_force_oracle(sm, s.delta_tilde)
    yield "descent_oracle", bool(np.max(np.abs(oracle.full - sol.delta.full)) < CHECK_TOL), ""
    d = sol.delta.full
    yield "weyl_bounds", linalg.weyl_bounds_check(sm.sigma_star, d), ""
    mode = s.mode
    if mode in ("baseline", "latent", "multidim", "learn_covariance"):
        yield "doom", sweep.check_doom(s, 20, seed), ""
        if s.n_misspecified > 1 or mode != "latent":
            yield "doom_negative_control", not sweep.check_doom(s, 20, seed, perturb="familiar"), ""
    if mode == "shock":
        yield "wdoom", sweep.check_wdoom_shock(s, 20, seed), ""
    if mode == "baseline" and sol.delta.metric_value != 0.0:
        yield "scaling", all(sweep.check_scaling(s, a) for a in (1.5, 2.0, 10.0)), ""
    if s.state_dim == 1 and draws > 1:
        est, se = behavior.monte_carlo_eu_gap(s, sol, seed, draws, antithetic=False)
        expected = behavior.welfare_gap(s, sol, sm).eu_gap
        yield "eu_gap_monte_carlo", abs(est - expected) <= 4 * se + 1e-12, f"estimate={_fmt(est)} se={_fmt(se)}"
    if mode == "learn_covariance":
        det_ok = abs(np.linalg.det(np.asarray(sol.sigma_hat)) - np.linalg.det(np.asarray(sm.sigma_star)) / sol.delta_factor)
        yield "determinant_identity", bool(det_ok < 1e-10 * max(1.0, np.linalg.det(np.asarray(sol.sigma_hat)))), ""
        dec = behavior.decompose_distortion(s, sol, seed, draws)
        yield "term_II_zero_mean", dec["term_II_within_4se"], f"mean={_fmt(dec['term_II_mean'])} se={_fmt(dec['term_II_se'])}"
        cross = behavior.monte_carlo_cross_terms(s, sol, seed, draws)
        yield "H_zero", abs(cross["H"]) <= 4 * cross["H_se"] + 1e-12, f"H={_fmt(cross['H'])} se={_fmt(cross['H_se'])}"
    else:
        trace = learner.run_convergence(s, None, seed, periods, [periods])
        lim = learner.limit_mean(s, sm, sol.delta)
        z = np.abs(trace.posterior_means[-1] - lim) / trace.final.sd
        yield "posterior_convergence", bool(np.all(z < 4.0)), f"max_z={_fmt(z.max())}"


def cmd_check(args) -> str:
    s = load_scenario(args.scenario)
    results = list(_run_checks(s, args.seed, args.draws, args.periods))
    if args.format == "json":
        text = json.dumps({"seed": args.seed, "mode": s.mode, "checks": {n: {"passed": bool(ok), "detail": d} for n, ok, d in results}}, indent=2) + "\n"
    else:
        lines = [f"# seed={args.seed}", f"# mode={s.mode}", "check,result,detail"]
        lines += [f"{n},{'pass' if ok else 'fail'},{d}" for n, ok, d in results]
        text = "\n".join(lines) + "\n"
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise _CheckFailed(f"failed checks: {', '.join(failed)}", output=text)
    return text


def cmd_portfolio(args) -> str:
    raw = _read_json(args.portfolio_spec)
    if not isinstance(raw, dict):
        raise ValidationError([("BAD_TYPE", "portfolio spec must be a JSON object")])
    ps = behavior.PortfolioScenario.from_dict(raw)
    rep = behavior.portfolio(ps)
    rows = [(n, v) for n, v, _ in rep.rows()]
    rows.append(("budget_binding", float(rep.budget_binding)))
    return _emit_rows(rows, args.seed, args.format)


_COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "check": cmd_check,
    "portfolio": cmd_portfolio,
}


def _write(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def _fail(code: str, msg: str, status: int) -> int:
    first_line = str(msg).splitlines()[0] if str(msg) else ""
    print(f"error[{code}]: {first_line}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return _fail("USAGE", str(exc), 1)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        text = _COMMANDS[args.command](args)
        _write(text, args.out)
        return 0
    except ValidationError as exc:
        return _fail(exc.code, str(exc), 1)
    except _CheckFailed as exc:
        try:
            _write(exc.output, args.out)
        except OSError:
            pass
        return _fail(exc.code, str(exc), 2)
    except NumericalError as exc:
        return _fail(exc.code, str(exc), 2)
    except FileNotFoundError as exc:
        return _fail("IO_NOT_FOUND", f"{exc.filename}: no such file", 3)
    except OSError as exc:
        return _fail("IO_ERROR", str(exc), 3)
    except SourceBiasError as exc:
        return _fail(exc.code, str(exc), 2)
    except ValueError as exc:
        return _fail("BAD_VALUE", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
