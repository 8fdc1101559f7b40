"""Command-line front end.

Subcommands: synth, feas, bounds, sparsest, bench, simulate.  Results go
to stdout or the -o file as JSON/CSV; diagnostics go to stderr.  Exit
codes: 0 success, 1 solver-reported infeasibility, 2 usage or input
errors.
"""

import argparse
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import admm, analysis, bench, model
from .linalg import NotHurwitz, NotStabilizable
from .model import AdmmOptions, ParseError, UnsupportedFeature, ValidationError

SCHEMA_VERSION = 1


def _verbose():
    return os.environ.get("SPARSEGAIN_VERBOSE", "") not in ("", "0")


def _log(msg):
    if _verbose():
        print(msg, file=sys.stderr)


def _emit(payload, output_path):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if output_path:
        with open(output_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load(path):
    with open(path) as fh:
        text = fh.read()
    problem = model.load_problem(text)
    options = model.load_options(text)
    return problem, options


def _apply_overrides(options, args):
    updates = {}
    for cli_name, field_name in (
        ("lam", "lam"), ("rho", "penalty_rho"), ("delta", "reweight_delta"),
        ("eps_star", "eps_star"), ("max_outer", "max_outer"),
        ("inner_tol", "inner_tol"), ("inner_max", "inner_max"),
        ("truncation", "truncation_mode"), ("xi", "manual_xi"),
    ):
        value = getattr(args, cli_name, None)
        if value is not None and field_name != "lam":
            updates[field_name] = value
    return replace(options, **updates) if updates else options


def _matrix(m):
    return np.asarray(m).tolist()


def cmd_synth(args):
    problem, options = _load(args.problem)
    options = _apply_overrides(options, args)
    if args.lam is not None:
        problem = replace(problem, lam=float(args.lam))
    _log(f"synth: n={problem.system.n} m={problem.system.m} p={problem.system.p} "
         f"lambda={problem.lam} rho={options.penalty_rho}")
    try:
        result = admm.run(problem, options, log_path=args.iter_log)
    except (admm.Unstabilizable, NotStabilizable, analysis.InfeasibleProblem) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return 1
    payload = {
        "schema": SCHEMA_VERSION,
        "k_dense": _matrix(result.k_dense),
        "k_truncated": _matrix(result.k_truncated),
        "j_achieved": result.j_achieved,
        "j_baseline": result.j_baseline,
        "density": result.density,
        "stability_margin": result.stability_margin,
        "xi_bound": result.xi_bound if np.isfinite(result.xi_bound) else None,
        "converged": result.converged,
        "iterations": result.iterations,
    }
    _emit(payload, args.output)
    return 0


def cmd_feas(args):
    problem, options = _load(args.problem)
    options = _apply_overrides(options, args)
    report = analysis.feasibility_test(problem.system, problem.pattern, options)
    payload = {"schema": SCHEMA_VERSION}
    payload.update(report.to_dict())
    payload["objective"] = (report.objective
                            if np.isfinite(report.objective) else None)
    _emit(payload, args.output)
    return 0 if report.verdict == "Feasible" else 1


def cmd_bounds(args):
    problem, options = _load(args.problem)
    options = _apply_overrides(options, args)
    try:
        report = analysis.bounds(problem, options)
    except analysis.InfeasibleProblem as exc:
        print(f"bounds failed: {exc}", file=sys.stderr)
        return 1
    payload = {"schema": SCHEMA_VERSION}
    payload.update(report.to_dict())
    _emit(payload, args.output)
    return 0


def cmd_sparsest(args):
    problem, options = _load(args.problem)
    options = _apply_overrides(options, args)
    try:
        gain, cardinality = analysis.sparsest_controller(
            problem.system, problem.pattern, options, seed=args.seed)
    except (analysis.InfeasibleProblem, analysis.HeuristicFailure) as exc:
        print(f"sparsest search failed: {exc}", file=sys.stderr)
        return 1
    payload = {
        "schema": SCHEMA_VERSION,
        "k": _matrix(gain),
        "cardinality": cardinality,
    }
    _emit(payload, args.output)
    return 0


def cmd_bench(args):
    if args.lattice is None and args.spatial is None:
        print("bench requires --lattice SIDE or --spatial N", file=sys.stderr)
        return 2
    if args.lattice is not None:
        system = bench.gen_lattice(args.lattice, args.seed)
    else:
        system = bench.gen_spatial_decay(args.spatial, seed=args.seed)
    n = system.n
    problem = model.SynthesisProblem(
        system=system, q_weight=np.eye(n), r_weight=args.r_scale * np.eye(system.m),
        lam=0.0, noise_cov=np.eye(n))
    options = _apply_overrides(AdmmOptions(), args)
    if args.lambda_grid:
        lam_grid = [float(v) for v in args.lambda_grid.split(",")]
    else:
        lam_grid = [args.lam if args.lam is not None else 10.0]
    if args.rho_grid:
        rho_grid = [float(v) for v in args.rho_grid.split(",")]
    else:
        rho_grid = [args.rho if args.rho is not None else 100.0]
    _log(f"bench: n={n} grid={len(lam_grid)}x{len(rho_grid)} jobs={args.jobs}")
    rows = bench.sweep(problem, lam_grid, rho_grid, options, jobs=args.jobs)
    text = bench.sweep_csv(rows)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return 0


def cmd_simulate(args):
    problem, _ = _load(args.problem)
    with open(args.gain) as fh:
        gain_data = json.load(fh)
    key = "k_truncated" if "k_truncated" in gain_data else "k"
    k = np.array(gain_data[key], dtype=float)
    if problem.input_bound is not None:
        x0 = problem.input_bound.x0
    else:
        x0 = bench.default_x0(problem.system.n, args.seed)
    try:
        j, sup2, supinf = bench.simulate_closed_loop(
            problem.system, k, x0, horizon=args.horizon, dt=args.dt,
            q_weight=problem.q_weight, r_weight=problem.r_weight)
    except (NotHurwitz, bench.StepTooLarge) as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return 1
    _emit({
        "schema": SCHEMA_VERSION,
        "j_quadrature": j,
        "sup_u_2": sup2,
        "sup_u_inf": supinf,
    }, args.output)
    return 0


def _add_common(sub):
    sub.add_argument("-o", "--output", default=None, help="result file (default stdout)")
    sub.add_argument("--lambda", dest="lam", type=float, default=None,
                     help="sparsity weight override")
    sub.add_argument("--rho", type=float, default=None, help="penalty override")
    sub.add_argument("--delta", type=float, default=None, help="reweighting offset")
    sub.add_argument("--eps-star", dest="eps_star", type=float, default=None,
                     help="outer stopping threshold")
    sub.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    sub.add_argument("--inner-tol", dest="inner_tol", type=float, default=None)
    sub.add_argument("--inner-max", dest="inner_max", type=int, default=None)
    sub.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparsegain",
        description="Sparse static output-feedback gain synthesis.")
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="synthesize a sparse gain")
    synth.add_argument("problem", help="problem JSON file")
    synth.add_argument("--truncation", choices=["certified", "l0_threshold", "manual"],
                       default=None)
    synth.add_argument("--xi", type=float, default=None, help="manual truncation level")
    synth.add_argument("--iter-log", default=None, help="CSV iteration log path")
    _add_common(synth)
    synth.set_defaults(func=cmd_synth)

    feas = subs.add_parser("feas", help="structured stabilizability test")
    feas.add_argument("problem")
    _add_common(feas)
    feas.set_defaults(func=cmd_feas)

    bounds_p = subs.add_parser("bounds", help="lower/upper cost bounds")
    bounds_p.add_argument("problem")
    _add_common(bounds_p)
    bounds_p.set_defaults(func=cmd_bounds)

    sparsest = subs.add_parser("sparsest", help="sparsest stabilizing gain")
    sparsest.add_argument("problem")
    _add_common(sparsest)
    sparsest.set_defaults(func=cmd_sparsest)

    bench_p = subs.add_parser("bench", help="generator-driven sweep")
    bench_p.add_argument("--lattice", type=int, default=None, help="lattice side")
    bench_p.add_argument("--spatial", type=int, default=None, help="decaying system size")
    bench_p.add_argument("--r-scale", dest="r_scale", type=float, default=10.0)
    bench_p.add_argument("--lambda-grid", dest="lambda_grid", default=None,
                         help="comma-separated lambda grid")
    bench_p.add_argument("--rho-grid", dest="rho_grid", default=None,
                         help="comma-separated rho grid")
    bench_p.add_argument("--jobs", type=int, default=1)
    _add_common(bench_p)
    bench_p.set_defaults(func=cmd_bench)

    sim = subs.add_parser("simulate", help="closed-loop simulation of a gain file")
    sim.add_argument("problem")
    sim.add_argument("--gain", required=True, help="JSON file with k/k_truncated")
    sim.add_argument("--horizon", type=float, default=None)
    sim.add_argument("--dt", type=float, default=None)
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)
    return parser


def dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ParseError, ValidationError, UnsupportedFeature, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
