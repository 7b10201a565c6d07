"""Command-line interface (``nlbalance`` or ``python -m nlbalance``)."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys

import numpy as np

from . import harness, ode, stochastic, superposition
from .lattice import build_lattice, check_qs, extended_matrix, project_initial, upwind_matrix
from .measures import load_measure, prw_augmented, prw_direct
from .problem import SCENARIOS, choose_R, load_scenario_file, parse_scenario_spec

log = logging.getLogger("nlbalance")


def _emit(text: str, path: str | None) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--scenario", choices=SCENARIOS, help="catalog scenario name")
    g.add_argument("--scenario-file", help="JSON file with fields 'scenario' and 'overrides'")


def _resolve(args, **defaults):
    """Problem plus solver options; explicit flags beat file overrides, which beat defaults."""
    if args.scenario_file:
        problem, solver = load_scenario_file(args.scenario_file)
    else:
        problem, solver = parse_scenario_spec({"scenario": args.scenario})
    opts = dict(defaults)
    opts.update(solver)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return problem, opts


def cmd_prw(args) -> int:
    m1 = load_measure(args.first)
    m2 = load_measure(args.second)
    out = {}
    if args.method in ("direct", "both"):
        out["direct"] = prw_direct(m1, m2, args.b)
    if args.method in ("augmented", "both"):
        out["augmented"] = prw_augmented(m1, m2, args.b, args.R)
    if args.method == "both":
        out["difference"] = abs(out["direct"] - out["augmented"])
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_lattice_inspect(args) -> int:
    problem, o = _resolve(args, h=0.1, probes=1000, seed=0, t=0.0)
    lat = build_lattice(problem.domain, o["h"])
    report = check_qs(problem, lat, probes=o["probes"], seed=o["seed"])
    payload = {
        "scenario": problem.name,
        "lattice": {"n": lat.n, "dim": lat.dim, "h": lat.spacing, "fineness": lat.fineness,
                    "diameter": lat.diameter, "points": lat.points.tolist(),
                    "in_K": lat.in_K.astype(int).tolist()},
        "qs": report.as_dict(),
    }
    _emit(json.dumps(payload, indent=1) + "\n", args.out)
    if args.matrix_out:
        beta = project_initial(problem.initial, lat)
        if args.extended:
            M = extended_matrix(problem, lat, o["t"], beta, choose_R(problem))
        else:
            M = upwind_matrix(problem, lat, o["t"], beta)
        _emit(M.to_triplet_text(), args.matrix_out)
    return 0 if report.passed else 1


def cmd_solve_lattice(args) -> int:
    problem, o = _resolve(args, h=0.1, steps=None, R=None)
    lat = build_lattice(problem.domain, o["h"])
    steps = o["steps"] or ode.min_steps(problem, lat)
    beta0 = project_initial(problem.initial, lat)
    R = o["R"] or choose_R(problem)
    flow = ode.integrate(problem, lat, beta0, steps, extended=args.extended, R=R if args.extended else None)
    _emit(flow.to_csv(), args.out)
    return 0


def cmd_solve_particles(args) -> int:
    problem, o = _resolve(args, N=1000, steps=None, tol=None, max_iter=50, seed=0)
    res = superposition.picard_solve(problem, o["N"], o["steps"], o["tol"], o["max_iter"],
                                     start=args.start, sampling=args.sampling, seed=o["seed"])
    _emit(res.flow.to_csv(), args.out)
    resid = "iteration,residual\n" + "".join(f"{i + 1},{float(r)!r}\n" for i, r in enumerate(res.residuals))
    if args.residual_log:
        _emit(resid, args.residual_log)
    else:
        sys.stderr.write(resid)
    return 0


def _stats(samples: np.ndarray):
    samples = np.asarray(samples, float)
    mean = samples.mean(axis=0)
    if samples.shape[0] > 1:
        se = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    else:
        se = np.zeros_like(mean)
    return mean, se


def cmd_simulate_mc(args) -> int:
    problem, o = _resolve(args, h=0.1, N=10_000, steps=None, seed=0, replicas=1, R=None)
    lat = build_lattice(problem.domain, o["h"])
    R = o["R"] or choose_R(problem)
    steps = o["steps"] or harness.mc_steps(problem, o["h"], 1)
    runs = [stochastic.simulate_chain(problem, lat, o["N"], steps, R, seed=o["seed"] + r)
            for r in range(o["replicas"])]
    mean, se = _stats([r.flow.states for r in runs])
    n = lat.n
    lines = ["t,state,weight_mean,weight_stderr"]
    for k, t in enumerate(runs[0].flow.times):
        for j in range(n + 1):
            lines.append(f"{float(t)!r},{'*' if j == n else j},{float(mean[k, j])!r},{float(se[k, j])!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_simulate_coupled(args) -> int:
    problem, o = _resolve(args, h=0.1, N=10_000, steps=None, seed=0, replicas=1, R=None)
    lat = build_lattice(problem.domain, o["h"])
    R = o["R"] or choose_R(problem)
    steps = o["steps"] or harness.mc_steps(problem, o["h"], 1)
    eps = harness.epsilon_of(problem, o["h"])
    runs = [stochastic.simulate_coupled(problem, lat, o["N"], steps, R, seed=o["seed"] + r, epsilon=eps)
            for r in range(o["replicas"])]
    cols = {"gap": [r.gap for r in runs], "gap_regularized": [r.gap_regularized for r in runs],
            "mass_first": [r.mass_first for r in runs], "mass_second": [r.mass_second for r in runs]}
    stats = {k: _stats(v) for k, v in cols.items()}
    header = ["t"] + [f"{k}_{s}" for k in cols for s in ("mean", "stderr")]
    lines = [",".join(header)]
    for i, t in enumerate(runs[0].times):
        vals = [repr(float(t))]
        for k in cols:
            vals += [repr(float(stats[k][0][i])), repr(float(stats[k][1][i]))]
        lines.append(",".join(vals))
    _emit("\n".join(lines) + "\n", args.out)
    return 0


SLOPE_RANGE = (0.8, 1.2)


def cmd_convergence(args) -> int:
    problem, o = _resolve(args, h_list=None, ref_N=1000, ref_steps=None, b=None)
    h_list = o["h_list"] or [0.2, 0.1, 0.05, 0.025]
    if isinstance(h_list, str):
        h_list = [float(x) for x in h_list.split(",")]
    rep = harness.convergence_study(problem, h_list, ref_N=o["ref_N"], ref_steps=o["ref_steps"], b_param=o["b"])
    _emit(rep.to_csv(), args.out)
    if args.runtime_out:
        harness.write_sidecar(args.runtime_out, {"runtime_seconds": rep.runtimes()})
    failures = []
    transport = any(r.error_T > r.initial_error + 1e-6 for r in rep.rows)
    if transport and not SLOPE_RANGE[0] <= rep.slope <= SLOPE_RANGE[1]:
        failures.append(f"slope {rep.slope:.3f} outside {SLOPE_RANGE}")
    if not transport and any(r.error_T > r.initial_error + 1e-6 for r in rep.rows):
        failures.append("error exceeds the projection error")
    if len(rep.rows) >= 3 and rep.C_hat >= 2 * rep.C_hat_without_last():
        failures.append("C_hat more than doubled under the last halving of h")
    for f in failures:
        log.error(f)
    return 1 if failures else 0


def cmd_cross_validate(args) -> int:
    problem, o = _resolve(args, h=0.05, N=10_000, steps=None, seed=0, replicas=1, C_hat=1.0)
    seeds = tuple(range(o["seed"], o["seed"] + o["replicas"]))
    rep = harness.cross_validate(problem, o["h"], o["N"], o["steps"], seeds, C_hat=o["C_hat"])
    _emit(rep.to_csv(), args.out)
    sys.stderr.write(json.dumps({"masses": rep.masses, "ok": rep.ok}, sort_keys=True) + "\n")
    return 0 if rep.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlbalance", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prw", help="PRW distance between two measure files")
    s.add_argument("first")
    s.add_argument("second")
    s.add_argument("--b", type=float, required=True)
    s.add_argument("--R", type=float, default=None)
    s.add_argument("--method", choices=("direct", "augmented", "both"), default="both")
    s.set_defaults(func=cmd_prw)

    s = sub.add_parser("lattice", help="lattice utilities")
    lsub = s.add_subparsers(dest="lattice_command", required=True)
    s = lsub.add_parser("inspect", help="emit the lattice and its QS report")
    _add_scenario_args(s)
    s.add_argument("--h", type=float)
    s.add_argument("--probes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--t", type=float, help="time at which --matrix-out is evaluated")
    s.add_argument("--out")
    s.add_argument("--matrix-out", help="write the rate matrix at the projected initial weights as triplets")
    s.add_argument("--extended", action="store_true", help="export the matrix with the remote point")
    s.set_defaults(func=cmd_lattice_inspect)

    s = sub.add_parser("solve-lattice", help="integrate the lattice ODE")
    _add_scenario_args(s)
    s.add_argument("--h", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--R", type=float)
    s.add_argument("--extended", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve_lattice)

    s = sub.add_parser("solve-particles", help="Picard superposition solve")
    _add_scenario_args(s)
    s.add_argument("--N", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--start", choices=("frozen", "zero"), default="frozen")
    s.add_argument("--sampling", choices=("quantize", "iid"), default="quantize")
    s.add_argument("--out")
    s.add_argument("--residual-log")
    s.set_defaults(func=cmd_solve_particles)

    for name, func, helptext in (("simulate-mc", cmd_simulate_mc, "mean-field particle chain"),
                                 ("simulate-coupled", cmd_simulate_coupled, "coupled pair process")):
        s = sub.add_parser(name, help=helptext)
        _add_scenario_args(s)
        s.add_argument("--h", type=float)
        s.add_argument("--N", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--replicas", type=int)
        s.add_argument("--R", type=float)
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("convergence", help="error against epsilon(h) sweep")
    _add_scenario_args(s)
    s.add_argument("--h-list", dest="h_list", help="comma-separated, strictly decreasing")
    s.add_argument("--ref-N", dest="ref_N", type=int)
    s.add_argument("--ref-steps", dest="ref_steps", type=int)
    s.add_argument("--b", type=float)
    s.add_argument("--out")
    s.add_argument("--runtime-out", help="JSON sidecar for wall-clock runtimes")
    s.set_defaults(func=cmd_convergence)

    s = sub.add_parser("cross-validate", help="compare all three solvers")
    _add_scenario_args(s)
    s.add_argument("--h", type=float)
    s.add_argument("--N", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--replicas", type=int, help="number of chain seeds averaged")
    s.add_argument("--C-hat", dest="C_hat", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_cross_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 2
