"""Command-line front end.

Exit status is 0 on success, 2 on bad arguments and 1 on domain errors (the
error class name is printed on stderr).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import dynamics, experiments, strategies
from .model import ControlPlan, Ensemble, MigrationError, Piece, canonical_order, project

STRATEGIES = ("zero", "instant", "full", "inactivation", "integral")


# --------------------------------------------------------------------------
# Initial conditions


def read_init(text: str):
    """Parse an initial-condition CSV.

    A header of ``xi_1..xi_N`` with one data row gives projections.  A header
    ``x_1..x_d, v_1..v_d`` with one row per agent gives a full ensemble with
    target velocity 0.
    """
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if len(rows) < 2:
        raise ValueError("initial-condition file needs a header and data")
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    if all(h.startswith("xi_") for h in header):
        return data.reshape(-1)
    xcols = [i for i, h in enumerate(header) if h == "x" or h.startswith("x_")]
    vcols = [i for i, h in enumerate(header) if h == "v" or h.startswith("v_")]
    if not xcols or len(xcols) != len(vcols) or len(header) != 2 * len(xcols):
        raise ValueError(f"unrecognized initial-condition header {header}")
    return Ensemble(data[:, xcols], data[:, vcols], np.zeros(len(vcols)))


def write_init(init) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if isinstance(init, Ensemble):
        d = init.dim
        w.writerow([f"x_{k + 1}" for k in range(d)] + [f"v_{k + 1}" for k in range(d)])
        for x, v in zip(init.positions, init.velocities - init.target):
            w.writerow([f"{y:.17g}" for y in np.concatenate([x, v])])
    else:
        xi = np.asarray(init, dtype=float)
        w.writerow([f"xi_{i + 1}" for i in range(xi.size)])
        w.writerow([f"{y:.17g}" for y in xi])
    return buf.getvalue()


def load_init(source: str, n: int, dim: int, seed: int):
    if source == "random":
        rng = np.random.default_rng(seed)
        if dim <= 0:
            return rng.permutation(experiments.sample_initial(n, rng))
        v = rng.uniform(-1.0, 1.0, size=(n, dim))
        return Ensemble(np.zeros((n, dim)), v, np.zeros(dim))
    if source.startswith("file:"):
        return read_init(Path(source[5:]).read_text())
    raise argparse.ArgumentTypeError(f"--init must be 'random' or 'file:PATH', got {source!r}")


def projections(init) -> np.ndarray:
    return project(init).xi if isinstance(init, Ensemble) else np.asarray(init, dtype=float)


# --------------------------------------------------------------------------
# Plans


def permute_plan(plan: ControlPlan, perm) -> ControlPlan:
    """Re-index constant pieces from canonical order to original agent order."""
    perm = np.asarray(perm)
    pieces = []
    for p in plan.pieces:
        if p.is_feedback:
            pieces.append(p)
            continue
        a = np.empty(perm.size)
        a[perm] = p.alpha
        pieces.append(Piece(p.t0, p.t1, p.rule, tuple(a), p.block))
    return ControlPlan(plan.budget, plan.horizon, tuple(pieces))


def build_plan(strategy: str, xi_sorted, budget: float, horizon: float) -> ControlPlan:
    n = xi_sorted.size
    if strategy == "zero":
        return ControlPlan(budget, horizon, (Piece(0.0, horizon, "constant", (0.0,) * n),))
    if strategy == "instant":
        return ControlPlan(budget, horizon, (Piece(0.0, horizon, "instant"),))
    if strategy == "integral":
        return ControlPlan(budget, horizon, (Piece(0.0, horizon, "integral"),))
    if strategy == "full":
        return strategies.full_control_plan(xi_sorted, horizon, budget).to_control_plan()
    if strategy == "inactivation":
        scan = strategies.inactivation_scan(xi_sorted, horizon, budget=budget)
        return strategies.inactivation_plan(xi_sorted, horizon, scan.delta, budget).to_control_plan()
    raise ValueError(f"unknown strategy {strategy!r}")


# --------------------------------------------------------------------------
# Output helpers


def emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def figures_dir(args):
    if not getattr(args, "figures", None):
        return None
    path = Path(args.figures)
    path.mkdir(parents=True, exist_ok=True)
    return path


def csv_floats(text: str):
    return [float(x) for x in text.split(",") if x.strip()]


def csv_ints(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


# --------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args):
    init = load_init(args.init, args.n, args.dim, args.seed)
    if args.strategy.startswith("plan:"):
        plan = ControlPlan.from_json(Path(args.strategy[5:]).read_text())
        perm = None
    elif args.strategy in STRATEGIES:
        state, perm = canonical_order(projections(init))
        plan = permute_plan(build_plan(args.strategy, state.xi, args.m, args.horizon), perm)
    else:
        raise argparse.ArgumentTypeError(f"unknown strategy {args.strategy!r}")
    if isinstance(init, Ensemble):
        traj = dynamics.simulate_full(init, plan, args.dt)
    else:
        traj = dynamics.simulate(np.asarray(init, dtype=float), plan, args.dt)
    emit(dynamics.trajectory_to_csv(traj), args.out)
    figs = figures_dir(args)
    if figs:
        from . import plotting
        plotting.plot_trajectory(traj, figs / "trajectory.png")
    return 0


def cmd_plan2(args):
    regime, plan = strategies.two_agent_plan((args.xi1, args.xi2), args.m, args.horizon)
    emit(dump_json({"regime": regime.to_dict(), "plan": plan.to_dict()}), args.out)
    return 0


def cmd_stages(args):
    state, perm = canonical_order(projections(load_init(args.init, args.n, 0, args.seed)))
    times = strategies.staged_switch_times(state.xi, budget=args.m)
    emit(dump_json({"switch_times": times.tolist(), "order": (perm + 1).tolist(), "budget": args.m}),
         args.out)
    return 0


def cmd_scan_delta(args):
    state, _ = canonical_order(projections(load_init(args.init, args.n, 0, args.seed)))
    res = strategies.inactivation_scan(state.xi, args.horizon, args.grid, args.m)
    emit(dump_json({"delta": res.delta, "V_delta": res.v_delta, "V_fc": res.v_fc,
                    "R": strategies.variance_ratio(state.xi)}), args.out)
    figs = figures_dir(args)
    if figs:
        from . import plotting
        d = np.linspace(0.0, args.horizon, args.grid)
        v = strategies.inactivation_value(state.xi, args.horizon, d, args.m)
        plotting.plot_delta_scan(d, v, figs / "delta_scan.png", res.delta)
    return 0


def cmd_pmp_check(args):
    traj = dynamics.trajectory_from_csv(Path(args.traj).read_text(), budget=args.m)
    if args.cost == "final":
        costate = dynamics.integrate_costate_final(traj)
    else:
        costate = dynamics.integrate_costate_integral(traj)
    report = dynamics.check_pmp_consistency(traj, costate, args.tol)
    emit(dump_json(report.to_dict()), args.out)
    return 0


def cmd_table(args):
    run = experiments.table1_experiment if args.command == "table1" else experiments.table2_experiment
    reports = run(csv_ints(args.agents), csv_floats(args.horizons), args.trials, args.seed,
                  args.grid, args.threads)
    emit(experiments.reports_to_csv(reports, args.command), args.out)
    if args.json:
        Path(args.json).write_text(experiments.reports_to_json(reports, args.command))
    figs = figures_dir(args)
    if figs:
        from . import plotting
        plotting.plot_table(reports, figs / f"{args.command}.png", args.command)
    return 0


def cmd_ratio(args):
    pairs = experiments.ratio_study(args.n, args.horizon, args.trials, args.seed, args.grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "R", "delta"])
    for k, (r, d) in enumerate(pairs):
        w.writerow([k, f"{r:.17g}", f"{d:.17g}"])
    emit(buf.getvalue(), args.out)
    figs = figures_dir(args)
    if figs:
        from . import plotting
        plotting.plot_ratio(pairs, figs / "ratio.png")
    return 0


def cmd_oracle(args):
    state, _ = canonical_order(projections(load_init(args.init, args.n, 0, args.seed)))
    res = experiments.brute_force_oracle(state.xi, args.m, args.horizon, args.pieces,
                                         args.samples, args.seed)
    emit(dump_json(res.to_dict()), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="migractl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def init_opts(p, full=False):
        p.add_argument("--init", default="random", help="'random' or 'file:PATH'")
        p.add_argument("--n", type=int, default=5, help="agents for random init")
        p.add_argument("--seed", type=int, default=0)
        if full:
            p.add_argument("--dim", type=int, default=0, help="0 for projected mode, d >= 1 for full")

    def out_opt(p):
        p.add_argument("--out", default=None, help="output file (default stdout)")

    p = sub.add_parser("simulate", help="integrate one trajectory and write CSV")
    init_opts(p, full=True)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--dt", type=float, default=dynamics.DEFAULT_STEP)
    p.add_argument("--strategy", default="zero", help=f"{'|'.join(STRATEGIES)}|plan:FILE")
    p.add_argument("--figures", default=None, help="directory for PNG figures")
    out_opt(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan2", help="two-agent regime and plan")
    p.add_argument("--xi1", type=float, required=True)
    p.add_argument("--xi2", type=float, required=True)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--horizon", type=float, required=True)
    out_opt(p)
    p.set_defaults(func=cmd_plan2)

    p = sub.add_parser("stages", help="switch times of the staged plan")
    init_opts(p)
    p.add_argument("--m", type=float, default=1.0)
    out_opt(p)
    p.set_defaults(func=cmd_stages)

    p = sub.add_parser("scan-delta", help="optimal inactivation delay")
    init_opts(p)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--grid", type=int, default=512)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--figures", default=None)
    out_opt(p)
    p.set_defaults(func=cmd_scan_delta)

    p = sub.add_parser("pmp-check", help="maximum-principle check of a trajectory CSV")
    p.add_argument("--traj", required=True)
    p.add_argument("--cost", choices=("final", "integral"), default="final")
    p.add_argument("--m", type=float, default=None, help="budget (default: max row sum)")
    p.add_argument("--tol", type=float, default=1e-6)
    out_opt(p)
    p.set_defaults(func=cmd_pmp_check)

    for name in ("table1", "table2"):
        p = sub.add_parser(name, help="Monte Carlo grid over agents and horizons")
        p.add_argument("--agents", default="5,10,20,50")
        p.add_argument("--horizons", default="3,4,5,6,7")
        p.add_argument("--trials", type=int, default=1000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--grid", type=int, default=512)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--json", default=None, help="also write full JSON report here")
        p.add_argument("--figures", default=None)
        out_opt(p)
        p.set_defaults(func=cmd_table)

    p = sub.add_parser("ratio", help="per-trial variance ratio and optimal delay")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=512)
    p.add_argument("--figures", default=None)
    out_opt(p)
    p.set_defaults(func=cmd_ratio)

    p = sub.add_parser("oracle", help="brute-force comparison against analytic plans")
    init_opts(p)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--pieces", type=int, default=6)
    p.add_argument("--samples", type=int, default=10_000)
    out_opt(p)
    p.set_defaults(func=cmd_oracle)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MigrationError, ValueError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
