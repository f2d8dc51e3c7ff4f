"""Command line entry points.

  treeq fluid    --system sys.json --out fluid.json
  treeq hjb      --system sys.json --fluid fluid.json --cost cost.json
                 --grid grid.json --out value.bin,policy.bin
  treeq simulate --system sys.json --fluid fluid.json --policy pstar
                 --policy-file policy.bin --n 100 --horizon 50 --reps 200
                 --seed 7 --out runs.csv
  treeq sweep    --plan plan.json [--out-dir DIR] [--no-figures]

`sweep` exits 0 only when every audit passes.  TREEQ_WORKERS sets the
worker count for sweep cells when the plan does not.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import harness
from .control import load_markov_policy
from .costs import CostSpec, load_cost, zero_cost
from .errors import TreeqError
from .fluid import load_fluid
from .simulate import POLICY_NAMES, SimConfig, run_replication
from .system import load_system, validate

SIM_CSV_COLUMNS = (
    "rep", "n", "policy", "cost", "tail_bound", "sup_Mhat", "sup_J",
    "sup_Lambda", "theta_n_time", "events", "wall_ms",
)


def _fmt(v):
    if isinstance(v, float):
        v = float(v)  # normalize numpy scalars so repr stays plain
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def cmd_fluid(args) -> int:
    fluid = harness.solve_and_save_fluid(args.system, args.out)
    print(f"wrote {args.out}: rho*=1, c_g={fluid.c_g}, alpha0={fluid.alpha0}")
    return 0


def cmd_hjb(args) -> int:
    try:
        value_path, policy_path = args.out.split(",")
    except ValueError:
        print("hjb: --out expects value.bin,policy.bin", file=sys.stderr)
        return 2
    field_, _ = harness.solve_and_save_hjb(
        args.system, args.fluid, args.cost, args.grid, value_path, policy_path
    )
    print(
        f"wrote {value_path} and {policy_path}: residual={field_.residual:.3e}, "
        f"f(0)={field_.interpolate([0.0] * field_.dim)!r}"
    )
    return 0


def cmd_simulate(args) -> int:
    sysv = validate(load_system(args.system))
    fluid = load_fluid(args.fluid, sysv)
    markov = load_markov_policy(args.policy_file) if args.policy_file else None
    if args.cost:
        cost = load_cost(args.cost)
    elif args.policy_file:
        from .control import _read_blob

        header, _ = _read_blob(args.policy_file)
        cost_obj = (header.get("extra") or {}).get("cost")
        cost = CostSpec.from_json(cost_obj) if cost_obj else zero_cost()
    else:
        cost = zero_cost()

    config = SimConfig(
        sysv=sysv,
        fluid=fluid,
        cost=cost,
        n=args.n,
        horizon=args.horizon,
        seed=args.seed,
        policy=args.policy,
        markov=markov,
        mollify_eps=args.mollify_eps,
        x0_target=tuple(args.x0) if args.x0 else None,
        priority_order=tuple(v - 1 for v in args.priority_order)
        if args.priority_order
        else None,
        eps_diag=args.eps_diag,
    )
    lines = [",".join(SIM_CSV_COLUMNS)]
    for rep in range(args.reps):
        r = run_replication(config, rep)
        lines.append(",".join(_fmt(v) for v in (
            r.rep, r.n, r.policy, r.cost, r.tail_bound, r.sup_mhat, r.sup_j,
            r.sup_lambda, r.theta_time, r.events, r.wall_ms,
        )))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}: {args.reps} replications at n={args.n}")
    return 0


def cmd_sweep(args) -> int:
    with open(args.plan) as f:
        obj = json.load(f)
    plan = harness.ExperimentPlan.from_json(obj, base_dir=Path(args.plan).parent)
    report = harness.run_sweep(plan)
    out_dir = args.out_dir or obj.get("out_dir", "sweep_out")
    figures = None if not args.no_figures else False
    paths = harness.emit(report, out_dir, figures=figures)
    ok = all(report.audits.values())
    print(f"wrote {paths['summary']}")
    for name, verdict in sorted(report.verdicts.items()):
        print(f"  verdict {name}: {'yes' if verdict else 'no'}")
    for name, passed in sorted(report.audits.items()):
        print(f"  audit {name}: {'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treeq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fluid", help="solve the static fluid model")
    p.add_argument("--system", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fluid)

    p = sub.add_parser("hjb", help="solve the diffusion control equation")
    p.add_argument("--system", required=True)
    p.add_argument("--fluid", required=True)
    p.add_argument("--cost", required=True)
    p.add_argument("--grid", default=None)
    p.add_argument("--out", required=True, help="value.bin,policy.bin")
    p.set_defaults(func=cmd_hjb)

    p = sub.add_parser("simulate", help="run simulation replications")
    p.add_argument("--system", required=True)
    p.add_argument("--fluid", required=True)
    p.add_argument("--policy", required=True, choices=POLICY_NAMES)
    p.add_argument("--policy-file", default=None)
    p.add_argument("--cost", default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x0", type=float, nargs="*", default=None,
                   help="diffusion-scale initial deviation per class")
    p.add_argument("--mollify-eps", type=float, default=None)
    p.add_argument("--priority-order", type=int, nargs="*", default=None,
                   help="class labels (1-based), highest priority first")
    p.add_argument("--eps-diag", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a full experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TreeqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
