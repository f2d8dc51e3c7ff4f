"""End-to-end experiment harness: solve the fluid model and the control
equation, sweep the simulator over scales and policies, compare scaled
costs against the diffusion value, and emit machine-readable reports.

Outputs per sweep:
  replications.csv -- one row per (n, policy, rep); no wall-clock columns,
                      so reruns with the same plan and seed are
                      byte-identical
  cells.csv        -- per-(n, policy) aggregates and diagnostics medians
  summary.json     -- config echo, artifact hashes, value reference, gap
                      and trend verdicts, audit results
  *.png            -- cost and diagnostics figures (CSV remains the
                      contract; figures are a convenience and excluded
                      from the byte-identical guarantee)
"""
from __future__ import annotations

import concurrent.futures
import hashlib
import json
import math
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .control import (
    DriftData,
    GridConfig,
    MarkovPolicy,
    ValueField,
    choose_horizon,
    load_grid,
    mollify_policy,
    save_markov_policy,
    save_value_field,
    solve_hjb,
    verify_policy_margin,
)
from .costs import CostSpec, load_cost
from .errors import HypothesisViolated, IoFailure, SchemaError
from .fluid import StaticFluid, save_fluid, solve_static_fluid
from .simulate import CostReport, SimConfig, initial_gap, run_replication
from .system import SystemSpec, ValidatedSystem, load_system, validate

TRACKING_POLICIES = ("pstar", "pprime", "ppp")
REPLICATION_COLUMNS = (
    "rep", "n", "policy", "cost", "tail_bound", "sup_Mhat", "sup_J",
    "sup_Lambda", "theta_n_time", "events",
)
CELL_COLUMNS = (
    "n", "policy", "reps", "mean_cost", "se_cost", "gap", "median_sup_J",
    "median_sup_Mhat", "median_sup_Lambda", "theta_freq", "mean_events",
    "max_recon_residual", "preemptions", "blocked_routings",
)


@dataclass(frozen=True)
class ExperimentPlan:
    """Sweep definition.  `x0` is the diffusion-scale initial deviation the
    integer initial conditions target at every n.  `seed` keys every
    replication stream as (seed, rep), shared across policies and scales so
    policy comparisons ride common random numbers.  `priority_order` lists
    1-based class labels, highest priority first, matching the system file
    labeling."""

    system: SystemSpec
    cost: CostSpec
    grid: GridConfig
    n_list: tuple
    replications: int
    x0: tuple
    policies: tuple
    seed: int
    horizon: float = None
    tail_tol: float = 0.005
    eps_diag: float = 1.0
    mollify_eps: float = 0.25
    mollify_delta: float = 0.5
    margin_radius: float = 3.0
    priority_order: tuple = None
    workers: int = None
    figures: bool = True
    echo: dict = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.n_list) != len(set(self.n_list)) or list(self.n_list) != sorted(self.n_list):
            raise SchemaError("n list must be strictly increasing")
        if self.replications < 2:
            raise SchemaError("need at least 2 replications for a standard error")
        for p in self.policies:
            if p not in ("pstar", "pprime", "ppp", "fifo", "priority"):
                raise SchemaError(f"unknown policy {p!r}")
        if self.priority_order is not None:
            labels = sorted(self.priority_order)
            if labels != list(range(1, self.system.num_classes + 1)):
                raise SchemaError(
                    f"priority order {self.priority_order} must list the class "
                    f"labels 1..{self.system.num_classes}"
                )

    @classmethod
    def from_json(cls, obj: dict, base_dir=".") -> "ExperimentPlan":
        if obj.get("schema") != 1:
            raise SchemaError(f"unsupported plan schema {obj.get('schema')!r}")
        base = Path(base_dir)
        system = load_system(base / obj["system"])
        cost = load_cost(base / obj["cost"])
        grid = load_grid(base / obj["grid"]) if "grid" in obj else GridConfig()
        return cls(
            system=system,
            cost=cost,
            grid=grid,
            n_list=tuple(int(v) for v in obj["n_list"]),
            replications=int(obj["replications"]),
            x0=tuple(float(v) for v in obj["x0"]),
            policies=tuple(obj["policies"]),
            seed=int(obj["seed"]),
            horizon=obj.get("horizon"),
            tail_tol=float(obj.get("tail_tol", 0.005)),
            eps_diag=float(obj.get("eps_diag", 1.0)),
            mollify_eps=float(obj.get("mollify_eps", 0.25)),
            mollify_delta=float(obj.get("mollify_delta", 0.5)),
            margin_radius=float(obj.get("margin_radius", 3.0)),
            priority_order=tuple(obj["priority_order"]) if obj.get("priority_order") else None,
            workers=obj.get("workers"),
            figures=bool(obj.get("figures", True)),
            echo=obj,
        )


@dataclass
class SweepReport:
    plan: ExperimentPlan
    v_ref: float
    horizon: float
    rows: list          # CostReport, sorted by (n, policy order, rep)
    cells: list         # dicts with CELL_COLUMNS keys
    verdicts: dict
    audits: dict
    artifacts: dict     # name -> sha256
    b0: dict            # tracking policy -> threshold used
    margin: dict        # mollified-margin check outcome


# ---------------------------------------------------------------------------
# sweep execution
# ---------------------------------------------------------------------------

def _worker_count(plan: ExperimentPlan) -> int:
    if plan.workers is not None:
        return max(1, int(plan.workers))
    env = os.environ.get("TREEQ_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def _run_chunk(args):
    config, reps = args
    return [run_replication(config, rep) for rep in reps]


def plan_initial_conditions(x, fluid: StaticFluid, sysv: ValidatedSystem, n: int,
                            markov: MarkovPolicy = None):
    """Integer initial populations and arrangement targeting deviation x."""
    from .simulate import initial_conditions

    return initial_conditions(sysv, fluid, n, x_target=x, markov=markov)


def _policy_artifacts(plan: ExperimentPlan, sysv: ValidatedSystem, fluid: StaticFluid):
    """Solve the control problem and prepare per-policy feedback maps."""
    d = DriftData.from_system(sysv, fluid)
    field_, h_star = solve_hjb(sysv, fluid, plan.cost, plan.grid, d)
    margin = {}
    h_eps = None
    if "ppp" in plan.policies:
        h_eps = mollify_policy(h_star, plan.mollify_eps)
        worst, ok = verify_policy_margin(
            field_, h_eps, d, plan.cost, plan.margin_radius, plan.mollify_delta
        )
        margin = {
            "eps": plan.mollify_eps,
            "delta": plan.mollify_delta,
            "radius": plan.margin_radius,
            "worst": worst,
            "ok": bool(ok),
        }
        if not ok:
            raise HypothesisViolated(
                f"mollified feedback exceeds the pointwise margin: worst "
                f"{worst:.3e} > delta {plan.mollify_delta}"
            )
    return d, field_, h_star, h_eps, margin


def run_sweep(plan: ExperimentPlan) -> SweepReport:
    """Execute the full experiment described by the plan."""
    sysv = validate(plan.system)
    fluid = solve_static_fluid(sysv)
    d, field_, h_star, h_eps, margin = _policy_artifacts(plan, sysv, fluid)
    v_ref = field_.interpolate(plan.x0)
    horizon = plan.horizon or choose_horizon(plan.cost, plan.system.gamma, plan.tail_tol)

    def base_config(n, policy, b0=None):
        return SimConfig(
            sysv=sysv,
            fluid=fluid,
            cost=plan.cost,
            n=n,
            horizon=horizon,
            seed=plan.seed,
            policy=policy,
            markov=h_star if policy in TRACKING_POLICIES else None,
            mollify_eps=plan.mollify_eps if policy == "ppp" else None,
            x0_target=plan.x0,
            b0=b0,
            priority_order=tuple(v - 1 for v in plan.priority_order)
            if plan.priority_order
            else None,
            eps_diag=plan.eps_diag,
        )

    # switch thresholds: computed from the initial gaps across every
    # configured scale, before any run starts
    b0 = {}
    for policy in plan.policies:
        if policy in ("pprime", "ppp"):
            gaps = [initial_gap(base_config(n, policy)) for n in plan.n_list]
            b0[policy] = 2.0 + max(gaps)

    tasks = []
    for n in plan.n_list:
        for policy in plan.policies:
            config = base_config(n, policy, b0=b0.get(policy))
            reps = list(range(plan.replications))
            workers = _worker_count(plan)
            chunk = max(1, math.ceil(len(reps) / max(1, workers * 3)))
            for k in range(0, len(reps), chunk):
                tasks.append((config, reps[k : k + chunk]))

    workers = _worker_count(plan)
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            chunk_results = list(pool.map(_run_chunk, tasks))
    else:
        chunk_results = [_run_chunk(t) for t in tasks]
    rows = [r for chunk in chunk_results for r in chunk]
    order = {p: k for k, p in enumerate(plan.policies)}
    rows.sort(key=lambda r: (r.n, order[r.policy], r.rep))

    cells = _aggregate(plan, rows, v_ref)
    verdicts = _verdicts(plan, cells)
    audits = _audits(plan, rows)
    artifacts = {
        "fluid_sha256": hashlib.sha256(
            json.dumps(fluid.to_json(sysv), sort_keys=True).encode()
        ).hexdigest(),
        "value_sha256": hashlib.sha256(field_.values.tobytes()).hexdigest(),
        "policy_sha256": hashlib.sha256(h_star.table.tobytes()).hexdigest(),
    }
    return SweepReport(
        plan=plan,
        v_ref=v_ref,
        horizon=horizon,
        rows=rows,
        cells=cells,
        verdicts=verdicts,
        audits=audits,
        artifacts=artifacts,
        b0=b0,
        margin=margin,
    )


def _aggregate(plan, rows, v_ref):
    cells = []
    for n in plan.n_list:
        for policy in plan.policies:
            grp = [r for r in rows if r.n == n and r.policy == policy]
            if not grp:
                continue
            costs = [r.cost for r in grp]
            mean = statistics.fmean(costs)
            se = statistics.stdev(costs) / math.sqrt(len(costs))
            cells.append({
                "n": n,
                "policy": policy,
                "reps": len(grp),
                "mean_cost": mean,
                "se_cost": se,
                "gap": float(mean - v_ref),
                "median_sup_J": _median([r.sup_j for r in grp]),
                "median_sup_Mhat": _median([r.sup_mhat for r in grp]),
                "median_sup_Lambda": _median([r.sup_lambda for r in grp]),
                "theta_freq": statistics.fmean(
                    [0.0 if math.isnan(r.theta_time) else 1.0 for r in grp]
                ),
                "mean_events": statistics.fmean([r.events for r in grp]),
                "max_recon_residual": float(max(r.recon_residual for r in grp)),
                "preemptions": sum(r.preemptions for r in grp),
                "blocked_routings": sum(r.blocked_routings for r in grp),
            })
    return cells


def _median(vals):
    clean = [v for v in vals if not math.isnan(v)]
    return statistics.median(clean) if clean else math.nan


def _cell(cells, n, policy):
    for c in cells:
        if c["n"] == n and c["policy"] == policy:
            return c
    return None


def _verdicts(plan, cells):
    """Trend and consistency flags with overlapping-interval logic: Monte
    Carlo noise makes strict ordering flaky, so comparisons allow two
    combined standard errors."""
    n_lo, n_hi = plan.n_list[0], plan.n_list[-1]
    verdicts = {}
    for policy in ("pstar", "pprime"):
        lo, hi = _cell(cells, n_lo, policy), _cell(cells, n_hi, policy)
        if lo and hi:
            slack = 2.0 * math.hypot(lo["se_cost"], hi["se_cost"])
            verdicts[f"gap_trend_{policy}"] = bool(
                abs(hi["gap"]) <= abs(lo["gap"]) + slack
            )
    star = _cell(cells, n_hi, "pstar")
    if star:
        for policy in ("fifo", "priority"):
            base = _cell(cells, n_hi, policy)
            if base:
                slack = 2.0 * math.hypot(star["se_cost"], base["se_cost"])
                verdicts[f"baseline_{policy}_not_better"] = bool(
                    base["mean_cost"] >= star["mean_cost"] - slack
                )
        prime = _cell(cells, n_hi, "pprime")
        if prime:
            slack = 2.0 * math.hypot(star["se_cost"], prime["se_cost"])
            verdicts["preemptive_nonpreemptive_equivalent"] = bool(
                abs(prime["mean_cost"] - star["mean_cost"]) <= slack
            )
    for policy in ("pstar", "pprime"):
        series_j = [
            _cell(cells, n, policy)["median_sup_J"]
            for n in plan.n_list
            if _cell(cells, n, policy)
        ]
        if len(series_j) == len(plan.n_list) and series_j:
            verdicts[f"sup_J_nonincreasing_{policy}"] = bool(
                all(a >= b - 1e-12 for a, b in zip(series_j, series_j[1:]))
            )
        series_m = [
            _cell(cells, n, policy)["median_sup_Mhat"]
            for n in plan.n_list
            if _cell(cells, n, policy)
        ]
        if len(series_m) == len(plan.n_list) and series_m:
            verdicts[f"sup_Mhat_nonincreasing_{policy}"] = bool(
                all(a >= b - 1e-12 for a, b in zip(series_m, series_m[1:]))
            )
    for policy in ("pprime", "ppp"):
        series_t = [
            _cell(cells, n, policy)["theta_freq"]
            for n in plan.n_list
            if _cell(cells, n, policy)
        ]
        if len(series_t) == len(plan.n_list) and series_t:
            verdicts[f"theta_freq_nonincreasing_{policy}"] = bool(
                all(a >= b - 1e-12 for a, b in zip(series_t, series_t[1:]))
            )
    return verdicts


def _audits(plan, rows):
    """Hard legality audits; a sweep exits nonzero unless all pass."""
    nonpreemptive = [r for r in rows if r.policy in ("pprime", "ppp", "fifo", "priority")]
    audits = {
        "no_preemptions_under_nonpreemptive": all(r.preemptions == 0 for r in nonpreemptive),
        "no_blocked_routings": all(r.blocked_routings == 0 for r in rows),
        "path_reconstruction_1e-9": all(r.recon_residual <= 1e-9 for r in rows),
    }
    return audits


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        v = float(v)  # normalize numpy scalars so repr stays plain
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def replication_csv_rows(rows):
    yield ",".join(REPLICATION_COLUMNS)
    for r in rows:
        yield ",".join(_fmt(v) for v in (
            r.rep, r.n, r.policy, r.cost, r.tail_bound, r.sup_mhat, r.sup_j,
            r.sup_lambda, r.theta_time, r.events,
        ))


def cells_csv_rows(cells):
    yield ",".join(CELL_COLUMNS)
    for c in cells:
        yield ",".join(_fmt(c[k]) for k in CELL_COLUMNS)


def emit(report: SweepReport, out_dir, figures=None) -> dict:
    """Write the sweep outputs; returns a name -> path map.

    Raises IoFailure on any filesystem error.  Every number in the summary
    is recomputable from replications.csv; emit re-parses what it wrote and
    cross-checks the aggregates as a self-audit.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {}

        rep_path = out / "replications.csv"
        rep_path.write_text("\n".join(replication_csv_rows(report.rows)) + "\n")
        paths["replications"] = str(rep_path)

        cell_path = out / "cells.csv"
        cell_path.write_text("\n".join(cells_csv_rows(report.cells)) + "\n")
        paths["cells"] = str(cell_path)

        report.audits["mean_se_recomputable"] = _recompute_audit(report, rep_path)

        summary = {
            "schema": 1,
            "plan": report.plan.echo or _plan_echo(report.plan),
            "v_ref": report.v_ref,
            "horizon": report.horizon,
            "b0": report.b0,
            "margin": report.margin,
            "cells": report.cells,
            "verdicts": report.verdicts,
            "audits": report.audits,
            "artifacts": report.artifacts,
        }
        sum_path = out / "summary.json"
        sum_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        paths["summary"] = str(sum_path)

        if figures if figures is not None else report.plan.figures:
            paths.update(render_figures(report, out))
        return paths
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _plan_echo(plan: ExperimentPlan) -> dict:
    return {
        "n_list": list(plan.n_list),
        "replications": plan.replications,
        "x0": list(plan.x0),
        "policies": list(plan.policies),
        "seed": plan.seed,
        "eps_diag": plan.eps_diag,
        "cost": plan.cost.to_json(),
        "system": plan.system.to_json(),
        "grid": plan.grid.to_json(),
    }


def parse_replications(path):
    """Read back replications.csv into plain dict rows."""
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        for k in header:
            if k not in ("policy",):
                row[k] = float(row[k])
        out.append(row)
    return out


def _recompute_audit(report: SweepReport, rep_path) -> bool:
    rows = parse_replications(rep_path)
    for cell in report.cells:
        grp = [
            r for r in rows
            if int(r["n"]) == cell["n"] and r["policy"] == cell["policy"]
        ]
        if len(grp) != cell["reps"]:
            return False
        costs = [r["cost"] for r in grp]
        mean = statistics.fmean(costs)
        se = statistics.stdev(costs) / math.sqrt(len(costs))
        if not math.isclose(mean, cell["mean_cost"], rel_tol=0, abs_tol=1e-12):
            return False
        if not math.isclose(se, cell["se_cost"], rel_tol=0, abs_tol=1e-12):
            return False
    return True


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def render_figures(report: SweepReport, out_dir) -> dict:
    """Cost-versus-scale and tracking-diagnostics figures next to the CSVs."""
    from matplotlib.backends.backend_agg import FigureCanvasAgg
    from matplotlib.figure import Figure

    out = Path(out_dir)
    paths = {}
    plan = report.plan
    ns = list(plan.n_list)

    fig = Figure(figsize=(6.4, 4.2))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)
    for policy in plan.policies:
        means, errs = [], []
        for n in ns:
            c = _cell(report.cells, n, policy)
            means.append(c["mean_cost"] if c else math.nan)
            errs.append(2 * c["se_cost"] if c else math.nan)
        ax.errorbar(ns, means, yerr=errs, marker="o", capsize=3, label=policy)
    ax.axhline(report.v_ref, color="k", ls="--", lw=1, label="diffusion value")
    ax.set_xscale("log")
    ax.set_xticks(ns, [str(n) for n in ns])
    ax.set_xlabel("scale n")
    ax.set_ylabel("mean discounted cost (2 SE bars)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out / "cost_vs_n.png"
    fig.savefig(p, dpi=130)
    paths["cost_figure"] = str(p)

    fig = Figure(figsize=(9.6, 3.4))
    FigureCanvasAgg(fig)
    axes = fig.subplots(1, 3)
    for policy in plan.policies:
        if policy not in TRACKING_POLICIES:
            continue
        js = [_cell(report.cells, n, policy) for n in ns]
        if not all(js):
            continue
        axes[0].plot(ns, [c["median_sup_J"] for c in js], marker="o", label=policy)
        axes[1].plot(ns, [c["median_sup_Mhat"] for c in js], marker="o", label=policy)
        axes[2].plot(ns, [c["theta_freq"] for c in js], marker="o", label=policy)
    for ax, title in zip(axes, ["median sup J", "median sup M-hat", "switch frequency"]):
        ax.set_xscale("log")
        ax.set_xticks(ns, [str(n) for n in ns])
        ax.set_xlabel("scale n")
        ax.set_title(title, fontsize=9)
        ax.legend(fontsize=7)
    fig.tight_layout()
    p = out / "diagnostics_vs_n.png"
    fig.savefig(p, dpi=130)
    paths["diagnostics_figure"] = str(p)
    return paths


# ---------------------------------------------------------------------------
# artifact pipeline helpers used by the CLI
# ---------------------------------------------------------------------------

def solve_and_save_fluid(system_path, out_path) -> StaticFluid:
    sysv = validate(load_system(system_path))
    fluid = solve_static_fluid(sysv)
    save_fluid(fluid, sysv, out_path)
    return fluid


def solve_and_save_hjb(system_path, fluid_path, cost_path, grid_path,
                       value_path, policy_path):
    from .fluid import load_fluid

    sysv = validate(load_system(system_path))
    fluid = load_fluid(fluid_path, sysv)
    cost = load_cost(cost_path)
    grid = load_grid(grid_path) if grid_path else GridConfig()
    field_, policy = solve_hjb(sysv, fluid, cost, grid)
    save_value_field(field_, value_path)
    save_markov_policy(policy, policy_path, extra={"cost": cost.to_json()})
    return field_, policy
