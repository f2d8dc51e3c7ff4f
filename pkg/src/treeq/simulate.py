"""Exact discrete-event simulation of the scale-n system under pluggable
scheduling policies.

Arrivals are renewal streams with persistent residuals; services and
abandonments ride exponential clocks that are resampled after every state
change, which is distribution-exact by memorylessness and keeps no
per-customer state.  All structural identities (population splits, server
accounting, nonnegativity, zero flow off the activity edges) are audited at
every event epoch and a violation aborts the run: it is a bug, never a
model state.

Policies:
  pstar    -- preemptive feedback: full rearrangement after every event to
              the integer image of the diffusion feedback map; inside the
              safe radius that split is guaranteed feasible (infeasibility
              there aborts), outside it the maximal-service greedy fill
              stands in whenever the split would need a negative count.
  pprime   -- nonpreemptive tracking: activities whose scaled population
              exceeds the feedback target are blocked; queued customers are
              routed one at a time through unblocked activities; a
              permanent switch to the reset feedback triggers if any gap
              reaches the threshold b0 (left limits, checked on the
              pre-event state).
  ppp      -- pprime driven by the lattice-mollified (Lipschitz) feedback.
  fifo     -- work-conserving greedy routing, smallest indices first.
  priority -- greedy routing in a fixed class priority order.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .costs import CostSpec, zero_cost
from .control import MarkovPolicy, mollify_policy
from .errors import (
    InfeasibleRearrangement,
    InvariantBroken,
    NegativePopulation,
    SchemaError,
)
from .fluid import StaticFluid
from .system import ValidatedSystem

POLICY_NAMES = ("pstar", "pprime", "ppp", "fifo", "priority")


# ---------------------------------------------------------------------------
# configuration and report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """One replication cell: system, scale, policy, and run options.

    `x0_target` is the diffusion-scale initial deviation (the integer
    initial populations derive from it); `x0_explicit` overrides with raw
    integer populations.  `b0` fixes the tracking switch threshold; when
    None it is computed from this run's initial gaps (sweeps precompute a
    common value across their scales).  `eps_diag` starts the window for
    the reported sups; `measure_from` starts the busy-fraction window.
    """

    sysv: ValidatedSystem
    fluid: StaticFluid
    cost: CostSpec
    n: int
    horizon: float
    seed: int
    policy: str = "fifo"
    markov: MarkovPolicy = None
    mollify_eps: float = None
    x0_target: tuple = None
    x0_explicit: tuple = None
    b0: float = None
    priority_order: tuple = None
    eps_diag: float = 0.0
    measure_from: float = 0.0
    audit_every: int = 1

    def __post_init__(self):
        if self.policy not in POLICY_NAMES:
            raise SchemaError(f"unknown policy {self.policy!r}")
        if self.policy in ("pstar", "pprime", "ppp") and self.markov is None:
            raise SchemaError(f"policy {self.policy!r} needs a feedback map")
        if self.policy == "ppp" and not self.mollify_eps:
            raise SchemaError("policy 'ppp' needs a mollification radius")


@dataclass(frozen=True)
class ScaledState:
    """Diffusion-scaled snapshot of the integer state: populations and
    activity counts centered on the fluid quantities, queue/idle counts
    scaled, plus the joint idleness-queue overlap and, when a tracking map
    is active, the split/flow deviations from its targets."""

    t: float
    xhat: tuple
    yhat: tuple
    zhat: tuple
    psihat: tuple
    mhat: float
    j_gap: float
    lambda_gap: float


@dataclass(frozen=True)
class CostReport:
    """Per-replication outcome.  Equality ignores wall time, so two runs of
    the same configuration and seed compare equal bitwise."""

    rep: int
    n: int
    policy: str
    cost: float
    tail_bound: float
    sup_mhat: float
    sup_j: float
    sup_lambda: float
    theta_time: float  # nan when the switch never triggers
    events: int
    wall_ms: float = field(compare=False, default=0.0)
    sup_xhat: float = 0.0
    recon_residual: float = 0.0
    preemptions: int = 0
    blocked_routings: int = 0
    arrivals: int = 0
    busy_frac: float = float("nan")


# ---------------------------------------------------------------------------
# integer helpers
# ---------------------------------------------------------------------------

def integerize_population(y):
    """Nonnegative reals to nonnegative integers: floor all but the last
    component, the last floors the absorbed fractional mass, so the total
    is the floor of the real total and the l1 change is at most 2k."""
    y = [float(v) for v in y]
    if any(v < 0 for v in y):
        raise NegativePopulation(f"target population {y} has a negative component")
    out = [int(math.floor(v)) for v in y]
    frac = math.fsum(y) - math.fsum(out)
    out[-1] += int(math.floor(frac + 1e-12))
    return out


def _apportion(weights, total: int):
    """Split integer `total` by simplex weights: floors, remainder to the last."""
    if total == 0:
        return [0] * len(weights)
    out = [int(total * w) for w in weights[:-1]]
    head = sum(out)
    if head > total:  # float drift guard
        out = [min(o, total) for o in out]
        head = sum(out)
        while head > total:
            for k in range(len(out)):
                if out[k] > 0:
                    out[k] -= 1
                    head -= 1
                    if head == total:
                        break
    out.append(total - head)
    return out


def max_service_fill(x, servers, tree):
    """Greedy transportation fill in leaf-elimination order: each peeled
    vertex's edge takes as many customers as both sides allow.  Achieves the
    maximum number in service on a tree, so it realizes joint work
    conservation whenever the population admits it, and it is always
    work conserving activity by activity."""
    rem_x = list(x)
    rem_n = list(servers)
    psi = [0] * len(tree.edges)
    for _, e in tree.leaf_order:
        i, j = tree.edges[e]
        take = min(rem_x[i], rem_n[j])
        psi[e] = take
        rem_x[i] -= take
        rem_n[j] -= take
    return rem_x, rem_n, psi  # (queue, idle, in service)


def _solve_flow_int(alpha, beta, leaf_ops):
    """Integer tree flow by leaf peeling; exact integer arithmetic."""
    a = list(alpha)
    b = list(beta)
    psi = [0] * len(leaf_ops)
    for is_class, i, j, e in leaf_ops:
        if is_class:
            psi[e] = a[i]
            b[j] -= a[i]
        else:
            psi[e] = b[j]
            a[i] -= b[j]
    return psi


# ---------------------------------------------------------------------------
# scalar-path policy evaluation (the event loop cannot afford numpy calls)
# ---------------------------------------------------------------------------

class _FastPolicy:
    """Pure-python evaluator mirroring MarkovPolicy.control for one state."""

    def __init__(self, policy: MarkovPolicy):
        self.ncl = policy.num_classes
        self.mode = policy.mode
        if policy.mode == "constant":
            uv = tuple(float(v) for v in policy.const_uv)
            self._const = (uv[: self.ncl], uv[self.ncl:])
        elif policy.mode == "table":
            self._load_table(policy)
        elif policy.mode == "mollified":
            self._base = _FastPolicy(policy.base)
            self._eps = policy.eps
            self._radius = policy.eps * math.sqrt(self.ncl)
            self._offsets = [tuple(o) for o in _moll_offsets(self.ncl)]
            self._width = self.ncl + policy.num_stations
        else:
            raise SchemaError(f"unknown policy mode {policy.mode!r}")

    def _load_table(self, policy):
        self._lo = [float(a[0]) for a in policy.axes]
        self._h = [float(a[1] - a[0]) for a in policy.axes]
        self._m = [len(a) for a in policy.axes]
        strides = []
        s = 1
        for m in reversed(self._m):
            strides.append(s)
            s *= m
        self._strides = list(reversed(strides))
        ncl = self.ncl
        self._rows = [
            (tuple(row[:ncl]), tuple(row[ncl:])) for row in policy.table.tolist()
        ]

    def control(self, xh):
        if self.mode == "constant":
            return self._const
        if self.mode == "table":
            flat = 0
            for k in range(len(self._m)):
                idx = int((xh[k] - self._lo[k]) / self._h[k] + 0.5)
                if idx < 0:
                    idx = 0
                elif idx >= self._m[k]:
                    idx = self._m[k] - 1
                flat += idx * self._strides[k]
            return self._rows[flat]
        # mollified: depth-inside-ball weighted average over the lattice
        eps = self._eps
        base_k = [math.floor(x / eps + 0.5) for x in xh]
        acc = [0.0] * self._width
        wsum = 0.0
        ncl = self.ncl
        for off in self._offsets:
            y = [(base_k[k] + off[k]) * eps for k in range(ncl)]
            dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(xh, y)))
            w = self._radius - dist
            if w <= 0.0:
                continue
            u, v = self._base.control(y)
            for k in range(ncl):
                acc[k] += w * u[k]
            for k in range(len(v)):
                acc[ncl + k] += w * v[k]
            wsum += w
        return (
            tuple(a / wsum for a in acc[:ncl]),
            tuple(a / wsum for a in acc[ncl:]),
        )


def _moll_offsets(dim: int):
    import itertools as _it

    reach = int(math.ceil(1.5 * math.sqrt(dim)))
    lim = (1.5 * math.sqrt(dim) + 1e-9) ** 2
    return [
        off
        for off in _it.product(range(-reach, reach + 1), repeat=dim)
        if sum(o * o for o in off) <= lim
    ]


# ---------------------------------------------------------------------------
# buffered random draws
# ---------------------------------------------------------------------------

class _Draws:
    """Block-buffered uniform and exponential draws from one generator."""

    __slots__ = ("rng", "_uni", "_exp", "_iu", "_ie")
    BLOCK = 8192

    def __init__(self, rng):
        self.rng = rng
        self._uni = rng.random(self.BLOCK).tolist()
        self._exp = rng.standard_exponential(self.BLOCK).tolist()
        self._iu = 0
        self._ie = 0

    def uniform(self):
        if self._iu == self.BLOCK:
            self._uni = self.rng.random(self.BLOCK).tolist()
            self._iu = 0
        v = self._uni[self._iu]
        self._iu += 1
        return v

    def exponential(self):
        if self._ie == self.BLOCK:
            self._exp = self.rng.standard_exponential(self.BLOCK).tolist()
            self._ie = 0
        v = self._exp[self._ie]
        self._ie += 1
        return v


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

class Engine:
    """State machine for one replication.  Single-threaded; replications
    are isolated, so any number can run concurrently on independent
    streams keyed by (seed, replication index)."""

    def __init__(self, config: SimConfig, rep: int = 0):
        self.config = config
        self.rep = rep
        sysv = config.sysv
        spec = sysv.spec
        self.sysv = sysv
        self.fluid = config.fluid
        self.tree = sysv.tree
        self.ncl = sysv.num_classes
        self.nst = sysv.num_stations
        self.edges = list(sysv.edges)
        self.ne = len(self.edges)
        self.n = config.n
        self.sqrt_n = math.sqrt(config.n)
        self.gamma = spec.gamma

        lam_n, mu_n, theta_n, servers = sysv.rates_for(config.n)
        self.lam_n = lam_n
        self.mu_n = mu_n
        self.theta_n = theta_n
        self.servers = servers
        self.total_servers = sum(servers)

        self.nx_star = [config.n * v for v in config.fluid.x_star]
        self.npsi_star = [config.n * v for v in config.fluid.psi_star]
        self.psi_star = list(config.fluid.psi_star)
        self.alpha0_n = config.fluid.alpha0 * config.n

        self.class_edges = [sysv.tree.class_edges(i) for i in range(self.ncl)]
        self.leaf_ops = [
            (v < self.ncl, self.edges[e][0], self.edges[e][1], e)
            for v, e in sysv.tree.leaf_order
        ]
        from .flows import flow_matrix

        self.fm_rows = [tuple(row) for row in flow_matrix(sysv.tree)]

        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, rep]))
        self.draws = _Draws(self.rng)

        # state
        self.t = 0.0
        self.X = [0] * self.ncl
        self.Y = [0] * self.ncl
        self.Z = list(servers)
        self.Psi = [0] * self.ne
        self.B = [0] * self.ne
        self.next_arrival = [0.0] * self.ncl
        self.arrivals = [0] * self.ncl
        self.completions = [0] * self.ne
        self.abandons = [0] * self.ncl
        self.int_psi = [0.0] * self.ne
        self.int_y = [0.0] * self.ncl
        self.cost_acc = 0.0
        self.events = 0
        self.preemptions = 0
        self.blocked_routings = 0
        self.busy_time = 0.0
        self.busy_window = 0.0

        self.sup_mhat = 0.0
        self.sup_j = 0.0
        self.sup_lambda = 0.0
        self.sup_xhat = 0.0
        self.theta_time = math.nan
        self.h_latched = False
        self._cur_mhat = 0.0
        self._cur_j = math.nan
        self._cur_lambda = math.nan
        self._cur_xhat = 0.0
        self.x0_hat = [0.0] * self.ncl

        self.driver = _make_driver(config, self)

    # -- scaled views --------------------------------------------------------

    def xhat(self):
        return [(x - s) / self.sqrt_n for x, s in zip(self.X, self.nx_star)]

    def psihat(self):
        return [(p - s) / self.sqrt_n for p, s in zip(self.Psi, self.npsi_star)]

    def feedback_targets(self, xh, policy: "_FastPolicy"):
        """Queue/idle split and per-activity target at a scaled state."""
        u, v = policy.control(xh)
        s = math.fsum(xh)
        splus = s if s > 0 else 0.0
        sminus = -s if s < 0 else 0.0
        y_chk = [splus * ui for ui in u]
        z_chk = [sminus * vj for vj in v]
        margins = [xi - yi for xi, yi in zip(xh, y_chk)] + [-zj for zj in z_chk]
        psi_chk = [
            math.fsum(r * m for r, m in zip(row, margins)) for row in self.fm_rows
        ]
        return y_chk, z_chk, psi_chk

    # -- initial state -------------------------------------------------------

    def set_initial_state(self):
        cfg = self.config
        if cfg.x0_explicit is not None:
            x0 = [int(v) for v in cfg.x0_explicit]
            if any(v < 0 for v in x0):
                raise NegativePopulation(f"explicit initial population {x0}")
        else:
            target = cfg.x0_target or (0.0,) * self.ncl
            raw = [s + self.sqrt_n * t for s, t in zip(self.nx_star, target)]
            x0 = integerize_population(raw)
        self.X = x0
        y, z, psi = initial_arrangement(self, x0)
        self.Y, self.Z, self.Psi = y, z, psi
        self.x0_hat = self.xhat()
        for i in range(self.ncl):
            self.next_arrival[i] = self._draw_interarrival(i)
        self._audit()
        self._refresh_diagnostics()

    def _draw_interarrival(self, i):
        ia = self.sysv.spec.interarrival[i]
        if ia.kind == "exponential":
            u = self.draws.exponential()
        else:
            u = float(ia.sample_unscaled(self.rng))
        return self.t + u / self.lam_n[i]

    # -- main loop -----------------------------------------------------------

    def sample_next_event(self):
        """Next event epoch, kind, and target: the earliest of the
        persistent renewal arrival residuals, an exponential service clock
        at the total in-service rate thinned to one activity, and an
        exponential abandonment clock at the total queue rate thinned to
        one class.  Exponential clocks are resampled at every call, which
        is exact by memorylessness; arrival residuals persist.

        Returns (t, kind, index): kind "arrival"/"abandon" with a class
        index, "service" with an edge index.  The thinning draw is consumed
        only when the exponential clock wins, so the stream order is a
        deterministic function of the path history.
        """
        tot_svc = 0.0
        for e in range(self.ne):
            tot_svc += self.mu_n[e] * self.Psi[e]
        tot_ab = 0.0
        for i in range(self.ncl):
            tot_ab += self.theta_n[i] * self.Y[i]
        tot = tot_svc + tot_ab
        t_exp = self.t + self.draws.exponential() / tot if tot > 0.0 else math.inf

        i_arr = 0
        t_arr = self.next_arrival[0]
        for i in range(1, self.ncl):
            if self.next_arrival[i] < t_arr:
                t_arr = self.next_arrival[i]
                i_arr = i
        if t_arr <= t_exp:
            return t_arr, "arrival", i_arr
        toss = self.draws.uniform() * tot
        if toss < tot_svc:
            acc = 0.0
            e_hit = self.ne - 1
            for e in range(self.ne):
                acc += self.mu_n[e] * self.Psi[e]
                if toss < acc:
                    e_hit = e
                    break
            return t_exp, "service", e_hit
        toss -= tot_svc
        acc = 0.0
        i_hit = self.ncl - 1
        for i in range(self.ncl):
            acc += self.theta_n[i] * self.Y[i]
            if toss < acc:
                i_hit = i
                break
        return t_exp, "abandon", i_hit

    def apply_event(self, kind, idx):
        if kind == "arrival":
            self.X[idx] += 1
            self.Y[idx] += 1
            self.arrivals[idx] += 1
            self.next_arrival[idx] = self._draw_interarrival(idx)
        elif kind == "service":
            i, j = self.edges[idx]
            self.X[i] -= 1
            self.Psi[idx] -= 1
            self.Z[j] += 1
            self.completions[idx] += 1
        else:
            self.X[idx] -= 1
            self.Y[idx] -= 1
            self.abandons[idx] += 1

    def run(self):
        horizon = self.config.horizon
        audit_every = max(1, self.config.audit_every)
        while True:
            t_next, kind, idx = self.sample_next_event()
            if t_next >= horizon:
                self._accrue(self.t, horizon)
                self.t = horizon
                break
            self._accrue(self.t, t_next)
            self.t = t_next

            # tracking switch checked on the pre-event (left limit) state
            self.driver.pre_event(self)
            self.apply_event(kind, idx)
            self.driver.after_event(self)
            self.events += 1
            if self.events % audit_every == 0:
                self._audit()
            self._refresh_diagnostics()
        return self

    # -- bookkeeping ---------------------------------------------------------

    def _accrue(self, t0, t1):
        if t1 <= t0:
            return
        dt = t1 - t0
        for e in range(self.ne):
            self.int_psi[e] += self.Psi[e] * dt
        for i in range(self.ncl):
            self.int_y[i] += self.Y[i] * dt
        yhat = [v / self.sqrt_n for v in self.Y]
        rate = self.config.cost.queue_cost(yhat)
        if rate != 0.0:
            g = self.gamma
            self.cost_acc += rate * (math.exp(-g * t0) - math.exp(-g * t1)) / g
        eps = self.config.eps_diag
        if t1 > eps:
            # the pre-event state holds on [t0, t1); fold its diagnostics
            # into the sups over the reporting window
            self.sup_mhat = max(self.sup_mhat, self._cur_mhat)
            if not math.isnan(self._cur_j):
                self.sup_j = max(self.sup_j, self._cur_j)
                self.sup_lambda = max(self.sup_lambda, self._cur_lambda)
            self.sup_xhat = max(self.sup_xhat, self._cur_xhat)
        m0 = self.config.measure_from
        if t1 > m0:
            lo = t0 if t0 > m0 else m0
            self.busy_window += t1 - lo
            if sum(self.Z) == 0:
                self.busy_time += t1 - lo

    def _refresh_diagnostics(self):
        sq = self.sqrt_n
        self._cur_mhat = min(sum(self.Y), sum(self.Z)) / sq
        xh = self.xhat()
        self._cur_xhat = math.fsum(abs(v) for v in xh)
        track = self.driver.tracking_policy(self)
        if track is None:
            self._cur_j = math.nan
            self._cur_lambda = math.nan
            return
        y_chk, z_chk, psi_chk = self.feedback_targets(xh, track)
        j = 0.0
        for i in range(self.ncl):
            j += abs(self.Y[i] / sq - y_chk[i])
        for jj in range(self.nst):
            j += abs(self.Z[jj] / sq - z_chk[jj])
        self._cur_j = j
        ph = self.psihat()
        self._cur_lambda = math.fsum(abs(a - b) for a, b in zip(ph, psi_chk))

    def _audit(self):
        x, y, z, psi = self.X, self.Y, self.Z, self.Psi
        for i in range(self.ncl):
            row = 0
            for e in self.class_edges[i]:
                row += psi[e]
            if y[i] + row != x[i]:
                raise InvariantBroken(
                    f"t={self.t:.6f}: class {i + 1} split {y[i]}+{row} != {x[i]}"
                )
            if y[i] < 0 or x[i] < 0:
                raise InvariantBroken(f"t={self.t:.6f}: negative count for class {i + 1}")
        col = [0] * self.nst
        for e, (_, j) in enumerate(self.edges):
            if psi[e] < 0:
                raise InvariantBroken(f"t={self.t:.6f}: negative service count on edge {e}")
            col[j] += psi[e]
        for j in range(self.nst):
            if col[j] + z[j] != self.servers[j]:
                raise InvariantBroken(
                    f"t={self.t:.6f}: station {j + 1} accounting {col[j]}+{z[j]} "
                    f"!= {self.servers[j]}"
                )
            if z[j] < 0:
                raise InvariantBroken(f"t={self.t:.6f}: negative idle count station {j + 1}")

    def scaled_observables(self) -> ScaledState:
        """Current state in diffusion scaling (see ScaledState)."""
        sq = self.sqrt_n
        return ScaledState(
            t=self.t,
            xhat=tuple(self.xhat()),
            yhat=tuple(v / sq for v in self.Y),
            zhat=tuple(v / sq for v in self.Z),
            psihat=tuple(self.psihat()),
            mhat=self._cur_mhat,
            j_gap=self._cur_j,
            lambda_gap=self._cur_lambda,
        )

    # -- primitive-process reconstruction ------------------------------------

    def reconstruction_residual(self):
        """Max class deviation between the directly scaled population and
        its decomposition into centered primitive processes plus the rate
        offsets and the integrated scaled state."""
        sq = self.sqrt_n
        t = self.t
        worst = 0.0
        spec = self.sysv.spec
        for i in range(self.ncl):
            a_hat = (self.arrivals[i] - self.lam_n[i] * t) / sq
            s_term = 0.0
            drift_term = 0.0
            for e in self.class_edges[i]:
                s_term += (self.completions[e] - self.mu_n[e] * self.int_psi[e]) / sq
                ipsi_hat = (self.int_psi[e] - self.npsi_star[e] * t) / sq
                drift_term -= self.mu_n[e] * ipsi_hat
            r_hat = (self.abandons[i] - self.theta_n[i] * self.int_y[i]) / sq
            ell_n = spec.lam_hat[i]
            for e in self.class_edges[i]:
                ell_n -= self.sysv.mu_hat_edge(e) * self.psi_star[e]
            recon = (
                self.x0_hat[i]
                + (a_hat - s_term - r_hat)
                + ell_n * t
                + drift_term
                - self.theta_n[i] * self.int_y[i] / sq
            )
            direct = (self.X[i] - self.nx_star[i]) / sq
            worst = max(worst, abs(recon - direct))
        return worst

    def report(self, wall_ms: float = 0.0) -> CostReport:
        bound = self.config.cost.bound()
        tail = (
            math.inf
            if bound is None
            else bound * math.exp(-self.gamma * self.config.horizon) / self.gamma
        )
        return CostReport(
            rep=self.rep,
            n=self.n,
            policy=self.config.policy,
            cost=self.cost_acc,
            tail_bound=tail,
            sup_mhat=self.sup_mhat,
            sup_j=self.sup_j if self.driver.tracking_policy(self) else math.nan,
            sup_lambda=self.sup_lambda if self.driver.tracking_policy(self) else math.nan,
            theta_time=self.theta_time,
            events=self.events,
            wall_ms=wall_ms,
            sup_xhat=self.sup_xhat,
            recon_residual=self.reconstruction_residual(),
            preemptions=self.preemptions,
            blocked_routings=self.blocked_routings,
            arrivals=sum(self.arrivals),
            busy_frac=(self.busy_time / self.busy_window if self.busy_window > 0 else math.nan),
        )


# ---------------------------------------------------------------------------
# policy drivers
# ---------------------------------------------------------------------------

class _Driver:
    def pre_event(self, eng: Engine):
        pass

    def after_event(self, eng: Engine):
        raise NotImplementedError

    def tracking_policy(self, eng: Engine):
        return None


class PreemptiveFeedback(_Driver):
    """Full rearrangement after every event.

    Inside the safe radius the queue/idle totals split by the feedback map
    and the activity counts are the integer tree flow of the resulting
    margins; a negative flow there means the scale is below the
    feasibility threshold, which aborts the run.  Outside the radius any
    jointly work-conserving fill is admissible; this one still tries the
    feedback rearrangement (it tracks the target exactly whenever
    feasible) and falls back to the greedy maximal-service fill only when
    some activity would need a negative count.
    """

    def __init__(self, markov: "_FastPolicy"):
        self.markov = markov

    def tracking_policy(self, eng):
        return self.markov

    def after_event(self, eng: Engine):
        dist = 0.0
        for x, s in zip(eng.X, eng.nx_star):
            dist += abs(x - s)
        arranged = try_rearrange_by_feedback(eng, eng.X, self.markov)
        if arranged is None:
            if dist <= eng.alpha0_n:
                raise InfeasibleRearrangement(
                    f"n={eng.n} t={eng.t:.6f}: feedback rearrangement "
                    f"infeasible inside the safe radius; scale too small"
                )
            arranged = max_service_fill(eng.X, eng.servers, eng.tree)
        y, z, psi = arranged
        for e in range(eng.ne):
            delta = psi[e] - eng.Psi[e]
            eng.B[e] += delta
            if delta < 0:
                eng.preemptions += -delta
        eng.Y, eng.Z, eng.Psi = y, z, psi


def try_rearrange_by_feedback(eng: Engine, x, markov: "_FastPolicy"):
    """Integer rearrangement targeting the feedback split, or None when
    infeasible.

    The queue and idle totals are the positive/negative parts of the
    population-capacity imbalance (an integer), split across classes and
    stations by the feedback simplex weights and rounded preserving the
    totals; the activity counts are the exact integer tree flow of the
    remaining margins.  Work conservation holds by construction; a
    negative flow marks the split infeasible at this population.
    """
    xh = [(xi - s) / eng.sqrt_n for xi, s in zip(x, eng.nx_star)]
    u, v = markov.control(xh)
    delta = sum(x) - eng.total_servers
    dplus = delta if delta > 0 else 0
    dminus = -delta if delta < 0 else 0
    y = _apportion(list(u), dplus)
    z = _apportion(list(v), dminus)
    if any(yi > xi for yi, xi in zip(y, x)):
        return None
    alpha = [xi - yi for xi, yi in zip(x, y)]
    beta = [s - zj for s, zj in zip(eng.servers, z)]
    psi = _solve_flow_int(alpha, beta, eng.leaf_ops)
    for val in psi:
        if val < 0:
            return None
    return y, z, psi


def rearrange_by_feedback(eng: Engine, x, markov: "_FastPolicy"):
    """Feedback rearrangement that must succeed; raises on a negative flow
    (the scale is below the feasibility threshold of the safe radius)."""
    arranged = try_rearrange_by_feedback(eng, x, markov)
    if arranged is None:
        raise InfeasibleRearrangement(
            f"n={eng.n} t={eng.t:.6f}: feedback rearrangement needs a "
            f"negative activity count at population {list(x)}"
        )
    return arranged


class NonpreemptiveTracking(_Driver):
    """Blocked-activity tracking with a permanent reset switch.

    An activity is blocked while its scaled population exceeds the target
    computed from the active feedback map.  Routing moves one customer at a
    time through the smallest unblocked (class, station) pair with both a
    queue and idle capacity; the target is fixed during the instantaneous
    routing burst because the population vector does not change.  The
    switch to the reset feedback latches when any pre-event gap against the
    base-map target reaches b0.
    """

    def __init__(self, markov: "_FastPolicy", b0: float, ncl: int, nst: int):
        self.markov = markov
        self.b0 = b0
        self.reset = _FastPolicy(MarkovPolicy.reset_policy(ncl, nst))

    def tracking_policy(self, eng):
        return self.reset if eng.h_latched else self.markov

    def pre_event(self, eng: Engine):
        if eng.h_latched:
            return
        xh = eng.xhat()
        _, _, psi_base = eng.feedback_targets(xh, self.markov)
        ph = eng.psihat()
        gap = max(a - b for a, b in zip(ph, psi_base))
        if gap >= self.b0:
            eng.h_latched = True
            eng.theta_time = eng.t

    def after_event(self, eng: Engine):
        xh = eng.xhat()
        _, _, psi_chk = eng.feedback_targets(xh, self.tracking_policy(eng))
        ph = eng.psihat()
        step = 1.0 / eng.sqrt_n
        while True:
            hit = -1
            for e in range(eng.ne):
                if ph[e] <= psi_chk[e]:
                    i, j = eng.edges[e]
                    if eng.Y[i] > 0 and eng.Z[j] > 0:
                        hit = e
                        break
            if hit < 0:
                break
            if ph[hit] > psi_chk[hit]:
                eng.blocked_routings += 1  # unreachable; audited anyway
            i, j = eng.edges[hit]
            eng.Y[i] -= 1
            eng.Z[j] -= 1
            eng.Psi[hit] += 1
            eng.B[hit] += 1
            ph[hit] += step


class GreedyRouting(_Driver):
    """Work-conserving routing: smallest class, then smallest station."""

    def after_event(self, eng: Engine):
        while True:
            hit = -1
            for e in range(eng.ne):
                i, j = eng.edges[e]
                if eng.Y[i] > 0 and eng.Z[j] > 0:
                    hit = e
                    break
            if hit < 0:
                break
            i, j = eng.edges[hit]
            eng.Y[i] -= 1
            eng.Z[j] -= 1
            eng.Psi[hit] += 1
            eng.B[hit] += 1


class PriorityRouting(_Driver):
    """Greedy routing scanning classes in a fixed priority order."""

    def __init__(self, order, ncl):
        order = tuple(order) if order else tuple(range(ncl))
        if sorted(order) != list(range(ncl)):
            raise SchemaError(f"priority order {order} is not a permutation of classes")
        self.order = order

    def after_event(self, eng: Engine):
        while True:
            hit = -1
            for i in self.order:
                if eng.Y[i] == 0:
                    continue
                for e in eng.class_edges[i]:
                    j = eng.edges[e][1]
                    if eng.Z[j] > 0:
                        hit = e
                        break
                if hit >= 0:
                    break
            if hit < 0:
                break
            i, j = eng.edges[hit]
            eng.Y[i] -= 1
            eng.Z[j] -= 1
            eng.Psi[hit] += 1
            eng.B[hit] += 1


def _make_driver(config: SimConfig, eng: Engine) -> _Driver:
    name = config.policy
    if name == "pstar":
        return PreemptiveFeedback(_FastPolicy(config.markov))
    if name == "pprime":
        fast = _FastPolicy(config.markov)
        b0 = config.b0 if config.b0 is not None else default_b0(eng, fast)
        return NonpreemptiveTracking(fast, b0, eng.ncl, eng.nst)
    if name == "ppp":
        fast = _FastPolicy(mollify_policy(config.markov, config.mollify_eps))
        b0 = config.b0 if config.b0 is not None else default_b0(eng, fast)
        return NonpreemptiveTracking(fast, b0, eng.ncl, eng.nst)
    if name == "fifo":
        return GreedyRouting()
    if name == "priority":
        return PriorityRouting(config.priority_order, eng.ncl)
    raise SchemaError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def initial_arrangement(eng: Engine, x0):
    """Default placement for an integer initial population: the feedback
    rearrangement whenever feasible (the reset split when no feedback map
    is configured), the greedy fill otherwise.  Infeasibility inside the
    safe radius still aborts."""
    dist = sum(abs(x - s) for x, s in zip(x0, eng.nx_star))
    h = eng.config.markov
    fast = _FastPolicy(h if h is not None else MarkovPolicy.reset_policy(eng.ncl, eng.nst))
    arranged = try_rearrange_by_feedback(eng, x0, fast)
    if arranged is not None:
        return arranged
    if dist <= eng.alpha0_n:
        raise InfeasibleRearrangement(
            f"n={eng.n}: initial feedback arrangement infeasible inside the safe radius"
        )
    return max_service_fill(x0, eng.servers, eng.tree)


def initial_gap(config: SimConfig, rep: int = 0):
    """Largest positive initial tracking gap for this configuration; the
    ingredient of the switch threshold b0."""
    eng = Engine(config, rep)
    policy = eng.driver.tracking_policy(eng)
    if policy is None:
        return 0.0
    return default_b0(eng, policy) - 2.0


def default_b0(eng: Engine, policy: "_FastPolicy") -> float:
    """Switch threshold from this run's own initial gaps: 2 plus the largest
    positive gap between the initial scaled populations (arranged exactly as
    the run will arrange them) and the targets of the tracking map."""
    cfg = eng.config
    if cfg.x0_explicit is not None:
        x0 = [int(v) for v in cfg.x0_explicit]
    else:
        target = cfg.x0_target or (0.0,) * eng.ncl
        x0 = integerize_population(
            [s + eng.sqrt_n * t for s, t in zip(eng.nx_star, target)]
        )
    _, _, psi = initial_arrangement(eng, x0)
    xh = [(xi - s) / eng.sqrt_n for xi, s in zip(x0, eng.nx_star)]
    _, _, psi_chk = eng.feedback_targets(xh, policy)
    ph = [(p - s) / eng.sqrt_n for p, s in zip(psi, eng.npsi_star)]
    gap = max(max(a - b, 0.0) for a, b in zip(ph, psi_chk))
    return 2.0 + gap


def initial_conditions(sysv: ValidatedSystem, fluid: StaticFluid, n: int,
                       x_target=None, markov: MarkovPolicy = None):
    """Integer initial populations and default arrangement for the scale-n
    system targeting the diffusion-scale deviation `x_target`.

    Returns (X, Y, Z, Psi).  The populations land within 2I of the real
    target, so the scaled deviation is within 2I/sqrt(n) of `x_target`.
    """
    cfg = SimConfig(
        sysv=sysv,
        fluid=fluid,
        cost=zero_cost(),
        n=n,
        horizon=1.0,
        seed=0,
        policy="fifo",
        markov=markov,
        x0_target=None if x_target is None else tuple(x_target),
    )
    eng = Engine(cfg)
    eng.set_initial_state()
    return list(eng.X), list(eng.Y), list(eng.Z), list(eng.Psi)


def run_replication(config: SimConfig, rep: int = 0) -> CostReport:
    """Simulate one replication; deterministic in (config, seed, rep)."""
    start = time.perf_counter()
    eng = Engine(config, rep)
    eng.set_initial_state()
    eng.run()
    wall_ms = (time.perf_counter() - start) * 1e3
    return eng.report(wall_ms)
