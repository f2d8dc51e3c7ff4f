"""Diffusion control problem: drift, Hamiltonian, HJB solve, feedback policies.

The limiting control problem lives on the class-population deviations
x in R^I.  A control point is a pair of probability vectors (u over classes,
v over stations) splitting the positive/negative part of the total
imbalance into queued customers and idle servers; the induced per-activity
populations follow from the tree flow map, and the drift is the resulting
net service and abandonment pull plus the second-order rate offsets.

The HJB equation (discounted, with a pointwise minimum over the control
simplexes inside) is solved on a truncated box with a monotone scheme:
centered second differences and first differences upwinded on the sign of
the drift, then policy iteration over a finite candidate control set.
Upwinding keeps every off-diagonal coefficient nonnegative for any spacing,
so each policy evaluation is an M-matrix solve and the iteration converges.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .costs import CostSpec
from .errors import (
    EmptyNeighborhood,
    GridTooSmall,
    NoConvergence,
    SchemaError,
    StepTooLarge,
)
from .fluid import StaticFluid
from .flows import flow_matrix
from .system import ValidatedSystem

_MAGIC = b"TREEQBIN"
_VERSION = 1


# ---------------------------------------------------------------------------
# drift data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftData:
    """Everything the drift needs, precomputed in matrix form.

    `ell` is the second-order rate offset per class (arrival perturbation
    minus the service perturbations weighted by fluid activity mass); `r`
    the per-class diffusion coefficients, chosen so the driving noise has
    unit variance rate: r_i = sqrt(lambda_i * (1 + scv_i)).  `fm` maps
    stacked (class, station) margins to per-edge flows; `class_rate_agg`
    collapses per-edge flows to per-class service rates.
    """

    num_classes: int
    num_stations: int
    ell: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    fm: np.ndarray              # (E, I+J)
    class_rate_agg: np.ndarray  # (I, E), entry mu_e at (class(e), e)
    mu_edges: np.ndarray

    @classmethod
    def from_system(cls, sysv: ValidatedSystem, fluid: StaticFluid) -> "DriftData":
        spec = sysv.spec
        ncl, nst = sysv.num_classes, sysv.num_stations
        ell = np.array(spec.lam_hat, dtype=float)
        for e, (i, _) in enumerate(sysv.edges):
            ell[i] -= sysv.mu_hat_edge(e) * fluid.psi_star[e]
        r = np.array(
            [math.sqrt(l * (1.0 + ia.scv)) for l, ia in zip(spec.lam, spec.interarrival)]
        )
        fm = flow_matrix(sysv.tree)
        mu_edges = np.array([sysv.mu_edge(e) for e in range(len(sysv.edges))])
        agg = np.zeros((ncl, len(sysv.edges)))
        for e, (i, _) in enumerate(sysv.edges):
            agg[i, e] = mu_edges[e]
        return cls(
            num_classes=ncl,
            num_stations=nst,
            ell=ell,
            r=r,
            theta=np.array(spec.theta, dtype=float),
            fm=fm,
            class_rate_agg=agg,
            mu_edges=mu_edges,
        )

    def lipschitz_bound(self) -> float:
        """Coarse global Lipschitz constant of the drift in x, uniform over controls."""
        c_g = float(np.max(np.abs(self.fm)))
        return 2.0 * c_g * float(self.class_rate_agg.sum()) + float(self.theta.max(initial=0.0))


def activity_populations(x, u, v, d: DriftData):
    """Per-edge populations induced by state x and control (u, v): the tree
    flow of margins (x minus the queued split, minus the idle split)."""
    x = np.asarray(x, dtype=float)
    s = x.sum()
    margins = np.concatenate([x - max(s, 0.0) * np.asarray(u), -max(-s, 0.0) * np.asarray(v)])
    return d.fm @ margins


def drift(x, u, v, d: DriftData):
    """Drift of the controlled diffusion at a single state."""
    return drift_batch(np.asarray(x, dtype=float)[None, :], np.asarray(u), np.asarray(v), d)[0]


def drift_batch(x: np.ndarray, u, v, d: DriftData) -> np.ndarray:
    """Drift at each row of x (shape (P, I)) under a fixed control."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    s = x.sum(axis=1)
    splus = np.maximum(s, 0.0)
    sminus = np.maximum(-s, 0.0)
    margins = np.concatenate(
        [x - splus[:, None] * u[None, :], -sminus[:, None] * v[None, :]], axis=1
    )
    psi = margins @ d.fm.T
    b = -(psi @ d.class_rate_agg.T)
    b -= d.theta[None, :] * (splus[:, None] * u[None, :])
    b += d.ell[None, :]
    return b


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def _compositions(total: int, parts: int):
    """Integer compositions of `total` into `parts` nonnegative parts."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head,) + rest


def simplex_grid(dim: int, mesh: int):
    """Probability vectors with coordinates on a 1/mesh grid."""
    return [tuple(k / mesh for k in comp) for comp in _compositions(mesh, dim)]


def _linear_coefficients(x, p, d: DriftData):
    """Split b(x, U) . p into const + gu . u + gv . v.

    The drift is affine in the control, so the scalar product with a fixed
    gradient separates into simplex-linear pieces; the constant also absorbs
    the rate offsets.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    s = float(x.sum())
    splus, sminus = max(s, 0.0), max(-s, 0.0)
    w = p @ d.class_rate_agg          # per-edge: p_class(e) * mu_e
    q = d.fm.T @ w                    # margins-space coefficients
    const = -float(q[: d.num_classes] @ x) + float(d.ell @ p)
    gu = splus * (q[: d.num_classes] - d.theta * p)
    gv = sminus * q[d.num_classes:]
    return const, gu, gv


def _golden_min(fn, lo, hi, iters=90):
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    e = a + phi * (b - a)
    fc, fe = fn(c), fn(e)
    for _ in range(iters):
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, e, fe
            e = a + phi * (b - a)
            fe = fn(e)
        if b - a < 1e-14 * (1.0 + abs(a) + abs(b)):
            break
    return (a + b) / 2.0


def _min_over_u_simplex(gu, x, cost: CostSpec, tol: float):
    """Minimize gu . u + L(x, u) over the class simplex.

    Exact vertex enumeration when joint minimization is vertex-exact;
    otherwise starts from the best of the vertices and a coarse grid, then
    runs pairwise golden-section transfers (exact in the limit for costs
    convex on the simplex).
    """
    ncl = len(gu)
    best_u, best_val = None, math.inf
    for i in range(ncl):
        u = tuple(1.0 if k == i else 0.0 for k in range(ncl))
        val = gu[i] + cost.control_cost(x, u)
        if val < best_val:
            best_u, best_val = u, val
    if cost.vertex_exact or ncl == 1:
        return np.array(best_u), best_val

    for u in simplex_grid(ncl, 8):
        val = float(np.dot(gu, u)) + cost.control_cost(x, u)
        if val < best_val:
            best_u, best_val = u, val

    u = np.array(best_u, dtype=float)

    def phi(vec):
        return float(np.dot(gu, vec)) + cost.control_cost(x, vec)

    for _ in range(60):
        improved = False
        for a in range(ncl):
            for b in range(ncl):
                if a == b:
                    continue

                def along(t, a=a, b=b):
                    w = u.copy()
                    w[a] -= t
                    w[b] += t
                    return phi(w)

                t = _golden_min(along, 0.0, u[a])
                if along(t) < phi(u) - 1e-16:
                    u[a] -= t
                    u[b] += t
                    improved = True
        new_val = phi(u)
        if best_val - new_val < tol * 0.01:
            best_val = min(best_val, new_val)
            break
        best_val = new_val
        if not improved:
            break
    return u, best_val


def hamiltonian(x, p, d: DriftData, cost: CostSpec, tol: float = 1e-8):
    """Pointwise minimized generator term: the smallest b(x,U).p + L(x,U)
    over the product simplex, with an attaining control.

    The expression separates into independent minimizations over the class
    and station simplexes (the cost does not depend on the station split),
    and the station part is linear, so its minimum sits at a vertex.
    """
    const, gu, gv = _linear_coefficients(x, p, d)
    jbest = int(np.argmin(gv))
    v = np.zeros(d.num_stations)
    v[jbest] = 1.0
    u, val_u = _min_over_u_simplex(gu, np.asarray(x, dtype=float), cost, tol)
    h = const + val_u + float(gv[jbest])
    return h, (np.asarray(u, dtype=float), v)


# ---------------------------------------------------------------------------
# grid, value field, policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    """Truncated-box discretization parameters.

    `half_width` (scalar or per-axis) and odd `num` nodes per axis center
    the box at the origin.  `u_mesh` sets the control-candidate density for
    costs whose simplex minimization is not vertex-exact.  With
    `check_domain` the solver re-solves on a doubled box and insists probe
    values move by less than 10x `tol_pde`.
    """

    half_width: object = 8.0
    num: object = 161
    tol_pde: float = 1e-6
    tol_h: float = 1e-8
    max_iters: int = 100
    u_mesh: int = 16
    check_domain: bool = False

    def axes(self, dim: int):
        hw = self.half_width if hasattr(self.half_width, "__len__") else [self.half_width] * dim
        num = self.num if hasattr(self.num, "__len__") else [self.num] * dim
        out = []
        for w, m in zip(hw, num):
            m = int(m)
            if m < 5 or m % 2 == 0:
                raise SchemaError("grid needs an odd node count >= 5 per axis")
            out.append(np.linspace(-float(w), float(w), m))
        return out

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "half_width": self.half_width if not hasattr(self.half_width, "tolist")
            else self.half_width.tolist(),
            "num": self.num,
            "tol_pde": self.tol_pde,
            "tol_H": self.tol_h,
            "max_iters": self.max_iters,
            "u_mesh": self.u_mesh,
            "check_domain": self.check_domain,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GridConfig":
        if obj.get("schema") != 1:
            raise SchemaError(f"unsupported grid schema {obj.get('schema')!r}")
        return cls(
            half_width=obj.get("half_width", 8.0),
            num=obj.get("num", 161),
            tol_pde=float(obj.get("tol_pde", 1e-6)),
            tol_h=float(obj.get("tol_H", 1e-8)),
            max_iters=int(obj.get("max_iters", 100)),
            u_mesh=int(obj.get("u_mesh", 16)),
            check_domain=bool(obj.get("check_domain", False)),
        )


def load_grid(path) -> GridConfig:
    with open(path) as f:
        return GridConfig.from_json(json.load(f))


def save_grid(grid: GridConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(grid.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")


class ValueField:
    """Gridded solution of the control equation with its achieved residual."""

    def __init__(self, axes, values: np.ndarray, gamma: float, residual: float,
                 tol_pde: float, tol_h: float):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = np.asarray(values, dtype=float)
        self.gamma = float(gamma)
        self.residual = float(residual)
        self.tol_pde = float(tol_pde)
        self.tol_h = float(tol_h)

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return self.values.shape

    def spacing(self):
        return [a[1] - a[0] for a in self.axes]

    def nearest_index(self, x):
        idx = []
        for xi, a in zip(x, self.axes):
            h = a[1] - a[0]
            k = int(round((float(xi) - a[0]) / h))
            idx.append(min(max(k, 0), len(a) - 1))
        return tuple(idx)

    def interpolate(self, x):
        """Multilinear interpolation, clamped to the box."""
        los, fracs = [], []
        for xi, a in zip(x, self.axes):
            h = a[1] - a[0]
            t = (float(xi) - a[0]) / h
            t = min(max(t, 0.0), len(a) - 1.0)
            k = min(int(t), len(a) - 2)
            los.append(k)
            fracs.append(t - k)
        val = 0.0
        for corner in itertools.product((0, 1), repeat=self.dim):
            w = 1.0
            for c, fr in zip(corner, fracs):
                w *= fr if c else (1.0 - fr)
            val += w * float(self.values[tuple(k + c for k, c in zip(los, corner))])
        return float(val)

    def gradient_centered(self) -> np.ndarray:
        """Centered-difference gradient at every node, one-sided on the faces.

        Returns shape (*grid shape, dim).
        """
        grads = [np.gradient(self.values, a, axis=k) for k, a in enumerate(self.axes)]
        return np.stack(grads, axis=-1)


class MarkovPolicy:
    """Feedback map from state to a control point.

    Modes: "table" (gridded argmin with nearest-node lookup), "constant"
    (fixed control; the reset policy sends all queueing to class 1 and all
    idleness to station 1), and "mollified" (lattice-averaged table, which
    is Lipschitz with constant of order 1/eps).
    """

    def __init__(self, num_classes, num_stations, mode="constant", axes=None,
                 table=None, const_uv=None, base=None, eps=None):
        self.num_classes = int(num_classes)
        self.num_stations = int(num_stations)
        self.mode = mode
        self.axes = None if axes is None else [np.asarray(a, dtype=float) for a in axes]
        self.table = None if table is None else np.asarray(table, dtype=float)
        self.const_uv = None if const_uv is None else np.asarray(const_uv, dtype=float)
        self.base = base
        self.eps = eps
        if mode == "mollified":
            if eps is None or eps <= 0:
                raise EmptyNeighborhood("mollification radius must be positive")
            self._offsets = _mollify_offsets(self.num_classes)

    @classmethod
    def reset_policy(cls, num_classes, num_stations) -> "MarkovPolicy":
        uv = np.zeros(num_classes + num_stations)
        uv[0] = 1.0
        uv[num_classes] = 1.0
        return cls(num_classes, num_stations, mode="constant", const_uv=uv)

    @classmethod
    def from_table(cls, axes, table, num_classes, num_stations) -> "MarkovPolicy":
        return cls(num_classes, num_stations, mode="table", axes=axes, table=table)

    def control(self, x):
        uv = self.control_batch(np.asarray(x, dtype=float)[None, :])[0]
        return uv[: self.num_classes], uv[self.num_classes:]

    def control_batch(self, x: np.ndarray) -> np.ndarray:
        """(P, I) states to (P, I+J) stacked simplex pairs."""
        p = x.shape[0]
        if self.mode == "constant":
            return np.tile(self.const_uv, (p, 1))
        if self.mode == "table":
            return self.table[self._flat_indices(x)]
        if self.mode == "mollified":
            return self._mollified_batch(x)
        raise SchemaError(f"unknown policy mode {self.mode!r}")

    def _flat_indices(self, x: np.ndarray) -> np.ndarray:
        flat = np.zeros(x.shape[0], dtype=np.int64)
        stride = 1
        strides = []
        for a in reversed(self.axes):
            strides.append(stride)
            stride *= len(a)
        strides = list(reversed(strides))
        for k, a in enumerate(self.axes):
            h = a[1] - a[0]
            idx = np.rint((x[:, k] - a[0]) / h).astype(np.int64)
            np.clip(idx, 0, len(a) - 1, out=idx)
            flat += idx * strides[k]
        return flat

    def _mollified_batch(self, x: np.ndarray) -> np.ndarray:
        eps = self.eps
        dim = self.num_classes
        radius = eps * math.sqrt(dim)
        base_k = np.rint(x / eps)
        acc = np.zeros((x.shape[0], self.num_classes + self.num_stations))
        wsum = np.zeros(x.shape[0])
        for off in self._offsets:
            y = (base_k + off) * eps
            dist = np.sqrt(((x - y) ** 2).sum(axis=1))
            w = np.maximum(radius - dist, 0.0)
            live = w > 0
            if not live.any():
                continue
            uv = self.base.control_batch(y[live])
            acc[live] += w[live, None] * uv
            wsum += w
        if np.any(wsum <= 0):
            raise EmptyNeighborhood("no lattice point inside the averaging ball")
        return acc / wsum[:, None]


def _mollify_offsets(dim: int):
    """Integer offsets guaranteed to cover the averaging ball around any point."""
    reach = int(math.ceil(1.5 * math.sqrt(dim)))
    offs = []
    for off in itertools.product(range(-reach, reach + 1), repeat=dim):
        if sum(o * o for o in off) <= (1.5 * math.sqrt(dim) + 1e-9) ** 2:
            offs.append(np.array(off, dtype=float))
    return offs


def mollify_policy(base: MarkovPolicy, eps: float) -> MarkovPolicy:
    """Average the base policy over the eps-lattice points inside a ball of
    radius eps*sqrt(I), weighting each by its depth inside the ball.

    The output is a convex combination of control points, hence still a
    valid control, and is Lipschitz in x.  The ball always contains the
    rounded lattice point, so the neighborhood cannot be empty.
    """
    if eps <= 0:
        raise EmptyNeighborhood("mollification radius must be positive")
    return MarkovPolicy(
        base.num_classes, base.num_stations, mode="mollified", base=base, eps=float(eps)
    )


def mollify_weights(x, eps: float, dim: int):
    """Lattice points and normalized weights used by the mollified policy at x."""
    x = np.asarray(x, dtype=float)
    radius = eps * math.sqrt(dim)
    base_k = np.rint(x / eps)
    pts, ws = [], []
    for off in _mollify_offsets(dim):
        y = (base_k + off) * eps
        w = radius - math.dist(x, y)
        if w > 0:
            pts.append(y)
            ws.append(w)
    total = sum(ws)
    if total <= 0:
        raise EmptyNeighborhood("no lattice point inside the averaging ball")
    return pts, [w / total for w in ws]


# ---------------------------------------------------------------------------
# HJB solver
# ---------------------------------------------------------------------------

def _candidate_controls(d: DriftData, cost: CostSpec, u_mesh: int):
    """Finite control set for policy iteration: product-simplex vertices,
    plus a u-grid when vertex minimization is not exact for the cost."""
    ncl, nst = d.num_classes, d.num_stations
    us = [tuple(1.0 if k == i else 0.0 for k in range(ncl)) for i in range(ncl)]
    if not cost.vertex_exact and ncl > 1:
        us = sorted(set(us) | set(simplex_grid(ncl, u_mesh)))
    vs = [tuple(1.0 if k == j else 0.0 for k in range(nst)) for j in range(nst)]
    return [(np.array(u), np.array(v)) for u in us for v in vs]


def solve_hjb(sysv: ValidatedSystem, fluid: StaticFluid, cost: CostSpec,
              grid: GridConfig, d: DriftData = None):
    """Solve the discounted control equation on a truncated box; returns the
    value field and the extracted feedback policy.

    Scheme: centered second differences, drift-sign upwinded first
    differences, boundary closure by zero second difference along the first
    boundary axis (linear extrapolation), Howard policy iteration over the
    finite candidate control set.  The reported residual is the interior
    max-norm of the discrete minimized operator.
    """
    if d is None:
        d = DriftData.from_system(sysv, fluid)
    gamma = sysv.spec.gamma
    axes = grid.axes(d.num_classes)
    shape = tuple(len(a) for a in axes)
    hs = [a[1] - a[0] for a in axes]
    n_nodes = int(np.prod(shape))
    dim = len(shape)

    coords = np.indices(shape).reshape(dim, n_nodes)
    nodes = np.stack([axes[k][coords[k]] for k in range(dim)], axis=1)
    strides = np.array([int(np.prod(shape[k + 1:])) for k in range(dim)], dtype=np.int64)
    flat = np.arange(n_nodes, dtype=np.int64)
    interior = np.ones(n_nodes, dtype=bool)
    for k in range(dim):
        interior &= (coords[k] > 0) & (coords[k] < shape[k] - 1)
    int_idx = flat[interior]

    cands = _candidate_controls(d, cost, grid.u_mesh)
    b_pos, b_neg, l_vals = [], [], []
    for u, v in cands:
        b = drift_batch(nodes, u, v, d)
        b_pos.append(np.maximum(b, 0.0))
        b_neg.append(np.maximum(-b, 0.0))
        l_vals.append(cost.control_cost_batch(nodes, u))
    bp_all = np.stack(b_pos)   # (C, N, I)
    bn_all = np.stack(b_neg)
    lv_all = np.stack(l_vals)  # (C, N)

    # boundary rows: zero second difference along the first boundary axis
    brows, bcols, bvals = [], [], []
    for k in range(dim):
        on_this = (coords[k] == 0) | (coords[k] == shape[k] - 1)
        prior_face = np.zeros(n_nodes, dtype=bool)
        for kk in range(k):
            prior_face |= (coords[kk] == 0) | (coords[kk] == shape[kk] - 1)
        sel = flat[on_this & ~prior_face]
        sgn = np.where(coords[k][sel] == 0, 1, -1).astype(np.int64)
        step = sgn * strides[k]
        brows.extend([sel, sel, sel])
        bcols.extend([sel, sel + step, sel + 2 * step])
        bvals.extend([np.ones_like(sel, dtype=float),
                      np.full(sel.shape, -2.0),
                      np.ones_like(sel, dtype=float)])
    brows = np.concatenate(brows)
    bcols = np.concatenate(bcols)
    bvals = np.concatenate(bvals)

    diff_coeff = [0.5 * d.r[k] ** 2 / hs[k] ** 2 for k in range(dim)]

    def assemble(policy_idx):
        rows = [brows]
        cols = [bcols]
        vals = [bvals]
        rhs = np.zeros(n_nodes)
        diag = np.full(int_idx.shape, -gamma)
        bp = bp_all[policy_idx, int_idx]
        bn = bn_all[policy_idx, int_idx]
        lv = lv_all[policy_idx, int_idx]
        for k in range(dim):
            up = diff_coeff[k] + bp[:, k] / hs[k]
            dn = diff_coeff[k] + bn[:, k] / hs[k]
            diag -= up + dn
            rows.extend([int_idx, int_idx])
            cols.extend([int_idx + strides[k], int_idx - strides[k]])
            vals.extend([up, dn])
        rows.append(int_idx)
        cols.append(int_idx)
        vals.append(diag)
        rhs[int_idx] = -lv
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_nodes, n_nodes),
        )
        return mat, rhs

    def upwind_values(f):
        """Per-candidate upwinded drift term plus running cost, interior nodes."""
        fg = f.reshape(shape)
        dps, dms = [], []
        for k in range(dim):
            dp = np.zeros(shape)
            dm = np.zeros(shape)
            sl_c = [slice(None)] * dim
            sl_p = [slice(None)] * dim
            sl_m = [slice(None)] * dim
            sl_c[k] = slice(1, -1)
            sl_p[k] = slice(2, None)
            sl_m[k] = slice(0, -2)
            dp[tuple(sl_c)] = (fg[tuple(sl_p)] - fg[tuple(sl_c)]) / hs[k]
            dm[tuple(sl_c)] = (fg[tuple(sl_m)] - fg[tuple(sl_c)]) / hs[k]
            dps.append(dp.ravel()[int_idx])
            dms.append(dm.ravel()[int_idx])
        out = np.empty((len(cands), int_idx.shape[0]))
        for c in range(len(cands)):
            acc = l_vals[c][int_idx].copy()
            for k in range(dim):
                acc += b_pos[c][int_idx, k] * dps[k] + b_neg[c][int_idx, k] * dms[k]
            out[c] = acc
        return out

    def second_diff_term(f):
        fg = f.reshape(shape)
        acc = np.zeros(shape)
        for k in range(dim):
            sl_c = [slice(None)] * dim
            sl_p = [slice(None)] * dim
            sl_m = [slice(None)] * dim
            sl_c[k] = slice(1, -1)
            sl_p[k] = slice(2, None)
            sl_m[k] = slice(0, -2)
            contrib = np.zeros(shape)
            contrib[tuple(sl_c)] = (
                fg[tuple(sl_p)] - 2.0 * fg[tuple(sl_c)] + fg[tuple(sl_m)]
            ) * diff_coeff[k]
            acc += contrib
        return acc.ravel()[int_idx]

    # start from the cheapest running cost at each node
    l_stack = np.stack([lv[int_idx] for lv in l_vals])
    policy_idx = np.argmin(l_stack, axis=0)
    f = np.zeros(n_nodes)
    residual = math.inf
    best_residual = math.inf
    # full policy-iteration steps while they behave; the extrapolation
    # closure is not monotone, so near-boundary candidate flips can sustain
    # a cycle -- averaging consecutive iterates kills the period-2 mode
    damped = False
    target = max(grid.tol_pde * 1e-2, 1e-12)
    for iteration in range(grid.max_iters):
        mat, rhs = assemble(policy_idx)
        f_new = spla.spsolve(mat.tocsc(), rhs)
        f = f_new if not damped else 0.5 * (f_new + f)
        vals = upwind_values(f)
        new_idx = np.argmin(vals, axis=0)
        residual = float(
            np.max(np.abs(second_diff_term(f) + vals.min(axis=0) - gamma * f[int_idx]))
        )
        if not damped and np.array_equal(new_idx, policy_idx):
            break
        if residual <= target:
            policy_idx = new_idx
            break
        if not damped and (residual > best_residual * 0.9 or iteration >= 8):
            damped = True
        best_residual = min(best_residual, residual)
        policy_idx = new_idx
    else:
        raise NoConvergence(grid.max_iters, residual)
    if residual > grid.tol_pde:
        raise NoConvergence(iteration + 1, residual)

    field = ValueField(axes, f.reshape(shape), gamma, residual, grid.tol_pde, grid.tol_h)

    # feedback extraction with the centered gradient
    grads = field.gradient_centered().reshape(n_nodes, dim)
    table = np.zeros((n_nodes, d.num_classes + d.num_stations))
    best = np.full(n_nodes, np.inf)
    for c, (u, v) in enumerate(cands):
        bc = b_pos[c] - b_neg[c]
        val = (bc * grads).sum(axis=1) + l_vals[c]
        take = val < best
        best = np.where(take, val, best)
        table[take] = np.concatenate([u, v])
    policy = MarkovPolicy.from_table(axes, table, d.num_classes, d.num_stations)

    if grid.check_domain:
        _check_domain(sysv, fluid, cost, grid, d, field)
    return field, policy


def _check_domain(sysv, fluid, cost, grid, d, field):
    """Re-solve on a doubled box and compare probe values near the center."""
    hw = grid.half_width if hasattr(grid.half_width, "__len__") else [grid.half_width] * field.dim
    num = grid.num if hasattr(grid.num, "__len__") else [grid.num] * field.dim
    big = GridConfig(
        half_width=[2.0 * w for w in hw],
        num=[2 * (int(m) - 1) + 1 for m in num],
        tol_pde=grid.tol_pde,
        tol_h=grid.tol_h,
        max_iters=grid.max_iters,
        u_mesh=grid.u_mesh,
        check_domain=False,
    )
    field2, _ = solve_hjb(sysv, fluid, cost, big, d)
    probes = [np.zeros(field.dim)]
    for k in range(field.dim):
        for sgn in (-1.0, 1.0):
            pt = np.zeros(field.dim)
            pt[k] = sgn * 0.5 * float(hw[k])
            probes.append(pt)
    for pt in probes:
        a, b = field.interpolate(pt), field2.interpolate(pt)
        if abs(a - b) > 10.0 * grid.tol_pde * (1.0 + abs(a)):
            raise GridTooSmall(
                f"value at {pt} moves {abs(a - b):.3e} when the box doubles"
            )


def verify_policy_margin(field: ValueField, policy: MarkovPolicy, d: DriftData,
                         cost: CostSpec, radius: float, delta: float,
                         u_mesh: int = 16):
    """Largest pointwise suboptimality of `policy` against the minimized
    generator term over grid nodes in the Euclidean ball of `radius`.

    Returns (max margin, ok flag): ok when the policy's drift-gradient term
    plus running cost never exceeds the pointwise minimum by more than
    `delta` on the ball.
    """
    shape = field.shape
    dim = field.dim
    n_nodes = int(np.prod(shape))
    coords = np.indices(shape).reshape(dim, n_nodes)
    nodes = np.stack([field.axes[k][coords[k]] for k in range(dim)], axis=1)
    inside = (nodes**2).sum(axis=1) <= radius**2
    grads = field.gradient_centered().reshape(n_nodes, dim)

    best = np.full(n_nodes, np.inf)
    for u, v in _candidate_controls(d, cost, u_mesh):
        b = drift_batch(nodes, u, v, d)
        val = (b * grads).sum(axis=1) + cost.control_cost_batch(nodes, u)
        np.minimum(best, val, out=best)

    uv = policy.control_batch(nodes[inside])
    margins = np.empty(uv.shape[0])
    g_in = grads[inside]
    x_in = nodes[inside]
    for row in range(uv.shape[0]):
        u = uv[row, : d.num_classes]
        v = uv[row, d.num_classes:]
        b = drift(x_in[row], u, v, d)
        margins[row] = float(b @ g_in[row]) + cost.control_cost(x_in[row], u)
    gap = margins - best[inside]
    worst = float(gap.max()) if gap.size else 0.0
    return worst, worst <= delta


# ---------------------------------------------------------------------------
# controlled-diffusion Monte Carlo
# ---------------------------------------------------------------------------

def choose_horizon(cost: CostSpec, gamma: float, tail_tol: float,
                   moment_cap: float = 10.0) -> float:
    """Horizon making the discounted tail bound at most `tail_tol`."""
    bound = cost.bound()
    if bound is None:
        bound = cost.growth_bound(moment_cap)
    if bound <= 0:
        return 1.0
    return max(1.0, math.log(bound / (gamma * tail_tol)) / gamma)


def simulate_controlled_diffusion(x0, policy: MarkovPolicy, d: DriftData,
                                  cost: CostSpec, gamma: float, horizon: float,
                                  dt: float, paths: int, seed: int):
    """Euler-Maruyama estimate of the discounted cost from x0 under the
    feedback policy; returns (mean, standard error, tail bound).

    The per-step cost increment integrates the discount exactly against the
    piecewise-constant integrand.  Raises StepTooLarge when the drift's
    Lipschitz bound times dt exceeds 1/2.
    """
    if dt <= 0 or horizon <= 0:
        raise SchemaError("dt and horizon must be positive")
    if d.lipschitz_bound() * dt > 0.5:
        raise StepTooLarge(
            f"lipschitz bound {d.lipschitz_bound():.3g} times dt {dt} exceeds 0.5"
        )
    steps = int(round(horizon / dt))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    x = np.tile(np.asarray(x0, dtype=float), (paths, 1))
    total = np.zeros(paths)
    sq = math.sqrt(dt)
    for k in range(steps):
        uv = policy.control_batch(x)
        u = uv[:, : d.num_classes]
        v = uv[:, d.num_classes:]
        s = x.sum(axis=1)
        splus = np.maximum(s, 0.0)
        sminus = np.maximum(-s, 0.0)
        margins = np.concatenate([x - splus[:, None] * u, -sminus[:, None] * v], axis=1)
        psi = margins @ d.fm.T
        b = -(psi @ d.class_rate_agg.T) - d.theta[None, :] * (splus[:, None] * u) + d.ell
        lvals = _control_cost_rows(cost, x, u)
        w0 = math.exp(-gamma * k * dt)
        w1 = math.exp(-gamma * (k + 1) * dt)
        total += lvals * (w0 - w1) / gamma
        noise = rng.standard_normal((paths, d.num_classes))
        x = x + b * dt + d.r[None, :] * sq * noise
    mean = float(total.mean())
    se = float(total.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
    bound = cost.bound()
    tail = math.inf if bound is None else bound * math.exp(-gamma * horizon) / gamma
    return mean, se, tail


def _control_cost_rows(cost: CostSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if cost.kind == "zero":
        return np.zeros(x.shape[0])
    if cost.kind == "constant":
        return np.full(x.shape[0], cost.value)
    s = np.maximum(x.sum(axis=1), 0.0)
    val = s**cost.alpha * (np.asarray(cost.c)[None, :] * u**cost.alpha).sum(axis=1)
    if cost.truncate is not None:
        val = np.minimum(val, cost.truncate)
    return val


# ---------------------------------------------------------------------------
# binary containers for value and policy artifacts
# ---------------------------------------------------------------------------

def _write_blob(path, header: dict, payload: np.ndarray):
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(raw)))
        f.write(raw)
        f.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def _read_blob(path):
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise SchemaError(f"{path}: not a treeq binary artifact")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise SchemaError(f"{path}: unsupported container version {version}")
        header = json.loads(f.read(hlen).decode())
        payload = np.frombuffer(f.read(), dtype="<f8")
    return header, payload


def save_value_field(field: ValueField, path) -> None:
    header = {
        "kind": "value",
        "shape": list(field.shape),
        "axes_lo": [float(a[0]) for a in field.axes],
        "axes_hi": [float(a[-1]) for a in field.axes],
        "gamma": field.gamma,
        "residual": field.residual,
        "tol_pde": field.tol_pde,
        "tol_H": field.tol_h,
    }
    _write_blob(path, header, field.values.ravel())


def load_value_field(path) -> ValueField:
    header, payload = _read_blob(path)
    if header.get("kind") != "value":
        raise SchemaError(f"{path}: not a value artifact")
    shape = tuple(header["shape"])
    axes = [
        np.linspace(lo, hi, m)
        for lo, hi, m in zip(header["axes_lo"], header["axes_hi"], shape)
    ]
    return ValueField(axes, payload.reshape(shape), header["gamma"],
                      header["residual"], header["tol_pde"], header["tol_H"])


def save_markov_policy(policy: MarkovPolicy, path, extra: dict = None) -> None:
    header = {
        "kind": "policy",
        "mode": policy.mode,
        "num_classes": policy.num_classes,
        "num_stations": policy.num_stations,
    }
    if extra:
        header["extra"] = extra
    if policy.mode == "constant":
        payload = policy.const_uv
    elif policy.mode == "table":
        header["shape"] = [len(a) for a in policy.axes]
        header["axes_lo"] = [float(a[0]) for a in policy.axes]
        header["axes_hi"] = [float(a[-1]) for a in policy.axes]
        payload = policy.table.ravel()
    elif policy.mode == "mollified":
        if policy.base.mode != "table":
            raise SchemaError("only table-backed mollified policies are serializable")
        header["eps"] = policy.eps
        header["shape"] = [len(a) for a in policy.base.axes]
        header["axes_lo"] = [float(a[0]) for a in policy.base.axes]
        header["axes_hi"] = [float(a[-1]) for a in policy.base.axes]
        payload = policy.base.table.ravel()
    else:
        raise SchemaError(f"unknown policy mode {policy.mode!r}")
    _write_blob(path, header, payload)


def load_markov_policy(path) -> MarkovPolicy:
    header, payload = _read_blob(path)
    if header.get("kind") != "policy":
        raise SchemaError(f"{path}: not a policy artifact")
    ncl = header["num_classes"]
    nst = header["num_stations"]
    mode = header["mode"]
    if mode == "constant":
        return MarkovPolicy(ncl, nst, mode="constant", const_uv=payload)
    shape = tuple(header["shape"])
    axes = [
        np.linspace(lo, hi, m)
        for lo, hi, m in zip(header["axes_lo"], header["axes_hi"], shape)
    ]
    table = payload.reshape(int(np.prod(shape)), ncl + nst)
    base = MarkovPolicy.from_table(axes, table, ncl, nst)
    if mode == "table":
        return base
    if mode == "mollified":
        return mollify_policy(base, float(header["eps"]))
    raise SchemaError(f"unknown policy mode {mode!r}")
