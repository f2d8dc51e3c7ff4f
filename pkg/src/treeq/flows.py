"""Tree flow primitives.

A treelike activity graph admits exactly one flow assignment with given
class row sums and station column sums (equal totals).  Everything here is
exact arithmetic on that structure: the flow solve by leaf peeling, its
matrix form, the operator norm constant over unit margins, sum-preserving
rounding, and the unit-by-unit routing loop used by nonpreemptive policies.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import (
    HypothesisViolated,
    MalformedState,
    MarginMismatch,
    NegativeComponent,
)
from .system import TreeIndex


def solve_flow(alpha, beta, tree: TreeIndex, check=True):
    """Unique per-edge flow with row sums `alpha` (classes) and column sums
    `beta` (stations); zero off-edges by construction.

    Peels leaves in the fixed elimination order: a leaf's single remaining
    edge must carry that vertex's residual margin, which triangularizes the
    system.  Exact up to float round-off, O(I+J), linear in (alpha, beta).
    """
    alpha = [float(a) for a in alpha]
    beta = [float(b) for b in beta]
    if check:
        sa, sb = math.fsum(alpha), math.fsum(beta)
        norm_a = math.fsum(abs(a) for a in alpha)
        if abs(sa - sb) > 1e-9 * (1.0 + norm_a):
            raise MarginMismatch(f"margin totals differ: {sa} vs {sb}")
    ncl = tree.num_classes
    psi = [0.0] * len(tree.edges)
    a = list(alpha)
    b = list(beta)
    for v, e in tree.leaf_order:
        i, j = tree.edges[e]
        if v < ncl:
            psi[e] = a[i]
            b[j] -= a[i]
        else:
            psi[e] = b[j]
            a[i] -= b[j]
    return psi


def flow_matrix(tree: TreeIndex) -> np.ndarray:
    """Matrix M with solve_flow(alpha, beta) = M @ concat(alpha, beta).

    Columns are the flows of unit margins; rows are edges in tree order.
    Unit class margins pair with a zero station total, so margin checking is
    skipped while building.
    """
    ncl, nst = tree.num_classes, tree.num_stations
    ne = len(tree.edges)
    m = np.zeros((ne, ncl + nst))
    for p in range(ncl + nst):
        alpha = [0.0] * ncl
        beta = [0.0] * nst
        if p < ncl:
            alpha[p] = 1.0
        else:
            beta[p - ncl] = 1.0
        m[:, p] = solve_flow(alpha, beta, tree, check=False)
    return m


def flow_norm_constant(tree: TreeIndex) -> float:
    """Largest per-edge flow magnitude over margin pairs with equal totals
    and l1 norms at most 1.

    The feasible set is the product of two l1 balls cut by the equal-totals
    hyperplane; its extreme points are sign-matched unit pairs (one class
    coordinate, one station coordinate), so enumerating those is exact.
    """
    m = flow_matrix(tree)
    ncl = tree.num_classes
    best = 0.0
    for p in range(ncl):
        for q in range(ncl, ncl + tree.num_stations):
            best = max(best, float(np.max(np.abs(m[:, p] + m[:, q]))))
    return best


def round_preserving_sum(y):
    """Floor all but the last component; the last absorbs every fractional part.

    The result sums to the same total, is integer-valued whenever the total
    is an integer, and deviates from `y` by at most 2k in l1 norm.
    """
    y = [float(v) for v in y]
    if any(v < 0 for v in y):
        raise NegativeComponent("round_preserving_sum needs nonnegative input")
    out = [math.floor(v) for v in y]
    out[-1] += math.fsum(y) - math.fsum(out)
    return out


def apportion_integer(y, total: int):
    """Integer split of `total` proportional to nonnegative weights `y`
    (which should sum to `total` up to rounding): floors all but the last
    component, the last takes the exact remainder.

    Unlike round_preserving_sum this is guaranteed integer-valued, which the
    simulator needs when the fractional parts do not cancel exactly in
    floating point.
    """
    y = [float(v) for v in y]
    if any(v < 0 for v in y) or total < 0:
        raise NegativeComponent("apportion_integer needs nonnegative input")
    out = [int(v) for v in y]
    head = sum(out[:-1])
    if head > total:
        # only reachable through float drift when sum(y) slightly exceeds
        # total; shave the overshoot deterministically
        excess = head - total
        for k in range(len(out) - 1):
            take = min(excess, out[k])
            out[k] -= take
            excess -= take
            if excess == 0:
                break
        head = total
    out[-1] = total - head
    return out


def route_nonblocked(psi, x, y, z, nonblocked, tree: TreeIndex):
    """Move queued customers one at a time onto idle servers through the
    allowed activities until no allowed pair has both a queue and idle
    capacity; smallest class index first, then smallest station index.

    Inputs are integers satisfying the balance relations (per-class row sums
    equal population minus queue, per-station column sums equal the negated
    idle count); raises MalformedState otherwise.  Returns new
    (psi, x, y, z); x is unchanged, y and z never increase, psi never
    decreases, and the loop runs at most sum(y) times.
    """
    psi = [int(v) for v in psi]
    x = [int(v) for v in x]
    y = [int(v) for v in y]
    z = [int(v) for v in z]
    ncl = tree.num_classes
    if any(v < 0 for v in y) or any(v < 0 for v in z):
        raise MalformedState("queue and idle counts must be nonnegative")
    row = [0] * ncl
    col = [0] * tree.num_stations
    for e, (i, j) in enumerate(tree.edges):
        row[i] += psi[e]
        col[j] += psi[e]
    for i in range(ncl):
        if row[i] != x[i] - y[i]:
            raise MalformedState(f"class {i + 1} row sum {row[i]} != {x[i]} - {y[i]}")
    for j in range(tree.num_stations):
        if col[j] != -z[j]:
            raise MalformedState(f"station {j + 1} column sum {col[j]} != -{z[j]}")

    allowed = sorted(set(nonblocked))
    edge_index = {pair: e for e, pair in enumerate(tree.edges)}
    for pair in allowed:
        if tuple(pair) not in edge_index:
            raise MalformedState(f"{pair} is not an activity")
    while True:
        hit = None
        for (i, j) in allowed:
            if y[i] > 0 and z[j] > 0:
                hit = (i, j)
                break
        if hit is None:
            break
        i, j = hit
        y[i] -= 1
        z[j] -= 1
        psi[edge_index[(i, j)]] += 1
    return psi, x, y, z


def flow_gap_sides(psi, x, y, z, psi_check, x_check, y_check, z_check, tree: TreeIndex):
    """Both sides of the tracking gap bound: total flow discrepancy on the
    left, one-sided overshoot plus population shift on the right.

    Hypotheses checked: both tuples satisfy the balance relations, the
    reference queue/idle counts are nonnegative, and wherever the flow falls
    short of the reference the class queue or station idle count vanishes.
    Used as a test oracle: the left side is bounded by a tree-dependent
    multiple of the right, and is exactly zero whenever the right vanishes.
    """
    ne = len(tree.edges)
    psi = [float(v) for v in psi]
    psi_check = [float(v) for v in psi_check]

    def check_balance(p, xx, yy, zz, tag):
        row = [0.0] * tree.num_classes
        col = [0.0] * tree.num_stations
        for e, (i, j) in enumerate(tree.edges):
            row[i] += p[e]
            col[j] += p[e]
        for i in range(tree.num_classes):
            if abs(row[i] - (xx[i] - yy[i])) > 1e-9:
                raise HypothesisViolated(f"{tag}: class {i + 1} balance broken")
        for j in range(tree.num_stations):
            if abs(col[j] + zz[j]) > 1e-9:
                raise HypothesisViolated(f"{tag}: station {j + 1} balance broken")

    check_balance(psi, x, y, z, "flow")
    check_balance(psi_check, x_check, y_check, z_check, "reference")
    if any(v < -1e-12 for v in y_check) or any(v < -1e-12 for v in z_check):
        raise HypothesisViolated("reference queue/idle counts must be nonnegative")
    for e, (i, j) in enumerate(tree.edges):
        if psi[e] < psi_check[e] - 1e-12 and min(y[i], z[j]) > 1e-12:
            raise HypothesisViolated(
                f"activity ({i + 1},{tree.num_classes + j + 1}) undershoots with queue and idle both positive"
            )

    lhs = sum(abs(psi[e] - psi_check[e]) for e in range(ne))
    rhs = sum(max(psi[e] - psi_check[e], 0.0) for e in range(ne))
    rhs += sum(abs(a - b) for a, b in zip(x, x_check))
    return lhs, rhs
