"""Static fluid model: allocation fractions, fluid populations, and the
work-conservation radius constant.

The optimal allocation solves an equality system on the activity tree: each
class's capacity-weighted allocations absorb its arrival rate, and each
station's allocation fractions sum to one.  With I+J equations and I+J-1
edge unknowns, leaf peeling determines every unknown and leaves one
redundant equation whose residual is the criticality check.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import (
    NegativeAllocation,
    NonBasicActivity,
    NotCriticallyLoaded,
    SchemaError,
)
from .flows import flow_norm_constant, solve_flow
from .system import ValidatedSystem

CONSISTENCY_TOL = 1e-9
POSITIVITY_TOL = 1e-12


@dataclass(frozen=True)
class StaticFluid:
    """First-order solution: per-edge allocation fractions and flows, fluid
    populations, and the constants derived from them.

    `xi_star` and `psi_star` are indexed by tree edge order; `rho_star` is
    always 1 for accepted systems.
    """

    xi_star: tuple
    rho_star: float
    x_star: tuple
    psi_star: tuple
    c_g: float
    alpha0: float

    def min_psi(self) -> float:
        return min(self.psi_star)

    def to_json(self, sysv: ValidatedSystem) -> dict:
        def key(e):
            i, j = sysv.edges[e]
            return f"{i + 1},{sysv.num_classes + j + 1}"

        return {
            "schema": 1,
            "xi_star": {key(e): v for e, v in enumerate(self.xi_star)},
            "rho_star": self.rho_star,
            "x_star": list(self.x_star),
            "psi_star": {key(e): v for e, v in enumerate(self.psi_star)},
            "c_g": self.c_g,
            "alpha0": self.alpha0,
        }

    @classmethod
    def from_json(cls, obj: dict, sysv: ValidatedSystem) -> "StaticFluid":
        if obj.get("schema") != 1:
            raise SchemaError(f"unsupported fluid schema {obj.get('schema')!r}")

        def unkey(k):
            i, j = (int(p) for p in k.split(","))
            return (i - 1, j - sysv.num_classes - 1)

        xi_map = {unkey(k): float(v) for k, v in obj["xi_star"].items()}
        psi_map = {unkey(k): float(v) for k, v in obj["psi_star"].items()}
        return cls(
            xi_star=tuple(xi_map[pair] for pair in sysv.edges),
            rho_star=float(obj["rho_star"]),
            x_star=tuple(obj["x_star"]),
            psi_star=tuple(psi_map[pair] for pair in sysv.edges),
            c_g=float(obj["c_g"]),
            alpha0=float(obj["alpha0"]),
        )


def derive_fluid_quantities(xi_star, sysv: ValidatedSystem):
    """Fluid populations from allocation fractions: per-edge mass is the
    fraction times the station's capacity; a class's mass is the sum over
    its edges."""
    nu = sysv.spec.nu
    psi_star = [xi_star[e] * nu[j] for e, (_, j) in enumerate(sysv.edges)]
    x_star = [0.0] * sysv.num_classes
    for e, (i, _) in enumerate(sysv.edges):
        x_star[i] += psi_star[e]
    return tuple(x_star), tuple(psi_star)


def compute_alpha0(psi_star, c_g: float) -> float:
    """Radius constant of the region where full rearrangement is always
    feasible: smallest fluid activity mass over four times the flow norm
    constant."""
    return min(psi_star) / (4.0 * c_g)


def solve_static_fluid(
    sysv: ValidatedSystem,
    tol: float = CONSISTENCY_TOL,
    positivity_tol: float = POSITIVITY_TOL,
) -> StaticFluid:
    """Solve the allocation equality system by leaf peeling and derive the
    complete static fluid model.

    Raises NotCriticallyLoaded when the redundant equation's residual
    exceeds `tol` (relative), NegativeAllocation on a negative fraction, and
    NonBasicActivity when some fraction is not strictly positive
    (threshold `positivity_tol` scaled by min arrival rate).
    """
    tree = sysv.tree
    ncl = sysv.num_classes
    lam = sysv.spec.lam
    # class margins carry rates, station margins carry unit fractions
    a = list(lam)
    b = [1.0] * sysv.num_stations
    xi = [0.0] * len(sysv.edges)
    for v, e in tree.leaf_order:
        i, j = tree.edges[e]
        if v < ncl:
            xi[e] = a[i] / sysv.mu_bar(e)
            b[j] -= xi[e]
        else:
            xi[e] = b[j]
            a[i] -= sysv.mu_bar(e) * xi[e]
    root = tree.root
    if root < ncl:
        residual = abs(a[root]) / max(1.0, abs(lam[root]))
    else:
        residual = abs(b[root - ncl])
    if residual > tol:
        raise NotCriticallyLoaded(
            f"criticality residual {residual:.3e} exceeds {tol:.1e}; "
            "arrival rates do not exactly load every station"
        )

    pos_thr = positivity_tol * min(lam)
    for e, val in enumerate(xi):
        i, j = sysv.edges[e]
        label = f"({i + 1},{ncl + j + 1})"
        if val < -pos_thr:
            raise NegativeAllocation(f"xi{label} = {val:.3e} < 0")
        if val <= pos_thr:
            raise NonBasicActivity(f"xi{label} = {val:.3e} is not strictly positive")

    x_star, psi_star = derive_fluid_quantities(xi, sysv)
    c_g = flow_norm_constant(tree)
    alpha0 = compute_alpha0(psi_star, c_g)

    # the flow of the fluid populations against raw capacities must
    # reproduce the per-edge masses; cheap self-check of the tree solve
    back = solve_flow(x_star, sysv.spec.nu, tree)
    drift = max(abs(p - q) for p, q in zip(back, psi_star))
    if drift > 1e-9 * max(1.0, max(psi_star)):
        raise NotCriticallyLoaded(f"fluid self-check failed, drift {drift:.3e}")

    return StaticFluid(
        xi_star=tuple(xi),
        rho_star=1.0,
        x_star=x_star,
        psi_star=psi_star,
        c_g=c_g,
        alpha0=alpha0,
    )


def load_fluid(path, sysv: ValidatedSystem) -> StaticFluid:
    with open(path) as f:
        return StaticFluid.from_json(json.load(f), sysv)


def save_fluid(fluid: StaticFluid, sysv: ValidatedSystem, path) -> None:
    with open(path, "w") as f:
        json.dump(fluid.to_json(sysv), f, indent=2, sort_keys=True)
        f.write("\n")
