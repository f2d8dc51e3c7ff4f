"""Running-cost families on the diffusion-scaled state.

A cost is defined natively on (state, per-activity population) through the
queue vector: class i's queue is its population minus its total in-service
count.  The control form substitutes the simplex split of the total
imbalance, so both the simulator and the diffusion solver price the same
functional.

Built-in families:
  zero             -- no running cost
  constant         -- flat rate c0
  queue_power      -- sum_i c_i * (queue_i)^alpha, optionally truncated at M
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError

_KINDS = ("zero", "constant", "queue_power")


@dataclass(frozen=True)
class CostSpec:
    """Running cost with the structural flags the solvers key on.

    `m_l` is the polynomial growth order; `bounded` whether the cost is
    bounded; `convex_in_control` whether the control form is convex on the
    product simplex (required by the mollified-policy route);
    `vertex_exact` whether minimizing it jointly with an affine term over
    the product simplex is exact at vertices; `holder_policy` declares that
    the induced feedback is locally Holder away from balanced states;
    `assumption_case` records which large-time-estimate regime the model
    satisfies ("rates", "diameter", or "bounded") -- informational only.
    """

    kind: str = "zero"
    alpha: float = 1.0
    c: tuple = ()
    truncate: float = None
    value: float = 0.0
    m_l: float = 1.0
    bounded: bool = True
    convex_in_control: bool = True
    vertex_exact: bool = True
    holder_policy: bool = True
    assumption_case: str = "bounded"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SchemaError(f"unknown cost kind {self.kind!r}")
        if self.kind == "queue_power":
            if self.alpha < 1:
                raise SchemaError("queue_power needs alpha >= 1")
            if not self.c:
                raise SchemaError("queue_power needs per-class weights c")
            object.__setattr__(self, "c", tuple(float(v) for v in self.c))

    # -- native form on (state, flows) ---------------------------------------

    def queue_cost(self, y):
        """Cost as a function of the queue vector alone."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        s = sum(ci * max(yi, 0.0) ** self.alpha for ci, yi in zip(self.c, y))
        return min(s, self.truncate) if self.truncate is not None else s

    def state_flow_cost(self, x, psi_rows):
        """Cost from the scaled population vector and per-class totals in
        service (row sums of the flow matrix)."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        return self.queue_cost([xi - ri for xi, ri in zip(x, psi_rows)])

    # -- control form ---------------------------------------------------------

    def control_cost(self, x, u):
        """Cost of splitting the positive total imbalance across classes by
        the simplex weights `u`."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        s = max(sum(x), 0.0)
        val = s**self.alpha * sum(ci * ui**self.alpha for ci, ui in zip(self.c, u))
        return min(val, self.truncate) if self.truncate is not None else val

    def control_cost_batch(self, x_nodes: np.ndarray, u) -> np.ndarray:
        """Vectorized control_cost over rows of x_nodes."""
        n = x_nodes.shape[0]
        if self.kind == "zero":
            return np.zeros(n)
        if self.kind == "constant":
            return np.full(n, self.value)
        s = np.maximum(x_nodes.sum(axis=1), 0.0)
        coef = sum(ci * ui**self.alpha for ci, ui in zip(self.c, np.asarray(u)))
        val = s**self.alpha * coef
        if self.truncate is not None:
            val = np.minimum(val, self.truncate)
        return val

    def bound(self) -> float:
        """Uniform upper bound when bounded, else None."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        return self.truncate

    def growth_bound(self, radius: float) -> float:
        """Upper bound for states with l1 norm up to `radius`."""
        b = self.bound()
        if b is not None:
            return b
        return max(self.c) * radius**self.alpha

    # -- serialization --------------------------------------------------------

    def to_json(self) -> dict:
        obj = {
            "schema": 1,
            "kind": self.kind,
            "m_L": self.m_l,
            "bounded": self.bounded,
            "convex_in_control": self.convex_in_control,
            "vertex_exact": self.vertex_exact,
            "holder_policy": self.holder_policy,
            "assumption_case": self.assumption_case,
        }
        if self.kind == "constant":
            obj["value"] = self.value
        if self.kind == "queue_power":
            obj["alpha"] = self.alpha
            obj["c"] = list(self.c)
            if self.truncate is not None:
                obj["truncate"] = self.truncate
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "CostSpec":
        if obj.get("schema") != 1:
            raise SchemaError(f"unsupported cost schema {obj.get('schema')!r}")
        kind = obj["kind"]
        if kind == "zero":
            return zero_cost()
        if kind == "constant":
            return constant_cost(float(obj["value"]))
        if kind == "queue_power":
            return queue_power_cost(
                alpha=float(obj.get("alpha", 1.0)),
                c=tuple(obj["c"]),
                truncate=obj.get("truncate"),
                holder_policy=obj.get("holder_policy"),
                assumption_case=obj.get("assumption_case"),
            )
        raise SchemaError(f"unknown cost kind {kind!r}")


def zero_cost() -> CostSpec:
    return CostSpec(kind="zero", m_l=1.0, bounded=True, assumption_case="bounded")


def constant_cost(value: float) -> CostSpec:
    return CostSpec(kind="constant", value=float(value), m_l=1.0, bounded=True,
                    assumption_case="bounded")


def queue_power_cost(alpha: float, c, truncate=None, holder_policy=None,
                     assumption_case=None) -> CostSpec:
    """Weighted power of per-class queue lengths, optionally truncated.

    Flags are derived: truncation bounds the cost; the control form is
    convex on the simplex for alpha >= 1 without truncation, and with
    truncation only in the weight-uniform linear case (where it does not
    depend on the split at all).  Joint minimization with an affine term is
    vertex-exact for alpha = 1 (affine, and truncation keeps it concave).
    """
    c = tuple(float(v) for v in c)
    alpha = float(alpha)
    truncate = None if truncate is None else float(truncate)
    bounded = truncate is not None
    uniform = len(set(c)) == 1
    convex = (truncate is None and alpha >= 1.0) or (bounded and alpha == 1.0 and uniform)
    if holder_policy is None:
        holder_policy = alpha >= 2.0 or (alpha == 1.0 and uniform)
    if assumption_case is None:
        assumption_case = "bounded" if bounded else "rates"
    return CostSpec(
        kind="queue_power",
        alpha=alpha,
        c=c,
        truncate=truncate,
        m_l=max(alpha, 1.0),
        bounded=bounded,
        convex_in_control=convex,
        vertex_exact=alpha == 1.0,
        holder_policy=bool(holder_policy),
        assumption_case=assumption_case,
    )


def load_cost(path) -> CostSpec:
    with open(path) as f:
        return CostSpec.from_json(json.load(f))


def save_cost(cost: CostSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(cost.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
