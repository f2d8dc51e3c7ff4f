"""Treelike system topology, model parameters, and their validation.

Classes are labeled 1..I and stations I+1..I+J in all external
representations (JSON files, error messages).  Internally both are 0-based:
class i in [0, I) and station j in [0, J); tree algorithms use merged vertex
ids 0..I-1 for classes and I..I+J-1 for stations.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import (
    CycleDetected,
    Disconnected,
    NonpositiveRate,
    RateEdgeMismatch,
    SchemaError,
)

_INTERARRIVAL_KINDS = ("exponential", "deterministic", "lognormal", "uniform")


@dataclass(frozen=True)
class InterarrivalSpec:
    """Unit-mean interarrival distribution with a declared finite moment order.

    The simulator draws the unscaled variable (mean 1) and divides by the
    class arrival rate.  `scv` is the squared coefficient of variation and
    must be consistent with the distribution kind; `moment_order` is the
    largest moment the caller relies on being finite (all supported kinds
    have all moments finite, so this is a declaration, not a constraint on
    the kind).
    """

    kind: str = "exponential"
    scv: float = 1.0
    moment_order: float = 8.0

    def __post_init__(self):
        if self.kind not in _INTERARRIVAL_KINDS:
            raise SchemaError(f"unknown interarrival kind {self.kind!r}")
        if not math.isfinite(self.scv) or self.scv < 0:
            raise SchemaError(f"scv must be finite and >= 0, got {self.scv}")
        if not math.isfinite(self.moment_order) or self.moment_order <= 0:
            raise SchemaError("moment_order must be finite and positive")
        if self.kind == "exponential" and abs(self.scv - 1.0) > 1e-12:
            raise SchemaError("exponential interarrivals have scv = 1")
        if self.kind == "deterministic" and self.scv != 0.0:
            raise SchemaError("deterministic interarrivals have scv = 0")
        if self.kind == "uniform" and not self.scv < 1 / 3:
            raise SchemaError("uniform interarrivals require scv < 1/3 to stay positive")
        if self.kind == "lognormal" and self.scv <= 0:
            raise SchemaError("lognormal interarrivals require scv > 0")

    def sample_unscaled(self, rng, size=None):
        """Draw the mean-1 interarrival variable."""
        if self.kind == "exponential":
            return rng.exponential(1.0, size)
        if self.kind == "deterministic":
            return 1.0 if size is None else [1.0] * size
        if self.kind == "uniform":
            w = math.sqrt(3.0 * self.scv)
            return rng.uniform(1.0 - w, 1.0 + w, size)
        # lognormal: mean 1 forces mu = -sigma^2/2
        s2 = math.log1p(self.scv)
        return rng.lognormal(-0.5 * s2, math.sqrt(s2), size)

    def supports_cost_growth(self, m_l: float) -> bool:
        """Whether the declared moment order covers a cost of growth order m_l.

        True when moment_order > 2*m_l, or when
        moment_order*(moment_order-2)/(5*moment_order-2) > m_l.
        """
        m_a = self.moment_order
        if m_a > 2.0 * m_l:
            return True
        if m_a > 2.0 and m_a * (m_a - 2.0) / (5.0 * m_a - 2.0) > m_l:
            return True
        return False

    def to_json(self) -> dict:
        return {"kind": self.kind, "scv": self.scv, "moment_order": self.moment_order}

    @classmethod
    def from_json(cls, obj: dict) -> "InterarrivalSpec":
        return cls(
            kind=obj.get("kind", "exponential"),
            scv=float(obj.get("scv", 1.0)),
            moment_order=float(obj.get("moment_order", 8.0)),
        )


@dataclass(frozen=True)
class SystemSpec:
    """Complete parametric model of a multiclass many-server system.

    `edges` lists activities as 0-based (class, station) pairs.  `mu` and
    `mu_hat` are keyed by those pairs; `lam`, `theta`, `lam_hat` are per
    class; `nu` per station.  Rates are stored exactly as given; the
    scale-n quantities are derived on demand (see ValidatedSystem.rates_for).
    """

    num_classes: int
    num_stations: int
    edges: tuple
    lam: tuple
    mu: dict
    theta: tuple
    nu: tuple
    lam_hat: tuple = None
    mu_hat: dict = None
    gamma: float = 1.0
    interarrival: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(sorted(tuple(e) for e in self.edges)))
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))
        object.__setattr__(self, "nu", tuple(float(v) for v in self.nu))
        object.__setattr__(self, "mu", {tuple(k): float(v) for k, v in self.mu.items()})
        if self.lam_hat is None:
            object.__setattr__(self, "lam_hat", (0.0,) * self.num_classes)
        else:
            object.__setattr__(self, "lam_hat", tuple(float(v) for v in self.lam_hat))
        if self.mu_hat is None:
            object.__setattr__(self, "mu_hat", {e: 0.0 for e in self.edges})
        else:
            object.__setattr__(
                self, "mu_hat", {tuple(k): float(v) for k, v in self.mu_hat.items()}
            )
        if self.interarrival is None:
            object.__setattr__(
                self, "interarrival", tuple(InterarrivalSpec() for _ in range(self.num_classes))
            )
        else:
            object.__setattr__(self, "interarrival", tuple(self.interarrival))

    def station_label(self, j: int) -> int:
        """External label of 0-based station j."""
        return self.num_classes + j + 1

    def to_json(self) -> dict:
        i0 = 1  # classes are 1-based externally
        return {
            "schema": 1,
            "classes": self.num_classes,
            "stations": self.num_stations,
            "activities": [[i + i0, self.station_label(j)] for (i, j) in self.edges],
            "lambda": list(self.lam),
            "mu": {f"{i + i0},{self.station_label(j)}": v for (i, j), v in sorted(self.mu.items())},
            "theta": list(self.theta),
            "nu": list(self.nu),
            "lambda_hat": list(self.lam_hat),
            "mu_hat": {
                f"{i + i0},{self.station_label(j)}": v for (i, j), v in sorted(self.mu_hat.items())
            },
            "gamma": self.gamma,
            "interarrival": [ia.to_json() for ia in self.interarrival],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SystemSpec":
        if obj.get("schema") != 1:
            raise SchemaError(f"unsupported system schema {obj.get('schema')!r}")
        num_classes = int(obj["classes"])
        num_stations = int(obj["stations"])

        def parse_pair(i, j):
            i, j = int(i), int(j)
            if not 1 <= i <= num_classes:
                raise SchemaError(f"class label {i} out of range 1..{num_classes}")
            if not num_classes + 1 <= j <= num_classes + num_stations:
                raise SchemaError(
                    f"station label {j} out of range "
                    f"{num_classes + 1}..{num_classes + num_stations}"
                )
            return (i - 1, j - num_classes - 1)

        edges = [parse_pair(i, j) for i, j in obj["activities"]]
        mu = {parse_pair(*k.split(",")): float(v) for k, v in obj["mu"].items()}
        mu_hat = {parse_pair(*k.split(",")): float(v) for k, v in obj.get("mu_hat", {}).items()}
        ia = obj.get("interarrival")
        return cls(
            num_classes=num_classes,
            num_stations=num_stations,
            edges=tuple(edges),
            lam=tuple(obj["lambda"]),
            mu=mu,
            theta=tuple(obj["theta"]),
            nu=tuple(obj["nu"]),
            lam_hat=tuple(obj.get("lambda_hat", [0.0] * num_classes)),
            mu_hat=mu_hat or None,
            gamma=float(obj.get("gamma", 1.0)),
            interarrival=tuple(InterarrivalSpec.from_json(x) for x in ia) if ia else None,
        )


@dataclass(frozen=True)
class TreeIndex:
    """Adjacency structure and a fixed leaf-elimination order for the activity tree.

    Vertices: 0..I-1 are classes, I..I+J-1 are stations.  `leaf_order` lists
    (vertex, edge) pairs; removing vertices in this order always removes a
    vertex of degree 1 in the remaining graph, and the listed edge is its
    unique remaining edge.  Ties break on the smallest vertex id.
    """

    num_classes: int
    num_stations: int
    edges: tuple
    adjacency: tuple  # per vertex, tuple of (edge index, other vertex)
    leaf_order: tuple  # ((vertex, edge index), ...), length I+J-1
    root: int

    def is_class_vertex(self, v: int) -> bool:
        return v < self.num_classes

    def class_edges(self, i: int) -> tuple:
        """Edge indices incident to class i."""
        return tuple(e for e, _ in self.adjacency[i])

    def station_edges(self, j: int) -> tuple:
        return tuple(e for e, _ in self.adjacency[self.num_classes + j])


def _build_tree_index(num_classes, num_stations, edges) -> TreeIndex:
    nv = num_classes + num_stations
    adjacency = [[] for _ in range(nv)]
    for e, (i, j) in enumerate(edges):
        adjacency[i].append((e, num_classes + j))
        adjacency[num_classes + j].append((e, i))

    degree = [len(a) for a in adjacency]
    removed_v = [False] * nv
    removed_e = [False] * len(edges)
    order = []
    for _ in range(len(edges)):
        leaf = min(
            v for v in range(nv) if not removed_v[v] and degree[v] == 1
        )
        e = next(ei for ei, _ in adjacency[leaf] if not removed_e[ei])
        order.append((leaf, e))
        removed_v[leaf] = True
        removed_e[e] = True
        i, j = edges[e]
        for v in (i, num_classes + j):
            degree[v] -= 1
    root = next(v for v in range(nv) if not removed_v[v])
    return TreeIndex(
        num_classes=num_classes,
        num_stations=num_stations,
        edges=tuple(edges),
        adjacency=tuple(tuple(a) for a in adjacency),
        leaf_order=tuple(order),
        root=root,
    )


@dataclass(frozen=True)
class ValidatedSystem:
    """A SystemSpec that passed structural validation, plus its TreeIndex.

    Immutable; safe to share across threads and processes.
    """

    spec: SystemSpec
    tree: TreeIndex

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def num_stations(self):
        return self.spec.num_stations

    @property
    def edges(self):
        return self.spec.edges

    def mu_bar(self, e: int) -> float:
        """Station-capacity-weighted service rate of edge e."""
        i, j = self.spec.edges[e]
        return self.spec.nu[j] * self.spec.mu[(i, j)]

    def mu_edge(self, e: int) -> float:
        i, j = self.spec.edges[e]
        return self.spec.mu[(i, j)]

    def mu_hat_edge(self, e: int) -> float:
        i, j = self.spec.edges[e]
        return self.spec.mu_hat.get((i, j), 0.0)

    def rates_for(self, n: int):
        """Scale-n parameters: per-class arrival rates, per-edge service
        rates, per-class abandonment rates, per-station server counts.

        Arrival rates grow linearly with a square-root correction, service
        rates get a vanishing correction, and server counts are the rounded
        linear head counts.
        """
        sq = math.sqrt(n)
        lam_n = [n * l + sq * lh for l, lh in zip(self.spec.lam, self.spec.lam_hat)]
        mu_n = [self.mu_edge(e) + self.mu_hat_edge(e) / sq for e in range(len(self.edges))]
        theta_n = list(self.spec.theta)
        servers = [int(round(n * v)) for v in self.spec.nu]
        if any(l <= 0 for l in lam_n):
            raise NonpositiveRate(f"arrival rate not positive at n={n}")
        if any(m <= 0 for m in mu_n):
            raise NonpositiveRate(f"service rate not positive at n={n}")
        if any(s < 1 for s in servers):
            raise NonpositiveRate(f"server count below 1 at n={n}")
        return lam_n, mu_n, theta_n, servers


def validate(spec: SystemSpec) -> ValidatedSystem:
    """Check the topology is a connected tree and all rates legal.

    Raises CycleDetected, Disconnected, RateEdgeMismatch, or NonpositiveRate.
    Deterministic: the same spec always yields the same ValidatedSystem.
    """
    ncl, nst = spec.num_classes, spec.num_stations
    if ncl < 1 or nst < 1:
        raise NonpositiveRate("need at least one class and one station")
    for (i, j) in spec.edges:
        if not (0 <= i < ncl and 0 <= j < nst):
            raise SchemaError(f"activity ({i},{j}) out of range")
    edge_set = set(spec.edges)
    if len(edge_set) != len(spec.edges):
        raise SchemaError("duplicate activity")

    for v, name in ((spec.lam, "lambda"), (spec.nu, "nu")):
        if any(not math.isfinite(x) or x <= 0 for x in v):
            raise NonpositiveRate(f"{name} entries must be finite and > 0")
    if any(not math.isfinite(x) or x < 0 for x in spec.theta):
        raise NonpositiveRate("theta entries must be finite and >= 0")
    if not math.isfinite(spec.gamma) or spec.gamma <= 0:
        raise NonpositiveRate("gamma must be finite and > 0")
    if len(spec.lam) != ncl or len(spec.theta) != ncl or len(spec.lam_hat) != ncl:
        raise SchemaError("per-class vectors must have length I")
    if len(spec.nu) != nst:
        raise SchemaError("nu must have length J")
    if len(spec.interarrival) != ncl:
        raise SchemaError("interarrival must have length I")
    if any(not math.isfinite(x) for x in spec.lam_hat):
        raise SchemaError("lambda_hat entries must be finite")

    # service rate positive exactly on the edge set
    for pair, rate in spec.mu.items():
        if not math.isfinite(rate):
            raise NonpositiveRate("mu entries must be finite")
        if pair in edge_set:
            if rate <= 0:
                raise RateEdgeMismatch(f"mu{pair} = {rate} on an activity edge")
        elif rate != 0.0:
            raise RateEdgeMismatch(f"mu{pair} = {rate} off the activity edges")
    for pair in edge_set:
        if pair not in spec.mu:
            raise RateEdgeMismatch(f"mu{pair} missing for an activity edge")
    for pair in spec.mu_hat:
        if pair not in edge_set:
            if spec.mu_hat[pair] != 0.0:
                raise RateEdgeMismatch(f"mu_hat{pair} off the activity edges")
        if not math.isfinite(spec.mu_hat.get(pair, 0.0)):
            raise SchemaError("mu_hat entries must be finite")

    # connectivity first, then the edge count pins down acyclicity
    nv = ncl + nst
    adj = [[] for _ in range(nv)]
    for (i, j) in spec.edges:
        adj[i].append(ncl + j)
        adj[ncl + j].append(i)
    seen = [False] * nv
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    if not all(seen):
        raise Disconnected("activity graph is not connected")
    if len(spec.edges) != nv - 1:
        raise CycleDetected(
            f"{len(spec.edges)} activities on {nv} vertices; a tree needs {nv - 1}"
        )

    return ValidatedSystem(spec=spec, tree=_build_tree_index(ncl, nst, spec.edges))


def leaf_order(tree: TreeIndex) -> tuple:
    """Leaf-elimination order of a validated tree: ((vertex, edge index), ...)."""
    return tree.leaf_order


def load_system(path) -> SystemSpec:
    with open(path) as f:
        return SystemSpec.from_json(json.load(f))


def save_system(spec: SystemSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
