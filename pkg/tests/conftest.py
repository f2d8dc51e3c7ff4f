import random

import pytest

from treeq.costs import queue_power_cost
from treeq.fluid import solve_static_fluid
from treeq.system import InterarrivalSpec, SystemSpec, validate


def single_station_spec(lam_hat=-0.5, theta=0.0, gamma=1.0, nu=1.0):
    return SystemSpec(
        num_classes=1,
        num_stations=1,
        edges=[(0, 0)],
        lam=(1.0,),
        mu={(0, 0): 1.0},
        theta=(theta,),
        nu=(nu,),
        lam_hat=(lam_hat,),
        gamma=gamma,
    )


def vee_spec(mu2=2.0, lam_hat=(-0.25, -0.25), theta=(0.0, 0.0)):
    """Two classes feeding one station at different rates."""
    return SystemSpec(
        num_classes=2,
        num_stations=1,
        edges=[(0, 0), (1, 0)],
        lam=(0.5, 0.5 * mu2),
        mu={(0, 0): 1.0, (1, 0): mu2},
        theta=theta,
        nu=(1.0,),
        lam_hat=lam_hat,
        gamma=1.0,
    )


def wye_spec():
    """Two classes, two stations: station A serves both, B serves class 2;
    rates chosen so every activity carries fluid mass."""
    return SystemSpec(
        num_classes=2,
        num_stations=2,
        edges=[(0, 0), (1, 0), (1, 1)],
        lam=(0.5, 1.5),
        mu={(0, 0): 1.0, (1, 0): 1.0, (1, 1): 1.0},
        theta=(0.0, 0.0),
        nu=(1.0, 1.0),
        lam_hat=(-0.25, -0.25),
        gamma=1.0,
    )


def four_class_spec():
    """Four classes, three stations, six activities (a 7-vertex tree)."""
    mu = {(0, 0): 1.0, (1, 0): 1.2, (1, 1): 0.8, (2, 1): 1.0, (2, 2): 1.5, (3, 2): 0.7}
    edges = sorted(mu)
    # allocations with unit column sums keep the system critically loaded
    xi = {(0, 0): 0.6, (1, 0): 0.4, (1, 1): 0.5, (2, 1): 0.5, (2, 2): 0.3, (3, 2): 0.7}
    nu = (1.0, 0.8, 1.2)
    lam = [0.0] * 4
    for (i, j), x in xi.items():
        lam[i] += nu[j] * mu[(i, j)] * x
    return SystemSpec(
        num_classes=4,
        num_stations=3,
        edges=edges,
        lam=tuple(lam),
        mu=mu,
        theta=(0.0, 0.1, 0.0, 0.2),
        nu=nu,
        lam_hat=(-0.1, -0.1, -0.1, -0.1),
        gamma=1.0,
    )


def random_tree_edges(rng, ncl, nst):
    """Random bipartite tree on ncl classes and nst stations: attach each
    new vertex to a uniformly random existing vertex of the other side."""
    edges = [(0, 0)]
    classes = [0]
    stations = [0]
    pend = [("c", i) for i in range(1, ncl)] + [("s", j) for j in range(1, nst)]
    rng.shuffle(pend)
    for kind, idx in pend:
        if kind == "c":
            edges.append((idx, stations[rng.randrange(len(stations))]))
            classes.append(idx)
        else:
            edges.append((classes[rng.randrange(len(classes))], idx))
            stations.append(idx)
    return sorted(edges)


def random_system(rng, max_classes=5, max_stations=5):
    """Random critically loaded treelike system with all activities carrying
    mass: allocations are drawn with unit column sums and the arrival rates
    are derived from them."""
    ncl = rng.randint(1, max_classes)
    nst = rng.randint(1, max_stations)
    edges = random_tree_edges(rng, ncl, nst)
    mu = {e: rng.uniform(0.5, 2.0) for e in edges}
    nu = tuple(rng.uniform(0.5, 2.0) for _ in range(nst))
    by_station = {}
    for (i, j) in edges:
        by_station.setdefault(j, []).append(i)
    xi = {}
    for j, cls in by_station.items():
        weights = [rng.uniform(0.2, 1.0) for _ in cls]
        tot = sum(weights)
        for i, w in zip(cls, weights):
            xi[(i, j)] = w / tot
    lam = [0.0] * ncl
    for (i, j), x in xi.items():
        lam[i] += nu[j] * mu[(i, j)] * x
    spec = SystemSpec(
        num_classes=ncl,
        num_stations=nst,
        edges=edges,
        lam=tuple(lam),
        mu=mu,
        theta=tuple(rng.uniform(0.0, 0.5) for _ in range(ncl)),
        nu=nu,
        lam_hat=tuple(rng.uniform(-0.3, 0.3) for _ in range(ncl)),
        gamma=1.0,
    )
    return spec, {pair: xi[pair] for pair in spec.edges}


@pytest.fixture(scope="session")
def single_system():
    return validate(single_station_spec())


@pytest.fixture(scope="session")
def single_fluid(single_system):
    return solve_static_fluid(single_system)


@pytest.fixture(scope="session")
def vee_system():
    return validate(vee_spec())


@pytest.fixture(scope="session")
def vee_fluid(vee_system):
    return solve_static_fluid(vee_system)


@pytest.fixture(scope="session")
def wye_system():
    return validate(wye_spec())


@pytest.fixture(scope="session")
def wye_fluid(wye_system):
    return solve_static_fluid(wye_system)


@pytest.fixture(scope="session")
def truncated_queue_cost():
    return queue_power_cost(1.0, c=(1.0,), truncate=5.0)
