import numpy as np
import pytest

from treeq.control import DriftData, activity_populations
from treeq.costs import CostSpec, constant_cost, load_cost, queue_power_cost, save_cost, zero_cost
from treeq.errors import SchemaError
from treeq.fluid import solve_static_fluid
from treeq.system import validate

from conftest import wye_spec


def test_families_evaluate():
    z = zero_cost()
    assert z.queue_cost([3.0]) == 0.0
    c = constant_cost(2.5)
    assert c.control_cost([1.0], [1.0]) == 2.5
    q = queue_power_cost(2.0, c=(1.0, 3.0))
    assert q.queue_cost([2.0, 1.0]) == 4.0 + 3.0
    assert q.queue_cost([-2.0, 1.0]) == 3.0  # negative queues clamp to zero
    qt = queue_power_cost(1.0, c=(1.0, 1.0), truncate=4.0)
    assert qt.queue_cost([10.0, 0.0]) == 4.0
    assert qt.bound() == 4.0
    assert q.bound() is None
    assert q.growth_bound(2.0) == 3.0 * 4.0


def test_flags():
    q1 = queue_power_cost(1.0, c=(2.0, 1.0))
    assert q1.vertex_exact and q1.convex_in_control and not q1.bounded
    q2 = queue_power_cost(2.0, c=(1.0, 1.0))
    assert not q2.vertex_exact and q2.convex_in_control
    qt = queue_power_cost(1.0, c=(1.0, 1.0), truncate=5.0)
    assert qt.bounded and qt.convex_in_control and qt.vertex_exact
    qt2 = queue_power_cost(1.0, c=(2.0, 1.0), truncate=5.0)
    assert qt2.bounded and not qt2.convex_in_control  # truncated non-uniform
    with pytest.raises(SchemaError):
        queue_power_cost(0.5, c=(1.0,))


def test_control_form_matches_native_form():
    """The control split and the per-activity populations price identically."""
    sysv = validate(wye_spec())
    fluid = solve_static_fluid(sysv)
    d = DriftData.from_system(sysv, fluid)
    cost = queue_power_cost(1.5, c=(2.0, 1.0), truncate=7.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-3, 3, 2)
        u = rng.dirichlet([1.0, 1.0])
        v = rng.dirichlet([1.0, 1.0])
        psi = activity_populations(x, u, v, d)
        rows = [psi[0], psi[1] + psi[2]]
        native = cost.state_flow_cost(x, rows)
        control = cost.control_cost(x, u)
        assert control == pytest.approx(native, abs=1e-12)


def test_batch_matches_scalar():
    cost = queue_power_cost(2.0, c=(1.0, 0.5), truncate=9.0)
    rng = np.random.default_rng(1)
    xs = rng.uniform(-4, 4, (50, 2))
    u = rng.dirichlet([1, 1])
    batch = cost.control_cost_batch(xs, u)
    for k in range(50):
        assert batch[k] == pytest.approx(cost.control_cost(xs[k], u), abs=1e-12)


def test_json_round_trip(tmp_path):
    for cost in (
        zero_cost(),
        constant_cost(3.0),
        queue_power_cost(2.0, c=(1.0, 2.0)),
        queue_power_cost(1.0, c=(1.0, 1.0), truncate=5.0),
    ):
        path = tmp_path / "cost.json"
        save_cost(cost, path)
        assert load_cost(path) == cost
