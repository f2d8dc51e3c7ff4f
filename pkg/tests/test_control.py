import math

import numpy as np
import pytest

from treeq.control import (
    DriftData,
    GridConfig,
    MarkovPolicy,
    activity_populations,
    choose_horizon,
    drift,
    drift_batch,
    hamiltonian,
    load_markov_policy,
    load_value_field,
    mollify_policy,
    mollify_weights,
    save_markov_policy,
    save_value_field,
    simplex_grid,
    simulate_controlled_diffusion,
    solve_hjb,
    verify_policy_margin,
)
from treeq.costs import constant_cost, queue_power_cost, zero_cost
from treeq.errors import GridTooSmall, StepTooLarge
from treeq.fluid import solve_static_fluid
from treeq.system import SystemSpec, validate

from conftest import single_station_spec, vee_spec, wye_spec


@pytest.fixture(scope="module")
def single_d(single_system, single_fluid):
    return DriftData.from_system(single_system, single_fluid)


@pytest.fixture(scope="module")
def vee_d(vee_system, vee_fluid):
    return DriftData.from_system(vee_system, vee_fluid)


# -- drift --------------------------------------------------------------------

def test_drift_data_values(single_d):
    # unit-variance scaling for renewal input: sqrt(lambda (1 + scv))
    assert single_d.r[0] == pytest.approx(math.sqrt(2.0))
    assert single_d.ell[0] == pytest.approx(-0.5)


def test_drift_single_station_closed_form():
    spec = single_station_spec(lam_hat=0.0)
    sysv = validate(spec)
    fluid = solve_static_fluid(sysv)
    d = DriftData.from_system(sysv, fluid)
    assert drift([-1.0], [1.0], [1.0], d)[0] == pytest.approx(1.0)
    assert drift([0.0], [1.0], [1.0], d)[0] == pytest.approx(0.0)
    spec_ab = single_station_spec(lam_hat=0.0, theta=0.7)
    sys_ab = validate(spec_ab)
    d_ab = DriftData.from_system(sys_ab, solve_static_fluid(sys_ab))
    assert drift([1.0], [1.0], [1.0], d_ab)[0] == pytest.approx(-0.7)


def test_split_population_identities(vee_d, wye_system, wye_fluid):
    """Row and column sums of the induced populations recover the margins."""
    d2 = DriftData.from_system(wye_system, wye_fluid)
    rng = np.random.default_rng(3)
    for d in (vee_d, d2):
        ncl, nst = d.num_classes, d.num_stations
        for _ in range(50):
            x = rng.uniform(-4, 4, ncl)
            u = rng.dirichlet(np.ones(ncl))
            v = rng.dirichlet(np.ones(nst))
            psi = activity_populations(x, u, v, d)
            s = x.sum()
            rows = np.zeros(ncl)
            cols = np.zeros(nst)
            edges = [(int(np.argmax(d.class_rate_agg[:, e])), None) for e in range(psi.size)]
            # recover edge endpoints from the aggregation matrix
            for e in range(psi.size):
                i = int(np.argmax(d.class_rate_agg[:, e] > 0))
                rows[i] += psi[e]
            assert np.allclose(rows, x - max(s, 0.0) * u, atol=1e-9)
            assert psi.sum() == pytest.approx(x.sum() - max(s, 0.0), abs=1e-9)


def test_drift_batch_matches_scalar(vee_d):
    rng = np.random.default_rng(4)
    xs = rng.uniform(-3, 3, (40, 2))
    u = rng.dirichlet([1, 1])
    v = np.array([1.0])
    batch = drift_batch(xs, u, v, vee_d)
    for k in range(40):
        assert np.allclose(batch[k], drift(xs[k], u, v, vee_d), atol=1e-12)


def test_drift_lipschitz_in_state(vee_d):
    rng = np.random.default_rng(5)
    bound = vee_d.lipschitz_bound()
    for _ in range(100):
        x = rng.uniform(-4, 4, 2)
        y = rng.uniform(-4, 4, 2)
        u = rng.dirichlet([1, 1])
        v = np.array([1.0])
        dx = np.abs(drift(x, u, v, vee_d) - drift(y, u, v, vee_d)).sum()
        assert dx <= bound * np.abs(x - y).sum() + 1e-12


# -- Hamiltonian ---------------------------------------------------------------

def test_hamiltonian_singleton(single_d, truncated_queue_cost):
    h, (u, v) = hamiltonian([0.5], [0.3], single_d, truncated_queue_cost)
    b = drift([0.5], [1.0], [1.0], single_d)[0]
    expected = b * 0.3 + truncated_queue_cost.control_cost([0.5], [1.0])
    assert h == pytest.approx(expected, abs=1e-12)
    assert u.tolist() == [1.0] and v.tolist() == [1.0]


def test_hamiltonian_zero_cost_zero_gradient(vee_d):
    h, _ = hamiltonian([1.0, -2.0], [0.0, 0.0], vee_d, zero_cost())
    assert h == pytest.approx(0.0, abs=1e-15)


def brute_force_hamiltonian(x, p, d, cost, mesh=60):
    best = math.inf
    for u in simplex_grid(d.num_classes, mesh):
        for v in simplex_grid(d.num_stations, mesh if d.num_stations > 1 else 1):
            val = float(np.dot(drift(x, u, v, d), p)) + cost.control_cost(x, u)
            best = min(best, val)
    return best


def test_hamiltonian_matches_grid_oracle_affine(vee_d):
    cost = queue_power_cost(1.0, c=(2.0, 1.0))
    rng = np.random.default_rng(6)
    for _ in range(25):
        x = rng.uniform(-3, 3, 2)
        p = rng.uniform(-2, 2, 2)
        h, (u, v) = hamiltonian(x, p, vee_d, cost)
        oracle = brute_force_hamiltonian(x, p, vee_d, cost)
        assert h <= oracle + 1e-10
        assert h == pytest.approx(oracle, abs=1e-6)
        attained = float(np.dot(drift(x, u, v, vee_d), p)) + cost.control_cost(x, u)
        assert attained == pytest.approx(h, abs=1e-8)


def test_hamiltonian_matches_grid_oracle_convex(vee_d):
    cost = queue_power_cost(2.0, c=(1.0, 2.0))
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.uniform(-2, 3, 2)
        p = rng.uniform(-2, 2, 2)
        h, _ = hamiltonian(x, p, vee_d, cost)
        oracle = brute_force_hamiltonian(x, p, vee_d, cost, mesh=200)
        # never above the sampled envelope; within the oracle's own grid error
        assert h <= oracle + 1e-8
        assert abs(h - oracle) <= 1e-3


def test_hamiltonian_is_lower_envelope(vee_d):
    cost = queue_power_cost(1.0, c=(1.0, 3.0), truncate=6.0)
    rng = np.random.default_rng(8)
    for _ in range(50):
        x = rng.uniform(-3, 3, 2)
        p = rng.uniform(-2, 2, 2)
        h, _ = hamiltonian(x, p, vee_d, cost)
        u = rng.dirichlet([1, 1])
        v = np.array([1.0])
        assert h <= float(np.dot(drift(x, u, v, vee_d), p)) + cost.control_cost(x, u) + 1e-9


# -- HJB solver -----------------------------------------------------------------

def test_constant_cost_constant_value(single_system, single_fluid):
    field, _ = solve_hjb(single_system, single_fluid, constant_cost(1.0),
                         GridConfig(half_width=8.0, num=161))
    assert np.max(np.abs(field.values - 1.0 / single_system.spec.gamma)) <= 1e-8


def test_zero_cost_zero_value(single_system, single_fluid):
    field, _ = solve_hjb(single_system, single_fluid, zero_cost(),
                         GridConfig(half_width=8.0, num=161))
    assert np.max(np.abs(field.values)) <= 1e-10


def test_residual_below_tolerance(vee_system, vee_fluid):
    cost = queue_power_cost(1.0, c=(2.0, 1.0), truncate=8.0)
    grid = GridConfig(half_width=6.0, num=81)
    field, policy = solve_hjb(vee_system, vee_fluid, cost, grid)
    assert field.residual <= grid.tol_pde
    uv = policy.control_batch(np.array([[0.5, 0.5], [-1.0, 1.0]]))
    assert np.allclose(uv[:, :2].sum(axis=1), 1.0)
    assert np.allclose(uv[:, 2:].sum(axis=1), 1.0)


def test_gradient_extraction_second_order(single_system, single_fluid):
    """Injecting a smooth function in place of the solution, the centered
    gradient matches the analytic derivative to second order."""
    from treeq.control import ValueField

    errs = []
    for num in (81, 161):
        grid = GridConfig(half_width=2.0, num=num)
        axes = grid.axes(1)
        f = np.sin(axes[0])
        field = ValueField(axes, f, 1.0, 0.0, 1e-6, 1e-8)
        grad = field.gradient_centered()[1:-1, 0]
        errs.append(np.max(np.abs(grad - np.cos(axes[0][1:-1]))))
    # halving the spacing cuts the error by about four
    assert errs[1] <= errs[0] / 3.2


def test_monotone_convergence_history(vee_system, vee_fluid):
    """Successive grid refinement moves the center value by a vanishing amount."""
    cost = queue_power_cost(1.0, c=(1.0, 1.0), truncate=8.0)
    vals = []
    for num in (41, 81, 161):
        field, _ = solve_hjb(vee_system, vee_fluid, cost, GridConfig(half_width=6.0, num=num))
        vals.append(field.interpolate([0.0, 0.0]))
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])


def test_hjb_with_abandonment_matches_independent_solve():
    """Against a second-order centered-difference solve of the same
    one-dimensional equation (stable here because the diffusion dominates),
    including the abandonment pull above capacity."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    spec = single_station_spec(lam_hat=-0.4, theta=0.6)
    sysv = validate(spec)
    fluid = solve_static_fluid(sysv)
    cost = queue_power_cost(1.0, c=(1.0,), truncate=5.0)
    field, _ = solve_hjb(sysv, fluid, cost, GridConfig(half_width=10.0, num=2001))

    m = 6001
    xs = np.linspace(-14.0, 14.0, m)
    h = xs[1] - xs[0]
    b = np.maximum(-xs, 0.0) - 0.6 * np.maximum(xs, 0.0) - 0.4
    load = np.minimum(np.maximum(xs, 0.0), 5.0)
    rows, cols, vals = [], [], []
    rhs = np.zeros(m)
    for k in range(1, m - 1):
        rows += [k, k, k]
        cols += [k - 1, k, k + 1]
        vals += [1.0 / h**2 - b[k] / (2 * h), -2.0 / h**2 - 1.0, 1.0 / h**2 + b[k] / (2 * h)]
        rhs[k] = -load[k]
    for k, s in ((0, 1), (m - 1, -1)):
        rows += [k, k, k]
        cols += [k, k + s, k + 2 * s]
        vals += [1.0, -2.0, 1.0]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    ref = spla.spsolve(mat.tocsc(), rhs)
    for probe in (-1.0, 0.0, 1.5):
        k = int(round((probe - xs[0]) / h))
        assert field.interpolate([probe]) == pytest.approx(ref[k], abs=2e-3)


def test_two_dimensional_solve_matches_monte_carlo(vee_system, vee_fluid):
    cost = queue_power_cost(1.0, c=(2.0, 1.0), truncate=8.0)
    d = DriftData.from_system(vee_system, vee_fluid)
    field, pol = solve_hjb(vee_system, vee_fluid, cost, GridConfig(half_width=7.0, num=141))
    x0 = [0.0, 0.0]
    mean, se, tail = simulate_controlled_diffusion(
        x0, pol, d, cost, gamma=1.0, horizon=7.6, dt=2e-3, paths=4000, seed=17,
    )
    ref = field.interpolate(x0)
    assert abs(mean - ref) <= 3 * se + tail + 5e-3  # grid and step bias allowance


def test_solver_iteration_guard(vee_system, vee_fluid):
    from treeq.errors import NoConvergence

    cost = queue_power_cost(1.0, c=(1.0, 1.0), truncate=8.0)
    with pytest.raises(NoConvergence):
        solve_hjb(vee_system, vee_fluid, cost,
                  GridConfig(half_width=6.0, num=81, max_iters=2))


def test_domain_check_flags_small_box(single_system, single_fluid, truncated_queue_cost):
    with pytest.raises(GridTooSmall):
        solve_hjb(single_system, single_fluid, truncated_queue_cost,
                  GridConfig(half_width=1.5, num=31, check_domain=True))
    # a generous box passes the same check
    solve_hjb(single_system, single_fluid, truncated_queue_cost,
              GridConfig(half_width=10.0, num=201, check_domain=True))


# -- policies -------------------------------------------------------------------

def test_reset_policy_constant():
    pol = MarkovPolicy.reset_policy(2, 2)
    u, v = pol.control([5.0, -3.0])
    assert u.tolist() == [1.0, 0.0]
    assert v.tolist() == [1.0, 0.0]


def test_mollify_constant_policy_unchanged():
    pol = MarkovPolicy.reset_policy(2, 1)
    mol = mollify_policy(pol, 0.3)
    rng = np.random.default_rng(9)
    for _ in range(20):
        x = rng.uniform(-3, 3, 2)
        u, v = mol.control(x)
        assert np.allclose(u, [1.0, 0.0]) and np.allclose(v, [1.0])


def test_mollify_weights_normalized():
    rng = np.random.default_rng(10)
    for _ in range(100):
        dim = rng.integers(1, 4)
        x = rng.uniform(-2, 2, dim)
        eps = rng.uniform(0.05, 0.8)
        pts, ws = mollify_weights(x, eps, int(dim))
        assert sum(ws) == pytest.approx(1.0, abs=1e-9)
        assert min(ws) >= 0.0
        assert all(np.linalg.norm(np.asarray(p) - x) < eps * math.sqrt(dim) for p in pts)


def test_mollify_converges_to_base_at_continuity_points(vee_system, vee_fluid):
    cost = queue_power_cost(1.0, c=(2.0, 1.0), truncate=8.0)
    field, pol = solve_hjb(vee_system, vee_fluid, cost, GridConfig(half_width=6.0, num=121))
    x = np.array([1.5, 1.5])
    base_u, base_v = pol.control(x)
    for eps in (0.4, 0.2, 0.1, 0.05):
        mol = mollify_policy(pol, eps)
        u, v = mol.control(x)
        if eps <= 0.1:
            assert np.allclose(u, base_u, atol=1e-9)
            assert np.allclose(v, base_v, atol=1e-9)


def test_mollified_is_lipschitz(vee_system, vee_fluid):
    cost = queue_power_cost(1.0, c=(2.0, 1.0), truncate=8.0)
    _, pol = solve_hjb(vee_system, vee_fluid, cost, GridConfig(half_width=6.0, num=121))
    eps = 0.25
    mol = mollify_policy(pol, eps)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(300):
        x = rng.uniform(-3, 3, 2)
        y = x + rng.uniform(-0.05, 0.05, 2)
        ux, _ = mol.control(x)
        uy, _ = mol.control(y)
        dist = float(np.abs(np.asarray(x) - np.asarray(y)).sum())
        if dist > 0:
            worst = max(worst, float(np.abs(ux - uy).sum()) / dist)
    assert worst <= 20.0 / eps


def test_generator_gap_nonnegative_on_grid(vee_system, vee_fluid):
    """The drift-gradient term plus running cost of any control never falls
    below the pointwise minimum by more than the minimization tolerance."""
    cost = queue_power_cost(1.0, c=(2.0, 1.0), truncate=8.0)
    d = DriftData.from_system(vee_system, vee_fluid)
    field, _ = solve_hjb(vee_system, vee_fluid, cost, GridConfig(half_width=6.0, num=81))
    grads = field.gradient_centered()
    rng = np.random.default_rng(15)
    axes = field.axes
    for _ in range(300):
        i = rng.integers(1, len(axes[0]) - 1)
        j = rng.integers(1, len(axes[1]) - 1)
        x = np.array([axes[0][i], axes[1][j]])
        p = grads[i, j]
        h, _ = hamiltonian(x, p, d, cost)
        u = rng.dirichlet([1, 1])
        v = np.array([1.0])
        gap = float(np.dot(drift(x, u, v, d), p)) + cost.control_cost(x, u) - h
        assert gap >= -field.tol_h


def test_policy_margin_check(vee_system, vee_fluid):
    cost = queue_power_cost(1.0, c=(2.0, 1.0))
    d = DriftData.from_system(vee_system, vee_fluid)
    field, pol = solve_hjb(vee_system, vee_fluid, cost, GridConfig(half_width=7.0, num=141))
    mol = mollify_policy(pol, 0.25)
    worst, ok = verify_policy_margin(field, mol, d, cost, radius=3.0, delta=0.5)
    assert ok and worst <= 0.5
    # the base policy itself has zero margin up to gradient noise
    worst0, ok0 = verify_policy_margin(field, pol, d, cost, radius=3.0, delta=1e-9)
    assert ok0


# -- controlled-diffusion Monte Carlo ---------------------------------------------

def test_mc_constant_cost_exact(single_d):
    pol = MarkovPolicy.reset_policy(1, 1)
    mean, se, tail = simulate_controlled_diffusion(
        [0.0], pol, single_d, constant_cost(1.0), gamma=1.0, horizon=3.0,
        dt=1e-2, paths=16, seed=1,
    )
    assert mean == pytest.approx(1.0 - math.exp(-3.0), abs=1e-12)
    assert se == 0.0
    assert tail == pytest.approx(math.exp(-3.0), abs=1e-12)


def test_mc_zero_noise_matches_ode():
    """With the noise turned off and a stationary start the cost integrates
    the constant running rate exactly."""
    spec = single_station_spec(lam_hat=0.0)
    sysv = validate(spec)
    fluid = solve_static_fluid(sysv)
    d0 = DriftData.from_system(sysv, fluid)
    d = DriftData(
        num_classes=1, num_stations=1, ell=d0.ell, r=np.array([0.0]),
        theta=d0.theta, fm=d0.fm, class_rate_agg=d0.class_rate_agg,
        mu_edges=d0.mu_edges,
    )
    cost = queue_power_cost(1.0, c=(1.0,), truncate=5.0)
    pol = MarkovPolicy.reset_policy(1, 1)
    x0, T, dt = 2.0, 4.0, 1e-3
    mean, se, _ = simulate_controlled_diffusion([x0], pol, d, cost, 1.0, T, dt, 4, seed=2)
    # x > 0 and no abandonment: the state never moves, rate is x0
    expected = x0 * (1.0 - math.exp(-T))
    assert se == 0.0
    assert mean == pytest.approx(expected, rel=2 * dt)


def test_mc_step_guard(single_d, truncated_queue_cost):
    pol = MarkovPolicy.reset_policy(1, 1)
    with pytest.raises(StepTooLarge):
        simulate_controlled_diffusion([0.0], pol, single_d, truncated_queue_cost,
                                      1.0, 1.0, dt=1.0, paths=2, seed=3)


def test_choose_horizon_tail():
    cost = queue_power_cost(1.0, c=(1.0,), truncate=5.0)
    T = choose_horizon(cost, gamma=1.0, tail_tol=0.005)
    assert 5.0 * math.exp(-T) <= 0.005 + 1e-12


# -- containers -------------------------------------------------------------------

def test_value_policy_round_trip(tmp_path, single_system, single_fluid, truncated_queue_cost):
    field, pol = solve_hjb(single_system, single_fluid, truncated_queue_cost,
                           GridConfig(half_width=6.0, num=121))
    vp = tmp_path / "value.bin"
    pp = tmp_path / "policy.bin"
    save_value_field(field, vp)
    save_markov_policy(pol, pp, extra={"cost": truncated_queue_cost.to_json()})
    f2 = load_value_field(vp)
    assert np.array_equal(f2.values, field.values)
    assert f2.gamma == field.gamma and f2.residual == field.residual
    p2 = load_markov_policy(pp)
    assert np.array_equal(p2.table, pol.table)
    # mollified round trip
    mp = tmp_path / "moll.bin"
    save_markov_policy(mollify_policy(pol, 0.2), mp)
    m2 = load_markov_policy(mp)
    assert m2.mode == "mollified" and m2.eps == 0.2
