import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from esfd.euler import entropy_potential, entropy_variables, flux_central, flux_hllc, is_admissible, pressure
from esfd.limiter import (
    InfeasibleKnapsackError,
    KnapsackProblem,
    TimestepTooLargeError,
    assemble_ecav,
    assemble_kl,
    assemble_relaxed,
    entropy_violation,
    limiting_coefficients,
    low_order_dt_bound,
    nodal_dot,
    nodal_limits,
    precise_entropy_variables,
    solve_bounded,
    solve_knapsack_batch,
    solve_relaxed,
    solve_unbounded,
    symmetrize,
)
from esfd.sbp import Grid, build_normal_table, build_operator

from conftest import random_states


def _table(order=4, n=16, periodic=True, dim=1):
    dom = [(0.0, 1.0)] * dim
    return build_normal_table(build_operator(order, Grid.uniform(n, dom, periodic=periodic)))


def _slsqp(a, b, upper):
    cons = [{"type": "ineq", "fun": lambda t: a @ t - b, "jac": lambda t: a}]
    bounds = [(0.0, u) for u in upper]
    x0 = np.clip(np.full_like(a, 0.5), 0, upper)
    res = minimize(lambda t: t @ t, x0, jac=lambda t: 2 * t, bounds=bounds, constraints=cons,
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def test_batch_solver_matches_slsqp(rng):
    for _ in range(150):
        k = rng.integers(1, 9)
        a = rng.normal(size=k)
        upper = rng.uniform(0.2, 2.0, size=k)
        budget = np.maximum(a, 0) @ upper
        b = rng.uniform(-0.2, 0.95) * budget
        theta, ok = solve_knapsack_batch(a[None], np.array([b]), upper[None])
        assert ok[0]
        th = theta[0]
        assert np.all(th >= 0) and np.all(th <= upper + 1e-15)
        assert a @ th >= b - 1e-12 * (1 + abs(b))
        ref = _slsqp(a, b, upper)
        assert th @ th <= ref @ ref + 1e-8


def test_batch_solver_kkt_structure(rng):
    a = rng.uniform(-1, 2, size=(400, 6))
    upper = rng.uniform(0.1, 1.0, size=(400, 6))
    b = 0.7 * np.sum(np.maximum(a, 0) * upper, axis=1)
    theta, ok = solve_knapsack_batch(a, b, upper)
    assert ok.all()
    assert np.allclose(np.sum(a * theta, axis=1), b, rtol=1e-12)
    # theta = clip(mu a+, 0, upper) with one multiplier per row
    free = (theta > 0) & (theta < upper - 1e-14)
    for i in range(len(b)):
        if free[i].any():
            mu = theta[i, free[i]] / a[i, free[i]]
            assert np.ptp(mu) <= 1e-12 * mu.max()
            assert np.allclose(theta[i], np.clip(mu[0] * np.maximum(a[i], 0), 0, upper[i]), atol=1e-14)


def test_unbounded_closed_form():
    a = np.array([1.0, 2.0, 0.0])
    assert np.allclose(solve_unbounded(KnapsackProblem(a, 5.0)), [1.0, 2.0, 0.0])
    assert np.all(solve_unbounded(KnapsackProblem(a, -1.0)) == 0)
    theta, ok = solve_knapsack_batch(a[None], np.array([5.0]))
    assert ok[0] and np.allclose(theta[0], [1.0, 2.0, 0.0])


def test_solver_errors():
    with pytest.raises(InfeasibleKnapsackError):
        solve_unbounded(KnapsackProblem(np.zeros(3), 1.0))
    with pytest.raises(ValueError):
        solve_unbounded(KnapsackProblem(np.array([1.0, -1.0]), 1.0))
    with pytest.raises(InfeasibleKnapsackError):
        solve_bounded(KnapsackProblem(np.array([1.0, 1.0]), 3.0, np.array([1.0, 1.0])))
    with pytest.raises(ValueError):
        solve_bounded(KnapsackProblem(np.array([1.0]), 0.5))
    theta, ok = solve_knapsack_batch(np.array([[1.0, -1.0]]), np.array([3.0]), np.array([[1.0, 1.0]]))
    assert not ok[0] and np.allclose(theta[0], [1.0, 0.0])


def test_relaxed_solver_ignores_negative_entries():
    th = solve_relaxed(KnapsackProblem(np.array([2.0, -1.0, 1.0]), 1.0))
    assert np.allclose(th, [0.4, 0.0, 0.2])
    th = solve_relaxed(KnapsackProblem(np.array([2.0, -1.0]), 0.4, np.array([0.25, 1.0])))
    assert np.allclose(th, [0.2, 0.0])
    with pytest.raises(InfeasibleKnapsackError):
        solve_relaxed(KnapsackProblem(np.array([2.0, -1.0]), 1.0, np.array([0.25, 1.0])))
    with pytest.raises(InfeasibleKnapsackError):
        solve_relaxed(KnapsackProblem(np.array([-1.0]), 1.0))


@given(st.integers(0, 2**31), st.sampled_from([2, 3, 4, 6]), st.sampled_from([1, 2]))
def test_entropy_violation_matches_pairwise_loop(seed, order, dim):
    rng = np.random.default_rng(seed)
    if dim == 2 and order == 6:
        order = 4
    n = 16 if dim == 1 else 10
    t = _table(order, n, periodic=bool(seed % 2), dim=dim)
    u = random_states(rng, t.n_nodes, dim)
    w_e, b = entropy_violation(t, u)
    v = entropy_variables(u)
    psi = entropy_potential(u)
    for i in range(t.n_nodes):
        total, scale = 0.0, 0.0
        for j, nij in t.neighbor_pairs(i):
            nn = np.linalg.norm(nij)
            nhat = nij / nn
            term = nn * ((v[j] - v[i]) @ flux_central(u[i], u[j], nhat) - (psi[j] - psi[i]) @ nhat)
            total += term
            scale += nn * np.abs(v[j] - v[i]) @ np.abs(flux_central(u[i], u[j], nhat))
        assert b[i] == pytest.approx(total, abs=1e-11 * (1 + scale))


@given(st.integers(0, 2**31), st.sampled_from([1, 2]))
def test_viscosity_dissipation_is_nonnegative_and_sufficient(seed, dim):
    rng = np.random.default_rng(seed)
    t = _table(4, 12 if dim == 1 else 10, periodic=True, dim=dim)
    u = random_states(rng, t.n_nodes, dim)
    v = precise_entropy_variables(u)
    _, b = entropy_violation(t, u, v=v)
    batch, a_e = assemble_ecav(t, u, v, b)
    assert np.all(a_e >= 0)
    theta_hat, ok = solve_knapsack_batch(batch.a, batch.b)
    assert ok.all()
    theta = symmetrize(t, theta_hat)
    got = nodal_dot(t, a_e, theta)
    assert np.all(got >= b - 1e-12 * (1 + np.abs(b)))


def test_kl_box_and_constraint(rng):
    t = _table(4, 16, periodic=True)
    u = random_states(rng, t.n_nodes, 1, rho=(0.5, 2.0), speed=1.0, p=(0.5, 2.0))
    v = precise_entropy_variables(u)
    _, b = entropy_violation(t, u, v=v)
    nhat = t.unit_normals
    fh = flux_central(u[t.tail], u[t.head], nhat)
    fl = flux_hllc(u[t.tail], u[t.head], nhat)
    ell = rng.uniform(0, 0.3, size=t.n_edges)
    batch, a_e = assemble_kl(t, v, fh, fl, b, ell)
    theta_hat, ok = solve_knapsack_batch(batch.a, batch.b, batch.upper)
    assert np.all(theta_hat <= batch.upper + 1e-15)
    theta = np.minimum(symmetrize(t, theta_hat) + ell, 1.0)
    lhs = nodal_dot(t, a_e, theta)
    assert np.all(lhs[ok] >= b[ok] - 1e-12 * (1 + np.abs(b[ok])))


def test_relaxed_columns_reduce_to_pairwise_form(rng):
    t = _table(4, 14, periodic=False)
    u = random_states(rng, t.n_nodes)
    v = entropy_variables(u)
    delta = u[t.tail] - u[t.head]
    batch = assemble_relaxed(t, v, delta, np.zeros(t.n_nodes), "recav")
    _, a_e = assemble_ecav(t, u, v, np.zeros(t.n_nodes))
    # tau equal to every pair coefficient recovers the symmetric inequality
    K = t.slot_edge.shape[1]
    lhs = batch.a[:, :K].sum(axis=1) + batch.a[:, K]
    assert np.allclose(lhs, nodal_dot(t, a_e, np.ones(t.n_edges)), rtol=1e-12, atol=1e-12)
    assert batch.a.shape == (t.n_nodes, K + 1)
    with pytest.raises(ValueError):
        assemble_relaxed(t, v, delta, np.zeros(t.n_nodes), "ecav")
    rkl = assemble_relaxed(t, v, delta, np.ones(t.n_nodes), "rkl", ell=np.full(t.n_edges, 0.25))
    assert np.allclose(rkl.upper[:, K], 1.0)
    assert np.allclose(rkl.upper[:, :K][t.slot_mask], 0.75)


def test_symmetrize_takes_pairwise_max():
    t = _table(2, 8, periodic=True)
    theta_hat = np.zeros(t.slot_edge.shape)
    theta_hat[0, :] = [0.3, 0.1]
    got = symmetrize(t, theta_hat)
    touching = (t.tail == 0) | (t.head == 0)
    assert np.count_nonzero(got) == 2
    assert set(np.round(got[touching], 12)) == {0.3, 0.1}


def test_density_limit_closed_form():
    # pressure stays comfortable, so only density binds
    u = np.array([[1.0, 0.0, 10.0], [2.0, 0.0, 10.0]])
    mass = np.array([0.5, 0.5])
    r_low = np.array([[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]])
    r_high = np.array([[0.9, 0.0, 0.0], [-0.9, 0.0, 0.0]])
    dt, alpha = 0.5, 0.5
    lim = limiting_coefficients(u, r_high, r_low, mass, dt, alpha)
    rho_l = mass * u[:, 0] - dt * r_low[:, 0]
    closed = 1 - (1 - alpha) / dt * rho_l / (r_high[:, 0] - r_low[:, 0])
    expected = np.where(r_high[:, 0] > r_low[:, 0], np.clip(closed, 0, 1), 0.0)
    assert np.allclose(lim.ell, expected, atol=1e-12)
    assert lim.ell[0] == pytest.approx(1 - 0.5 / 0.5 * 0.45 / 0.8)


def test_three_node_pressure_limit():
    u = np.array([[1.0, 0.0, 2.5], [1.0, 0.5, 2.0], [1.0, 0.0, 2.5]])
    mass = np.ones(3)
    r_low = np.zeros((3, 3))
    r_high = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 3.0], [0.0, 0.0, 0.0]])
    lim = limiting_coefficients(u, r_high, r_low, mass, 0.5, 0.5)
    assert lim.ell[0] == 0 and lim.ell[2] == 0
    # E_new = 2 - 1.5 (1 - ell); p_new = 0.4 (E_new - 0.125) = 0.5 p_low
    p_low = pressure(u[1])
    expected = 1 - (u[1, 2] - 0.125 - 0.5 * p_low / 0.4) / 1.5
    assert lim.ell[1] == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 2**31), st.floats(0.0, 0.9))
def test_blended_update_respects_relative_bounds(seed, alpha):
    rng = np.random.default_rng(seed)
    n, K = 6, 4
    u = random_states(rng, n)
    mass = rng.uniform(0.5, 1.5, n)
    mask = rng.uniform(size=(n, K)) < 0.8
    mask[:, 0] = True
    deltas = rng.normal(scale=2.0, size=(n, K, 3)) * mask[..., None]
    r_low = np.zeros((n, 3))
    dt = 0.05
    ell = nodal_limits(u, r_low, deltas, mask, mass, dt, alpha)
    theta = ell[:, None] + (1 - ell[:, None]) * rng.uniform(size=(n, K))
    u_new = u - (dt / mass)[:, None] * np.sum((1 - theta)[..., None] * deltas, axis=1)
    assert np.all(u_new[:, 0] >= alpha * u[:, 0] * (1 - 1e-9))
    assert np.all(pressure(u_new) >= alpha * pressure(u) * (1 - 1e-9) - 1e-13)
    assert np.all(is_admissible(u_new)) or alpha == 0.0


def test_inadmissible_low_order_update_raises():
    u = np.array([[1.0, 0.0, 2.5]])
    with pytest.raises(TimestepTooLargeError) as info:
        nodal_limits(u, np.array([[5.0, 0.0, 0.0]]), np.zeros((1, 1, 3)), np.ones((1, 1), bool), np.ones(1), 1.0, 0.5)
    assert hasattr(info.value, "dt_bound")


def test_low_order_dt_bound_second_order_periodic():
    t = _table(2, 8, periodic=True)
    mass = np.full(8, 1.0 / 8)
    assert low_order_dt_bound(t, np.ones(t.n_edges), mass) == pytest.approx(1.0 / 16)
