import math

import numpy as np
import pytest

from _oracles import cycle_mdp, small_mdp
from loaded_dice.autodiff import ExprGraph, grad
from loaded_dice.mdp import Mdp, TabularPolicy, discounted_return, random_mdp, softmax_rows
from loaded_dice.oracle import (
    EnumerationBudgetError,
    enumerate_expectation,
    enumerate_trajectories,
    exact_value,
    exact_value_numeric,
    finite_horizon_table,
    finite_horizon_value,
    optimal_value,
    perturb_values,
    true_derivatives,
)


def _value(mdp, logits):
    g = ExprGraph()
    pol = TabularPolicy.create(g, logits)
    vbar, table = exact_value(mdp, pol)
    return vbar, table, pol


def _power_series(mdp, probs, K=2000):
    P_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    v = np.zeros(mdp.n_states)
    term = mdp.reward.copy()
    for _ in range(K + 1):
        v += term
        term = mdp.gamma * P_pi @ term
    return mdp.initial @ v


def test_one_state_value():
    m = Mdp(np.ones((1, 1, 1)), np.array([1.0]), np.ones(1), 0.5)
    vbar, _, _ = _value(m, np.zeros((1, 1)))
    assert vbar.value == pytest.approx(2.0)


def test_cycle_value():
    vbar, _, _ = _value(cycle_mdp(), np.zeros((2, 1)))
    assert vbar.value == pytest.approx(1 / (1 - 0.81), rel=1e-12)


def test_random_mdp_value_matches_power_series():
    m = random_mdp(seed=3)
    logits = np.random.default_rng(1).normal(0, 0.3, (5, 4))
    vbar, table, _ = _value(m, logits)
    assert vbar.value == pytest.approx(_power_series(m, softmax_rows(logits)), abs=1e-9)
    num = exact_value_numeric(m, softmax_rows(logits))
    np.testing.assert_allclose(table.v, num.v, rtol=1e-12)
    np.testing.assert_allclose(table.q, num.q, rtol=1e-12)


def test_q_consistent_with_v():
    m = random_mdp(seed=2)
    probs = softmax_rows(np.random.default_rng(2).normal(size=(5, 4)))
    t = exact_value_numeric(m, probs)
    np.testing.assert_allclose((probs * t.q).sum(axis=1), t.v, rtol=1e-12)


def test_finite_horizon_examples():
    # T=1: only R(s_0) counts, so the policy has no influence
    m = small_mdp()
    g = ExprGraph()
    pol = TabularPolicy.create(g, np.array([[0.3, -0.2], [0.1, 0.5]]))
    v1 = finite_horizon_value(m, pol, 1)
    assert v1.value == pytest.approx(m.reward @ m.initial)
    assert grad(v1, pol.params) == [0.0] * 4
    g = ExprGraph()
    pol = TabularPolicy.create(g, np.zeros((2, 1)))
    assert finite_horizon_value(cycle_mdp(), pol, 3).value == pytest.approx(1.81)


def test_finite_horizon_tail_bound():
    m = random_mdp(seed=0)
    logits = np.random.default_rng(0).normal(0, 0.1, (5, 4))
    vbar, _, _ = _value(m, logits)
    table = finite_horizon_table(m, softmax_rows(logits), 2000)
    fh = float(m.initial @ table.v[0])
    bound = m.gamma**2000 * np.abs(m.reward).max() / (1 - m.gamma)
    assert abs(fh - vbar.value) <= bound + 1e-9


def test_finite_horizon_table_matches_graph():
    m = small_mdp()
    logits = np.array([[0.2, -0.4], [0.7, 0.1]])
    g = ExprGraph()
    pol = TabularPolicy.create(g, logits)
    table = finite_horizon_table(m, softmax_rows(logits), 4)
    assert finite_horizon_value(m, pol, 4).value == pytest.approx(m.initial @ table.v[0], rel=1e-13)
    assert (table.v[4] == 0).all()


def test_true_derivatives_shift_direction_is_zero():
    m = random_mdp(seed=5)
    vbar, _, pol = _value(m, np.random.default_rng(5).normal(0, 0.2, (5, 4)))
    g1 = true_derivatives(vbar, pol, 1)[1].reshape(5, 4)
    np.testing.assert_allclose(g1.sum(axis=1), 0.0, atol=1e-9)


def test_true_derivatives_match_finite_differences():
    m = random_mdp(seed=1)
    logits = np.random.default_rng(4).normal(0, 0.3, (5, 4))
    vbar, _, pol = _value(m, logits)
    g1 = true_derivatives(vbar, pol, 1)[1]
    h = 1e-5
    fd = np.empty(20)
    for i in range(20):
        e = np.zeros(20)
        e[i] = h
        vp = exact_value_numeric(m, softmax_rows(logits + e.reshape(5, 4)))
        vm = exact_value_numeric(m, softmax_rows(logits - e.reshape(5, 4)))
        fd[i] = (m.initial @ vp.v - m.initial @ vm.v) / (2 * h)
    assert np.abs(g1 - fd).max() / np.abs(fd).max() < 1e-4


def test_higher_orders_follow_first_parameter_protocol():
    m = small_mdp()
    logits = np.array([[0.3, -0.2], [-0.1, 0.4]])
    vbar, _, pol = _value(m, logits)
    stack = true_derivatives(vbar, pol, 3)
    # order 2 is the gradient of d/dtheta_0; check it by differencing order 1
    h = 1e-5
    e = np.zeros((2, 2))
    e[0, 0] = h
    up = true_derivatives(*_value(m, logits + e)[::2], 1)[1]
    dn = true_derivatives(*_value(m, logits - e)[::2], 1)[1]
    np.testing.assert_allclose(stack[2], (up - dn) / (2 * h), rtol=1e-5, atol=1e-8)
    up2 = true_derivatives(*_value(m, logits + e)[::2], 2)[2]
    dn2 = true_derivatives(*_value(m, logits - e)[::2], 2)[2]
    np.testing.assert_allclose(stack[3], (up2 - dn2) / (2 * h), rtol=1e-5, atol=1e-8)


def test_action_independent_dynamics_have_zero_derivatives():
    m = Mdp(np.ones((1, 2, 1)), np.array([3.0]), np.ones(1), 0.9)
    vbar, _, pol = _value(m, np.array([[0.4, -0.7]]))
    stack = true_derivatives(vbar, pol, 3)
    for k in (1, 2, 3):
        np.testing.assert_allclose(stack[k], 0.0, atol=1e-12)


def test_true_derivatives_order_range():
    vbar, _, pol = _value(small_mdp(), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        true_derivatives(vbar, pol, 4)


def test_optimal_value_dominates_policies():
    m = random_mdp(seed=0)
    vstar, pi = optimal_value(m)
    rng = np.random.default_rng(0)
    for _ in range(20):
        probs = softmax_rows(rng.normal(0, 2, (5, 4)))
        assert m.initial @ exact_value_numeric(m, probs).v <= vstar + 1e-9
    assert m.initial @ exact_value_numeric(m, np.eye(4)[pi]).v == pytest.approx(vstar, rel=1e-12)


def test_enumeration_matches_finite_horizon():
    m = small_mdp()
    g = ExprGraph()
    pol = TabularPolicy.create(g, np.array([[0.3, -0.2], [-0.1, 0.4]]))
    T = 3
    total_p = enumerate_expectation(m, pol, T, lambda tr: 1.0)
    assert total_p.value == pytest.approx(1.0, abs=1e-14)
    ret = enumerate_expectation(m, pol, T, lambda tr: discounted_return(tr, m.gamma))
    fh = finite_horizon_value(m, pol, T)
    assert ret.value == pytest.approx(fh.value, abs=1e-10)
    np.testing.assert_allclose(grad(ret, pol.params), grad(fh, pol.params), atol=1e-10)


def test_enumeration_includes_terminal_transition():
    m = small_mdp()
    n = sum(1 for _ in enumerate_trajectories(m, 2))
    assert n == 2 * (2 * 2) ** 2
    assert sum(p for _, p, _ in enumerate_trajectories(m, 2)) == pytest.approx(2 * 2)


def test_enumeration_budget():
    with pytest.raises(EnumerationBudgetError):
        next(enumerate_trajectories(random_mdp(), 10))


def test_perturb_values():
    m = random_mdp(seed=0)
    base = exact_value_numeric(m, np.full((5, 4), 0.25))
    same = perturb_values(base, 0.0, 1, m)
    np.testing.assert_array_equal(same.v, base.v)
    offsets = np.concatenate([perturb_values(base, 10.0, s, m).v - base.v for s in range(400)])
    assert offsets.std() == pytest.approx(10.0, rel=0.05)
    noisy = perturb_values(base, 10.0, 3, m)
    # Q stays consistent with the perturbed V through one Bellman step
    np.testing.assert_allclose(noisy.q, m.reward[:, None] + m.gamma * m.transition @ noisy.v)
    with pytest.raises(ValueError):
        perturb_values(base, -1.0, 0, m)


def test_perturb_finite_horizon_keeps_terminal_zero():
    m = small_mdp()
    t = finite_horizon_table(m, np.full((2, 2), 0.5), 3)
    noisy = perturb_values(t, 10.0, 0, m)
    assert (noisy.v[3] == 0).all()
    assert not np.allclose(noisy.v[:3], t.v[:3])
    assert math.isclose(noisy.sigma, 10.0)
