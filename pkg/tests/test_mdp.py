import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loaded_dice.autodiff import ExprGraph, grad
from loaded_dice.mdp import (
    Mdp,
    MdpSchemaError,
    TabularPolicy,
    discounted_return,
    random_mdp,
    sample_batch,
    sample_trajectory,
    softmax_rows,
)


def test_random_mdp_defaults():
    m = random_mdp()
    assert (m.n_states, m.n_actions, m.gamma) == (5, 4, 0.95)
    np.testing.assert_allclose(m.transition.sum(axis=2), 1.0, atol=1e-12)
    np.testing.assert_allclose(m.initial.sum(), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(1, 5), st.integers(0, 2**31))
def test_random_mdp_rows_normalized(S, A, seed):
    m = random_mdp(S, A, 0.9, seed)
    assert np.abs(m.transition.sum(axis=2) - 1.0).max() <= 1e-12
    assert (m.transition >= 0).all()


def test_random_mdp_reward_distribution():
    m = random_mdp(10_000, 1, 0.95, seed=11)
    # Normal(5, 10): mean within 3 sigma / sqrt(n)
    assert abs(m.reward.mean() - 5.0) < 0.3
    assert abs(m.reward.std() - 10.0) < 0.3


def test_random_mdp_seed_determinism():
    assert random_mdp(seed=4).dumps() == random_mdp(seed=4).dumps()
    assert random_mdp(seed=4).dumps() != random_mdp(seed=5).dumps()


def test_mdp_validation():
    with pytest.raises(ValueError):
        Mdp(np.ones((2, 1, 2)) * 0.6, np.zeros(2), np.array([1.0, 0.0]), 0.9)
    with pytest.raises(ValueError):
        Mdp(np.full((1, 1, 1), 1.0), np.zeros(1), np.ones(1), 1.0)


def test_json_round_trip(tmp_path):
    m = random_mdp(3, 2, 0.8, seed=2)
    path = tmp_path / "m.json"
    m.save(path)
    back = Mdp.load(path)
    np.testing.assert_array_equal(back.transition, m.transition)
    np.testing.assert_array_equal(back.reward, m.reward)
    assert back.gamma == m.gamma


@pytest.mark.parametrize("field", ["transition", "reward", "initial", "gamma"])
def test_schema_error_names_field(field):
    doc = random_mdp(2, 2, 0.9, 0).to_dict()
    del doc[field]
    with pytest.raises(MdpSchemaError, match=field):
        Mdp.from_dict(doc)
    doc = random_mdp(2, 2, 0.9, 0).to_dict()
    doc[field] = "nonsense"
    with pytest.raises(MdpSchemaError, match=field):
        Mdp.from_dict(doc)


def test_one_state_mdp_trajectory():
    m = Mdp(np.ones((1, 3, 1)), np.array([2.5]), np.ones(1), 0.5)
    traj = sample_trajectory(m, np.full((1, 3), 1 / 3), 6, seed=0)
    assert (traj.states == 0).all()
    assert (traj.rewards == 2.5).all()


def test_deterministic_policy_on_deterministic_chain():
    # action 1 moves right, action 0 stays; logit 50 makes action 1 certain
    S = 4
    P = np.zeros((S, 2, S))
    for s in range(S):
        P[s, 0, s] = 1.0
        P[s, 1, min(s + 1, S - 1)] = 1.0
    m = Mdp(P, np.arange(S, dtype=float), np.eye(S)[0], 0.9)
    logits = np.tile([0.0, 50.0], (S, 1))
    traj = sample_trajectory(m, softmax_rows(logits), 5, seed=1)
    assert traj.states.tolist() == [0, 1, 2, 3, 3]
    assert traj.actions.tolist() == [1] * 5
    assert traj.terminal_state == 3
    assert discounted_return(traj, 0.5) == pytest.approx(0 + 0.5 + 0.5 + 3 * 0.125 + 3 * 0.0625)


def test_state_visitation_matches_matrix_power():
    m = random_mdp(seed=7)
    probs = softmax_rows(np.random.default_rng(0).normal(0, 0.5, (5, 4)))
    P_pi = np.einsum("sa,sat->st", probs, m.transition)
    expected = m.initial @ np.linalg.matrix_power(P_pi, 3)
    trajs = sample_batch(m, probs, 4, 100_000, seed=3)
    counts = np.bincount([t.states[3] for t in trajs], minlength=5) / len(trajs)
    np.testing.assert_allclose(counts, expected, atol=1e-2)


def test_sample_batch_is_pure():
    m = random_mdp(seed=1)
    probs = np.full((5, 4), 0.25)
    a = sample_batch(m, probs, 10, 8, seed=42)
    b = sample_batch(m, probs, 10, 8, seed=42)
    assert all((x.states == y.states).all() and (x.actions == y.actions).all() for x, y in zip(a, b))


def test_rewards_follow_states():
    m = random_mdp(seed=1)
    for t in sample_batch(m, np.full((5, 4), 0.25), 12, 5, seed=0):
        np.testing.assert_array_equal(t.rewards, m.reward[t.states])


def test_uniform_policy_log_prob_and_jacobian():
    g = ExprGraph()
    pol = TabularPolicy.create(g, np.zeros((2, 4)))
    lp = pol.log_prob(0, 2)
    assert lp.value == pytest.approx(np.log(0.25), abs=1e-15)
    grads = grad(lp, pol.params)
    assert grads[2] == pytest.approx(0.75)
    assert grads[0] == pytest.approx(-0.25)
    assert grads[4:] == [0.0] * 4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_shift_invariance(row, c):
    x = np.array([row])
    np.testing.assert_allclose(softmax_rows(x), softmax_rows(x + c), atol=1e-12)
    g = ExprGraph()
    a = [TabularPolicy.create(g, x).log_prob(0, i).value for i in range(len(row))]
    b = [TabularPolicy.create(g, x + c).log_prob(0, i).value for i in range(len(row))]
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_log_prob_stable_for_large_logits():
    g = ExprGraph()
    pol = TabularPolicy.create(g, np.array([[500.0, 0.0, -500.0]]))
    assert pol.log_prob(0, 0).value == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(pol.log_prob(0, 2).value)
