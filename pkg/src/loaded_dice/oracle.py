"""Ground truth for tabular MDPs.

Two oracles with different jobs:

* :func:`exact_value` builds the infinite-horizon expected discounted return
  ``P0 . (I - gamma P_pi)^-1 R`` as a differentiable expression.  Its nested
  derivatives are the targets for the Monte-Carlo sweeps.
* :func:`enumerate_expectation` and :func:`enumerate_expected_derivatives`
  sum exactly over every trajectory of a small finite-horizon MDP, which is
  what the unbiasedness tests compare against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from .autodiff import (
    ExprGraph,
    ExprRef,
    exp,
    linear_solve,
    nested_derivatives,
    stop_gradient,
    total,
)
from .mdp import Mdp, TabularPolicy, Trajectory, make_rng, softmax_rows

ENUMERATION_BUDGET = 10**6


class EnumerationBudgetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ValueTable:
    """State and state-action values under a fixed policy.

    Stationary tables hold ``v`` with shape (S,) and ``q`` with shape (S, A).
    Finite-horizon tables are indexed by time first: ``v`` is (T+1, S) with
    ``v[T] == 0`` and ``q`` is (T, S, A).
    """

    v: np.ndarray
    q: np.ndarray
    source: str = "exact"  # exact | perturbed | finite_horizon
    sigma: float = 0.0
    horizon: Optional[int] = None

    def value(self, t: int, s: int) -> float:
        if self.horizon is None:
            return float(self.v[s])
        return float(self.v[min(t, self.horizon), s])

    def qvalue(self, t: int, s: int, a: int) -> float:
        if self.horizon is None:
            return float(self.q[s, a])
        return float(self.q[t, s, a])


@dataclass
class DerivativeStack:
    """Order-k derivatives under the first-parameter protocol.

    ``values[0]`` is the full gradient; ``values[k]`` is the gradient of
    entry 0 of ``values[k-1]``.
    """

    values: list[np.ndarray]

    @property
    def order(self) -> int:
        return len(self.values)

    def __getitem__(self, order: int) -> np.ndarray:
        return self.values[order - 1]


def induced_transition(mdp: Mdp, policy: TabularPolicy) -> list[list[ExprRef]]:
    """P_pi[s][s'] = sum_a P(s, a, s') pi(a | s) as graph expressions."""
    S, A = mdp.n_states, mdp.n_actions
    rows = []
    for s in range(S):
        pis = [policy.prob(s, a) for a in range(A)]
        rows.append([total([pis[a] * float(mdp.transition[s, a, s2]) for a in range(A)])
                     for s2 in range(S)])
    return rows


def _bellman_q(mdp: Mdp, v_next: np.ndarray) -> np.ndarray:
    return mdp.reward[:, None] + mdp.gamma * mdp.transition @ v_next


def exact_value(mdp: Mdp, policy: TabularPolicy) -> tuple[ExprRef, ValueTable]:
    """Expected discounted return from P0 and the matching value table."""
    S = mdp.n_states
    P_pi = induced_transition(mdp, policy)
    g = policy.graph
    A = [[(1.0 if i == j else 0.0) - mdp.gamma * P_pi[i][j] for j in range(S)] for i in range(S)]
    v_expr = linear_solve(A, [g.constant(r) for r in mdp.reward])
    vbar = total([v_expr[s] * float(mdp.initial[s]) for s in range(S)])
    v = np.array([x.value for x in v_expr])
    return vbar, ValueTable(v=v, q=_bellman_q(mdp, v), source="exact")


def exact_value_numeric(mdp: Mdp, probs: np.ndarray) -> ValueTable:
    """Same table as :func:`exact_value`, via numpy only (no graph)."""
    P_pi = np.einsum("sap,sa->sp", mdp.transition, probs)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, mdp.reward)
    return ValueTable(v=v, q=_bellman_q(mdp, v), source="exact")


def finite_horizon_value(mdp: Mdp, policy: TabularPolicy, T: int) -> ExprRef:
    """Expected T-step discounted return, sum_{t<T} gamma^t E[R(s_t)]."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    S = mdp.n_states
    g = policy.graph
    P_pi = induced_transition(mdp, policy) if T > 1 else None
    # backward recursion V_h = R + gamma P_pi V_{h-1}
    v = [g.constant(r) for r in mdp.reward]
    for _ in range(T - 1):
        v = [total([P_pi[s][s2] * v[s2] for s2 in range(S)]) * mdp.gamma + float(mdp.reward[s])
             for s in range(S)]
    return total([v[s] * float(mdp.initial[s]) for s in range(S)])


def finite_horizon_table(mdp: Mdp, probs: np.ndarray, T: int) -> ValueTable:
    """Time-indexed values for T-step episodes; ``v[t]`` covers T - t remaining steps."""
    S, A = mdp.n_states, mdp.n_actions
    v = np.zeros((T + 1, S))
    q = np.zeros((T, S, A))
    for t in range(T - 1, -1, -1):
        q[t] = _bellman_q(mdp, v[t + 1])
        v[t] = (probs * q[t]).sum(axis=1)
    return ValueTable(v=v, q=q, source="finite_horizon", horizon=T)


def optimal_value(mdp: Mdp, max_iter: int = 1000) -> tuple[float, np.ndarray]:
    """Policy iteration; returns (P0 . V*, greedy deterministic policy)."""
    S, A = mdp.n_states, mdp.n_actions
    pi = np.zeros(S, dtype=int)
    for _ in range(max_iter):
        probs = np.eye(A)[pi]
        table = exact_value_numeric(mdp, probs)
        new_pi = table.q.argmax(axis=1)
        if np.array_equal(new_pi, pi):
            break
        pi = new_pi
    return float(mdp.initial @ table.v), pi


def true_derivatives(value_expr: ExprRef, policy: TabularPolicy, max_order: int) -> DerivativeStack:
    if not 1 <= max_order <= 3:
        raise ValueError(f"max_order must be 1, 2 or 3, got {max_order}")
    stack = nested_derivatives(value_expr, policy.params, max_order)
    return DerivativeStack([np.array(d) for d in stack])


def perturb_values(table: ValueTable, sigma: float, seed: int, mdp: Mdp) -> ValueTable:
    """Add fixed per-state Gaussian noise to V and rebuild Q by one Bellman step."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    eps = make_rng(seed).normal(0.0, 1.0, size=mdp.n_states) * sigma
    if table.horizon is None:
        v = table.v + eps
        q = _bellman_q(mdp, v)
    else:
        T = table.horizon
        v = table.v.copy()
        v[:T] += eps  # v[T] stays 0: nothing is earned past the episode end
        q = np.stack([_bellman_q(mdp, v[t + 1]) for t in range(T)])
    return ValueTable(v=v, q=q, source="perturbed", sigma=float(sigma), horizon=table.horizon)


def enumeration_size(mdp: Mdp, T: int) -> int:
    return mdp.n_states * (mdp.n_states * mdp.n_actions) ** T


def enumerate_trajectories(mdp: Mdp, T: int) -> Iterator[tuple[Trajectory, float, list[tuple[int, int]]]]:
    """Every positive-probability trajectory with its environment factor.

    Yields ``(traj, env_prob, steps)`` where ``env_prob`` is the product of
    the initial and transition probabilities (including the transition into
    the terminal state) and ``steps`` lists the (state, action) pairs whose
    policy probabilities complete P(trajectory).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    n = enumeration_size(mdp, T)
    if n > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"{n} trajectories exceed the enumeration budget of {ENUMERATION_BUDGET}"
        )
    S, A = mdp.n_states, mdp.n_actions
    P, P0 = mdp.transition, mdp.initial
    for s0 in range(S):
        if P0[s0] == 0.0:
            continue
        for acts in itertools.product(range(A), repeat=T):
            for nxt in itertools.product(range(S), repeat=T):
                states = (s0,) + nxt
                p = float(P0[s0])
                for t in range(T):
                    p *= P[states[t], acts[t], states[t + 1]]
                    if p == 0.0:
                        break
                if p == 0.0:
                    continue
                traj = Trajectory(
                    states=np.array(states[:T]),
                    actions=np.array(acts),
                    rewards=mdp.reward[list(states[:T])],
                    terminal_state=states[T],
                )
                yield traj, p, list(zip(states[:T], acts))


def enumerate_expectation(
    mdp: Mdp,
    policy: TabularPolicy,
    T: int,
    functional: Callable[[Trajectory], ExprRef | float],
    detach_probs: bool = False,
) -> ExprRef:
    """Exact sum over trajectories of P(traj; theta) * functional(traj).

    P is built from the policy's differentiable nodes, so the result
    differentiates like the true expectation.  With ``detach_probs`` the
    weights pass through ``stop_gradient`` and only the functional carries
    derivatives.
    """
    g = policy.graph
    terms = []
    for traj, env_p, steps in enumerate_trajectories(mdp, T):
        logp = total([policy.log_prob(s, a) for s, a in steps])
        weight = exp(logp) * env_p
        if detach_probs:
            weight = stop_gradient(weight)
        f = functional(traj)
        terms.append(weight * (f if isinstance(f, ExprRef) else float(f)))
    return total(terms) if terms else g.constant(0.0)


def enumerate_expected_derivatives(
    mdp: Mdp,
    logits: np.ndarray,
    T: int,
    objective: Callable[[Trajectory, TabularPolicy], ExprRef],
    max_order: int,
) -> DerivativeStack:
    """E over trajectories of the per-trajectory derivative stack of ``objective``.

    Each trajectory gets its own graph; the expectation weights are plain
    probabilities, so this is the mean an infinitely large batch converges to.
    """
    probs = softmax_rows(logits)
    acc = [np.zeros(probs.size) for _ in range(max_order)]
    for traj, env_p, steps in enumerate_trajectories(mdp, T):
        p = env_p * math.prod(probs[s, a] for s, a in steps)
        if p == 0.0:
            continue
        g = ExprGraph()
        policy = TabularPolicy.create(g, logits)
        stack = nested_derivatives(objective(traj, policy), policy.params, max_order)
        for k in range(max_order):
            acc[k] += p * np.asarray(stack[k])
    return DerivativeStack(acc)
