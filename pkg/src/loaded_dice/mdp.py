"""Tabular MDPs, softmax policies and trajectory sampling.

Rewards depend on state only and are read at the state the agent is in:
``r_t = R(s_t)``.  All randomness goes through numpy's counter-based Philox
bit generator, seeded with a single 64-bit integer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ExprGraph, ExprRef, exp, log, total

ROW_TOL = 1e-12


class MdpSchemaError(ValueError):
    """An MDP document is malformed; the message names the offending field."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True, eq=False)
class Mdp:
    transition: np.ndarray  # (S, A, S')
    reward: np.ndarray  # (S,)
    initial: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self) -> None:
        P = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        P0 = np.asarray(self.initial, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S = P.shape[0]
        if R.shape != (S,):
            raise ValueError(f"reward must have shape ({S},), got {R.shape}")
        if P0.shape != (S,):
            raise ValueError(f"initial must have shape ({S},), got {P0.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if (P < 0).any() or not np.all(np.abs(P.sum(axis=2) - 1.0) <= ROW_TOL):
            raise ValueError("every transition row must be nonnegative and sum to 1")
        if (P0 < 0).any() or abs(P0.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial distribution must be nonnegative and sum to 1")
        if not (np.isfinite(R).all() and np.isfinite(P).all()):
            raise ValueError("MDP contains non-finite entries")
        for name, arr in (("transition", P), ("reward", R), ("initial", P0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> Mdp:
        if not isinstance(doc, dict):
            raise MdpSchemaError("MDP document must be a JSON object")
        for key in ("n_states", "n_actions", "gamma", "transition", "reward", "initial"):
            if key not in doc:
                raise MdpSchemaError(f"missing field '{key}'")
        S, A = doc["n_states"], doc["n_actions"]
        for key in ("n_states", "n_actions"):
            if not isinstance(doc[key], int) or isinstance(doc[key], bool) or doc[key] < 1:
                raise MdpSchemaError(f"field '{key}' must be a positive integer")
        if not isinstance(doc["gamma"], (int, float)) or isinstance(doc["gamma"], bool):
            raise MdpSchemaError("field 'gamma' must be a number")
        shapes = {"transition": (S, A, S), "reward": (S,), "initial": (S,)}
        arrays = {}
        for key, shape in shapes.items():
            try:
                arr = np.asarray(doc[key], dtype=float)
            except (TypeError, ValueError):
                raise MdpSchemaError(f"field '{key}' must be a numeric array") from None
            if arr.shape != shape:
                raise MdpSchemaError(f"field '{key}' has shape {arr.shape}, expected {shape}")
            arrays[key] = arr
        try:
            return cls(gamma=float(doc["gamma"]), **arrays)
        except ValueError as err:
            raise MdpSchemaError(f"invalid MDP: {err}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> Mdp:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise MdpSchemaError(f"not valid JSON: {err}") from None
        return cls.from_dict(doc)


def random_mdp(n_states: int = 5, n_actions: int = 4, gamma: float = 0.95, seed: int = 0) -> Mdp:
    """Random dense MDP: uniform-then-normalised rows, rewards ~ Normal(5, 10)."""
    if n_states < 1 or n_actions < 1:
        raise ValueError(f"need n_states >= 1 and n_actions >= 1, got {n_states}, {n_actions}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    rng = make_rng(seed)
    raw = rng.random((n_states, n_actions, n_states))
    P = raw / raw.sum(axis=2, keepdims=True)
    R = rng.normal(5.0, 10.0, size=n_states)
    P0 = np.full(n_states, 1.0 / n_states)
    return Mdp(P, R, P0, gamma)


class TabularPolicy:
    """Per-state softmax over a table of logit nodes.

    ``logits[s][a]`` may be variables (the usual case) or arbitrary
    expressions, e.g. adapted parameters in the meta-learning demo.
    """

    def __init__(self, graph: ExprGraph, logits: Sequence[Sequence[ExprRef]]) -> None:
        self.graph = graph
        self.logits = [list(row) for row in logits]
        self.n_states = len(self.logits)
        self.n_actions = len(self.logits[0])
        self._log_probs: dict[int, list[ExprRef]] = {}

    @classmethod
    def create(cls, graph: ExprGraph, logit_values: np.ndarray) -> TabularPolicy:
        vals = np.asarray(logit_values, dtype=float)
        return cls(graph, [[graph.variable(v) for v in row] for row in vals])

    @property
    def params(self) -> list[ExprRef]:
        """All logits, row-major in (state, action); entry 0 is the first parameter."""
        return [x for row in self.logits for x in row]

    def logit_values(self) -> np.ndarray:
        return np.array([[x.value for x in row] for row in self.logits])

    def probs(self) -> np.ndarray:
        return softmax_rows(self.logit_values())

    def state_log_probs(self, s: int) -> list[ExprRef]:
        cached = self._log_probs.get(s)
        if cached is None:
            row = self.logits[s]
            # shift by a constant for stability; the constant carries no gradient
            m = max(x.value for x in row)
            lse = log(total([exp(x - m) for x in row])) + m
            cached = [x - lse for x in row]
            self._log_probs[s] = cached
        return cached

    def log_prob(self, s: int, a: int) -> ExprRef:
        return self.state_log_probs(s)[a]

    def prob(self, s: int, a: int) -> ExprRef:
        return exp(self.log_prob(s, a))


def policy_log_prob(policy: TabularPolicy, s: int, a: int) -> ExprRef:
    return policy.log_prob(s, a)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # s_0 .. s_{T-1}
    actions: np.ndarray  # a_0 .. a_{T-1}
    rewards: np.ndarray  # r_t = R(s_t)
    terminal_state: int  # s_T

    @property
    def horizon(self) -> int:
        return len(self.actions)


def sample_batch(
    mdp: Mdp, policy: TabularPolicy | np.ndarray, horizon: int, n: int, seed: int
) -> list[Trajectory]:
    """Sample ``n`` trajectories; a pure function of its arguments.

    ``policy`` is a :class:`TabularPolicy` or an (S, A) array of action
    probabilities.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    probs = policy.probs() if isinstance(policy, TabularPolicy) else np.asarray(policy, float)
    rng = make_rng(seed)
    pol_cdf = np.cumsum(probs, axis=1)
    trans_cdf = np.cumsum(mdp.transition, axis=2)
    init_cdf = np.cumsum(mdp.initial)

    states = np.empty((n, horizon + 1), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    states[:, 0] = _draw(init_cdf[None, :].repeat(n, axis=0), rng.random(n))
    for t in range(horizon):
        s = states[:, t]
        actions[:, t] = _draw(pol_cdf[s], rng.random(n))
        states[:, t + 1] = _draw(trans_cdf[s, actions[:, t]], rng.random(n))
    rewards = mdp.reward[states[:, :horizon]]
    return [
        Trajectory(states[i, :horizon], actions[i], rewards[i], int(states[i, horizon]))
        for i in range(n)
    ]


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first cdf entry exceeding u; clamp guards cdf[-1] < 1 by rounding
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def sample_trajectory(
    mdp: Mdp, policy: TabularPolicy | np.ndarray, horizon: int, seed: int
) -> Trajectory:
    return sample_batch(mdp, policy, horizon, 1, seed)[0]


def discounted_return(traj: Trajectory, gamma: float) -> float:
    return math.fsum(gamma**t * r for t, r in enumerate(traj.rewards))
