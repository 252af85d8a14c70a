"""Advantage estimators over a single trajectory.

Everything here returns plain float arrays.  Advantages are data for the
objectives, never differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mdp import Trajectory
from .oracle import ValueTable

ADVANTAGE_KINDS = ("gae", "monte_carlo_return", "exact_q_minus_v")


@dataclass(frozen=True)
class AdvantageConfig:
    kind: str = "gae"
    tau: float = 1.0
    gamma: float = 0.95
    bootstrap_terminal: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ADVANTAGE_KINDS:
            raise ValueError(f"unknown advantage kind {self.kind!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")


def returns(traj: Trajectory, gamma: float) -> np.ndarray:
    """Discounted reward-to-go R_t = r_t + gamma R_{t+1}, with R_T = 0."""
    r = np.asarray(traj.rewards, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def gae(traj: Trajectory, values: ValueTable, cfg: AdvantageConfig) -> np.ndarray:
    """GAE(gamma, tau) by the backward recursion A_t = delta_t + gamma tau A_{t+1}."""
    T = traj.horizon
    gamma, decay = cfg.gamma, cfg.gamma * cfg.tau
    v = np.array([values.value(t, s) for t, s in enumerate(traj.states)])
    v_next = np.empty(T)
    v_next[:-1] = v[1:]
    v_next[-1] = values.value(T, traj.terminal_state) if cfg.bootstrap_terminal else 0.0
    delta = np.asarray(traj.rewards, dtype=float) + gamma * v_next - v
    adv = np.empty(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return adv


def exact_advantages(traj: Trajectory, values: ValueTable) -> np.ndarray:
    """Q(s_t, a_t) - V(s_t) read from the table."""
    return np.array([
        values.qvalue(t, s, a) - values.value(t, s)
        for t, (s, a) in enumerate(zip(traj.states, traj.actions))
    ])


def compute_advantages(
    traj: Trajectory, cfg: AdvantageConfig, values: Optional[ValueTable] = None
) -> np.ndarray:
    if cfg.kind == "monte_carlo_return":
        return returns(traj, cfg.gamma)
    if values is None:
        raise ValueError(f"advantage kind {cfg.kind!r} needs a value table")
    if cfg.kind == "gae":
        return gae(traj, values, cfg)
    return exact_advantages(traj, values)


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit-std rescaling over whatever batch ``adv`` holds.

    A series with std <= eps maps to zeros.  Otherwise the std is divided
    out exactly, so the result is invariant to positive affine maps.
    """
    a = np.asarray(adv, dtype=float)
    centered = a - a.mean()
    sd = a.std()
    if sd <= eps:
        return np.zeros_like(a)
    return centered / sd
