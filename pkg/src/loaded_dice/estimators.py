"""Differentiable per-trajectory objectives.

Each function returns one scalar node whose repeated derivatives are the
estimator.  Values on the forward pass are fixed by construction:

==============  ===============================
family          evaluates to
==============  ===============================
dice            discounted return of the sample
dice_baseline   discounted return of the sample
lvc             sum of reward-to-go values
loaded_dice     0 (or R_0 with ``include_r0``)
==============  ===============================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .advantage import AdvantageConfig, compute_advantages, returns
from .autodiff import ExprRef, magicbox, total
from .mdp import TabularPolicy, Trajectory
from .oracle import ValueTable

FAMILIES = ("dice", "dice_baseline", "lvc", "loaded_dice")


@dataclass(frozen=True)
class EstimatorConfig:
    family: str = "loaded_dice"
    lam: float = 1.0
    discount_objective: bool = False
    include_r0: bool = False

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown estimator family {self.family!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def _log_probs(traj: Trajectory, policy: TabularPolicy) -> list[ExprRef]:
    return [policy.log_prob(int(s), int(a)) for s, a in zip(traj.states, traj.actions)]


def dice_objective(traj: Trajectory, policy: TabularPolicy, gamma: float) -> ExprRef:
    """sum_t gamma^t magicbox(log pi(a_<=t)) r_t."""
    terms = []
    cum = None
    for t, lp in enumerate(_log_probs(traj, policy)):
        cum = lp if cum is None else cum + lp
        terms.append(magicbox(cum) * (gamma**t * float(traj.rewards[t])))
    return total(terms)


def dice_baseline_objective(
    traj: Trajectory, policy: TabularPolicy, values: ValueTable, gamma: float
) -> ExprRef:
    """DiCE plus the control variate sum_t gamma^t (box(a_<t) - box(a_<=t)) V(s_t).

    The added term evaluates to 0.  V(s_t) depends on a_<t but not on a_t, so
    both boxes differentiate it alike and its expected derivative vanishes at
    every order.
    """
    terms = []
    prev = None
    for t, lp in enumerate(_log_probs(traj, policy)):
        cum = lp if prev is None else prev + lp
        box = magicbox(cum)
        w = gamma**t
        b = w * values.value(t, int(traj.states[t]))
        terms.append(box * (w * float(traj.rewards[t]) - b))
        terms.append(policy.graph.constant(b) if prev is None else magicbox(prev) * b)
        prev = cum
    return total(terms)


def lvc_objective(traj: Trajectory, rets: Sequence[float], policy: TabularPolicy) -> ExprRef:
    """sum_t magicbox(log pi(a_t | s_t)) R_t; correct at first order only."""
    return total([
        magicbox(lp) * float(R) for lp, R in zip(_log_probs(traj, policy), rets)
    ])


def loaded_dice_objective(
    traj: Trajectory,
    adv: Sequence[float],
    policy: TabularPolicy,
    cfg: EstimatorConfig,
    gamma: float = 1.0,
) -> ExprRef:
    """Loaded DiCE with lambda-discounted causal dependencies.

    ``w`` accumulates lambda-weighted log-probabilities up to and including
    a_t, ``v = w - log pi(a_t | s_t)`` excludes it, and each step adds
    ``(magicbox(w) - magicbox(v)) * A_t``.  ``gamma`` only matters when
    ``cfg.discount_objective`` or ``cfg.include_r0`` is set.
    """
    if len(adv) != traj.horizon:
        raise ValueError(f"{len(adv)} advantages for a horizon-{traj.horizon} trajectory")
    lam = cfg.lam
    terms = []
    w = None
    for t, lp in enumerate(_log_probs(traj, policy)):
        w = lp if w is None else w * lam + lp
        v = w - lp
        a_t = float(adv[t])
        if cfg.discount_objective:
            a_t *= gamma**t
        terms.append((magicbox(w) - magicbox(v)) * a_t)
    if cfg.include_r0:
        terms.append(policy.graph.constant(float(returns(traj, gamma)[0])))
    return total(terms)


def build_objective(
    traj: Trajectory,
    policy: TabularPolicy,
    est: EstimatorConfig,
    adv_cfg: AdvantageConfig,
    values: Optional[ValueTable] = None,
    adv: Optional[np.ndarray] = None,
) -> ExprRef:
    """Dispatch on ``est.family``.  ``adv`` overrides computed advantages."""
    gamma = adv_cfg.gamma
    if est.family == "dice":
        return dice_objective(traj, policy, gamma)
    if est.family == "dice_baseline":
        if values is None:
            raise ValueError("dice_baseline needs a value table")
        return dice_baseline_objective(traj, policy, values, gamma)
    if est.family == "lvc":
        return lvc_objective(traj, returns(traj, gamma), policy)
    if adv is None:
        adv = compute_advantages(traj, adv_cfg, values)
    return loaded_dice_objective(traj, adv, policy, est, gamma)
