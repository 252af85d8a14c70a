"""Tabular MAML: differentiate through a Loaded DiCE policy-gradient step.

Each task is a random MDP.  The inner loop takes ``inner_steps`` gradient
ascent steps on the batch-mean Loaded DiCE objective with
``create_graph=True``, so the adapted logits are expressions in the initial
logits.  The outer loop samples post-adaptation trajectories and follows a
REINFORCE-with-baseline gradient back through the adaptation.

Sampling seeds depend on (run seed, task, inner step) but not on the outer
step, so an outer learning rate of 0 reproduces the same curve point at
every step.

With ``score_terms=False`` the inner step uses sum_t A_t log pi(a_t | s_t)
instead.  It has the same first derivative as Loaded DiCE for every lambda,
but differentiating it again holds the inner sample fixed.  That is the
Jacobian finite differences see, which makes the exact enumerated meta
objective ``sum_tau P(tau; theta) V(theta'(tau))`` checkable.  The magic-box
terms of the default mode replace the likelihood-ratio term of that
objective only to first order in the inner learning rate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .advantage import AdvantageConfig, compute_advantages, normalize, returns
from .autodiff import ExprGraph, ExprRef, NonFiniteError, exp, grad, total
from .estimators import EstimatorConfig, loaded_dice_objective
from .experiments import derive_seed
from .mdp import Mdp, TabularPolicy, Trajectory, make_rng, random_mdp, sample_batch, softmax_rows
from .oracle import ValueTable, enumerate_trajectories, exact_value, exact_value_numeric


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.1
    inner_estimator: EstimatorConfig = field(default_factory=lambda: EstimatorConfig("loaded_dice", 1.0))
    inner_advantage: AdvantageConfig = field(default_factory=lambda: AdvantageConfig("gae", tau=0.0))
    task_seeds: tuple = (0,)
    task_batch: int = 20
    outer_batch: int = 20
    outer_steps: int = 100
    outer_lr: float = 0.03
    inner_steps: int = 1
    horizon: int = 50
    n_states: int = 5
    n_actions: int = 4
    gamma: float = 0.95
    run_seed: int = 0
    init_seed: Optional[int] = None
    normalize_advantages: bool = False

    def __post_init__(self) -> None:
        if self.inner_lr < 0:
            raise ValueError(f"inner_lr must be >= 0, got {self.inner_lr}")
        if not self.task_seeds:
            raise ValueError("task_seeds must be nonempty")
        if self.inner_estimator.family != "loaded_dice":
            raise ValueError("the inner estimator must be loaded_dice")
        if self.inner_steps < 1 or self.outer_steps < 0:
            raise ValueError("inner_steps must be >= 1 and outer_steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_seeds"] = list(self.task_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MetaConfig:
        d = dict(d)
        d["inner_estimator"] = EstimatorConfig(**d["inner_estimator"])
        d["inner_advantage"] = AdvantageConfig(**d["inner_advantage"])
        d["task_seeds"] = tuple(d["task_seeds"])
        return cls(**d)


@dataclass
class MetaResult:
    mean_post_adapt_return: list[float]
    stderr: list[float]
    exact_post_adapt_value: list[float]
    final_logits: np.ndarray


def make_tasks(cfg: MetaConfig) -> list[Mdp]:
    return [random_mdp(cfg.n_states, cfg.n_actions, cfg.gamma, s) for s in cfg.task_seeds]


def initial_logits(cfg: MetaConfig) -> np.ndarray:
    shape = (cfg.n_states, cfg.n_actions)
    if cfg.init_seed is None:
        return np.zeros(shape)
    return make_rng(cfg.init_seed).normal(0.0, 0.1, size=shape)


def _rows(flat: Sequence[ExprRef], n_actions: int) -> list[list[ExprRef]]:
    return [list(flat[i:i + n_actions]) for i in range(0, len(flat), n_actions)]


def sample_path_objective(
    traj: Trajectory, adv: Sequence[float], policy: TabularPolicy, cfg: MetaConfig
) -> ExprRef:
    """sum_t A_t log pi(a_t | s_t), gamma^t weighted like the Loaded DiCE objective."""
    terms = []
    for t, (s, a) in enumerate(zip(traj.states, traj.actions)):
        w = float(adv[t]) * (cfg.gamma**t if cfg.inner_estimator.discount_objective else 1.0)
        terms.append(policy.log_prob(int(s), int(a)) * w)
    return total(terms)


def inner_objective(
    policy: TabularPolicy,
    trajs: Sequence[Trajectory],
    cfg: MetaConfig,
    values: ValueTable,
    score_terms: bool = True,
) -> ExprRef:
    adv_cfg = replace(cfg.inner_advantage, gamma=cfg.gamma)
    advs = [compute_advantages(t, adv_cfg, values) for t in trajs]
    if cfg.normalize_advantages:
        flat = normalize(np.concatenate(advs))
        advs = np.split(flat, np.cumsum([len(a) for a in advs])[:-1])
    if score_terms:
        terms = [loaded_dice_objective(t, a, policy, cfg.inner_estimator, cfg.gamma)
                 for t, a in zip(trajs, advs)]
    else:
        terms = [sample_path_objective(t, a, policy, cfg) for t, a in zip(trajs, advs)]
    return total(terms) * (1.0 / len(terms))


def inner_adapt(
    policy: TabularPolicy,
    task: Mdp,
    cfg: MetaConfig,
    seed: int,
    trajs: Optional[Sequence[Trajectory]] = None,
    values: Optional[ValueTable] = None,
    score_terms: bool = True,
) -> list[list[ExprRef]]:
    """Adapted logits theta' = theta + alpha * grad J_lambda, as graph expressions.

    ``trajs`` pins the first inner step's sample and ``values`` pins the
    critic of every step; by default samples are drawn from the current
    policy and the critic is its exact value.
    Derivatives flow through the gradient step but not through the sampling
    or the critic.
    """
    params = policy.params
    current = policy
    for step in range(cfg.inner_steps):
        probs = current.probs()
        if step > 0 or trajs is None:
            batch = sample_batch(task, probs, cfg.horizon, cfg.task_batch, derive_seed(seed, step))
        else:
            batch = trajs
        vt = values if values is not None else exact_value_numeric(task, probs)
        J = inner_objective(current, batch, cfg, vt, score_terms)
        # later steps differentiate wrt the previous adapted logits
        gs = grad(J, params, create_graph=True, allow_intermediate=step > 0)
        params = [p + gk * cfg.inner_lr for p, gk in zip(params, gs)]
        current = TabularPolicy(policy.graph, _rows(params, policy.n_actions))
    return current.logits


def outer_surrogate(
    adapted: TabularPolicy, trajs: Sequence[Trajectory], gamma: float
) -> ExprRef:
    """Batch-mean REINFORCE surrogate with a per-timestep mean-return baseline."""
    rets = np.stack([returns(t, gamma) for t in trajs])
    adv = rets - rets.mean(axis=0, keepdims=True)
    coef = np.zeros((adapted.n_states, adapted.n_actions))
    for t_i, traj in enumerate(trajs):
        np.add.at(coef, (traj.states, traj.actions), adv[t_i])
    coef /= len(trajs)
    terms = [adapted.log_prob(s, a) * float(coef[s, a])
             for s in range(adapted.n_states) for a in range(adapted.n_actions)
             if coef[s, a] != 0.0]
    return total(terms) if terms else adapted.graph.constant(0.0)


def meta_step(
    logits: np.ndarray, tasks: Sequence[Mdp], cfg: MetaConfig
) -> tuple[np.ndarray, list[float], list[float]]:
    """One outer update.  Returns (outer gradient, post-adapt returns, exact values)."""
    gsum = np.zeros(logits.size)
    rets: list[float] = []
    exact: list[float] = []
    for k, task in enumerate(tasks):
        g = ExprGraph()
        policy = TabularPolicy.create(g, logits)
        adapted = TabularPolicy(g, inner_adapt(policy, task, cfg, derive_seed(cfg.run_seed, k, 0)))
        post_probs = adapted.probs()
        trajs = sample_batch(task, post_probs, cfg.horizon, cfg.outer_batch,
                             derive_seed(cfg.run_seed, k, 1))
        L = outer_surrogate(adapted, trajs, cfg.gamma)
        gsum += np.array(grad(L, policy.params))
        rets.extend(returns(t, cfg.gamma)[0] for t in trajs)
        exact.append(float(task.initial @ exact_value_numeric(task, post_probs).v))
    return gsum / len(tasks), rets, exact


def meta_train(cfg: MetaConfig) -> MetaResult:
    tasks = make_tasks(cfg)
    logits = initial_logits(cfg).ravel()
    means, errs, exact_curve = [], [], []
    for step in range(cfg.outer_steps):
        try:
            g, rets, exact = meta_step(logits.reshape(cfg.n_states, cfg.n_actions), tasks, cfg)
        except NonFiniteError as err:
            raise NonFiniteError(f"outer step {step}: {err}") from None
        if not np.isfinite(g).all():
            raise NonFiniteError(f"outer step {step}: non-finite outer gradient")
        r = np.asarray(rets)
        means.append(float(r.mean()))
        errs.append(float(r.std(ddof=1) / math.sqrt(r.size)) if r.size > 1 else 0.0)
        exact_curve.append(float(np.mean(exact)))
        logits = logits + cfg.outer_lr * g
    return MetaResult(means, errs, exact_curve, logits.reshape(cfg.n_states, cfg.n_actions))


def composite_value(
    logits: np.ndarray,
    task: Mdp,
    cfg: MetaConfig,
    trajs: Sequence[Trajectory],
    values: ValueTable,
    score_terms: bool = False,
) -> tuple[float, np.ndarray]:
    """Analytic value of the adapted policy and its gradient wrt the initial logits.

    Sample and critic are held fixed, so the value is a smooth function of
    the logits.  Its gradient matches finite differences when
    ``score_terms`` is off.
    """
    g = ExprGraph()
    policy = TabularPolicy.create(g, logits)
    adapted = TabularPolicy(g, inner_adapt(policy, task, cfg, 0, trajs=trajs, values=values,
                                           score_terms=score_terms))
    vbar, _ = exact_value(task, adapted)
    return vbar.value, np.array(grad(vbar, policy.params))


def enumerated_meta_objective(
    policy: TabularPolicy, task: Mdp, cfg: MetaConfig, values: ValueTable
) -> ExprRef:
    """sum over single-trajectory inner batches of P(traj; theta) * V(theta'(traj)).

    The exact expected post-adaptation value for ``task_batch == 1``.  The
    trajectory probability stays differentiable and the inner step uses the
    sample-path objective, so the gradient of this node is the exact
    meta-gradient.
    """
    if cfg.inner_steps != 1:
        raise ValueError("enumeration supports a single inner step")
    terms = []
    for traj, env_p, steps in enumerate_trajectories(task, cfg.horizon):
        weight = exp(total([policy.log_prob(s, a) for s, a in steps])) * env_p
        J = inner_objective(policy, [traj], cfg, values, score_terms=False)
        gs = grad(J, policy.params, create_graph=True)
        adapted = TabularPolicy(policy.graph, _rows(
            [p + gk * cfg.inner_lr for p, gk in zip(policy.params, gs)], policy.n_actions))
        vbar, _ = exact_value(task, adapted)
        terms.append(weight * vbar)
    return total(terms)


def enumerated_dice_meta_gradient(
    logits: np.ndarray, task: Mdp, cfg: MetaConfig, values: ValueTable
) -> np.ndarray:
    """sum_tau P(tau) grad V(theta'(tau)) with the Loaded DiCE inner step.

    The expected outer gradient when the outer evaluation is exact.  The
    probabilities are plain weights; the inner samples' dependence on theta
    enters only through the magic-box terms of d theta' / d theta.
    """
    if cfg.inner_steps != 1:
        raise ValueError("enumeration supports a single inner step")
    probs = softmax_rows(logits)
    acc = np.zeros(logits.size)
    for traj, env_p, steps in enumerate_trajectories(task, cfg.horizon):
        p = env_p * math.prod(probs[s, a] for s, a in steps)
        _, g = composite_value(logits, task, cfg, [traj], values, score_terms=True)
        acc += p * g
    return acc
