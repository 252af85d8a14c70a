"""Monte-Carlo bias / variance / correlation studies on random MDPs.

A sweep fixes one random MDP and one policy, then for each batch index
samples a batch of trajectories once and reuses it for every sweep value
(common random numbers).  Per-batch derivative estimates are compared with
the nested derivatives of the analytic infinite-horizon value.

Statistics per (sweep value, order):

* order 1 compares the whole gradient: ``bias`` is the 2-norm of
  ``mean(estimates) - truth`` and ``std`` is the 2-norm of the
  per-parameter sample standard deviations.
* orders 2 and 3 compare entry 0 of the order-k vector (the first-parameter
  protocol): ``bias = |mean - truth|`` and ``std`` is its sample std.
* ``correlation`` pools every per-batch order-k vector as points against
  the truth vector repeated once per batch, and takes the Pearson
  coefficient over all of them.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .advantage import AdvantageConfig, compute_advantages, normalize
from .autodiff import ExprGraph, nested_derivatives
from .estimators import EstimatorConfig, build_objective
from .mdp import Mdp, TabularPolicy, make_rng, random_mdp, sample_batch, softmax_rows
from .oracle import ValueTable, exact_value, exact_value_numeric, perturb_values, true_derivatives

SWEEP_VARIABLES = ("tau", "lambda", "batch_size")
CSV_COLUMNS = (
    "sweep_variable", "sweep_value", "order", "bias", "std", "correlation",
    "n_batches", "batch_size", "mdp_seed", "run_seed",
)


@dataclass(frozen=True)
class SweepConfig:
    mdp_seed: int = 0
    run_seed: int = 0
    n_states: int = 5
    n_actions: int = 4
    gamma: float = 0.95
    batch_size: int = 512
    horizon: int = 50
    n_batches: int = 200
    orders: tuple = (1, 2, 3)
    sweep_variable: str = "lambda"
    sweep_values: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    estimator: EstimatorConfig = field(
        default_factory=lambda: EstimatorConfig("loaded_dice", 1.0, discount_objective=True)
    )
    advantage: AdvantageConfig = field(
        default_factory=lambda: AdvantageConfig("gae", tau=0.0, bootstrap_terminal=True)
    )
    value_noise_sigma: float = 0.0
    normalize_advantages: bool = False
    policy_init_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.sweep_variable not in SWEEP_VARIABLES:
            raise ValueError(f"sweep_variable must be one of {SWEEP_VARIABLES}")
        if not self.sweep_values:
            raise ValueError("sweep_values must be nonempty")
        if not self.orders or any(k not in (1, 2, 3) for k in self.orders):
            raise ValueError(f"orders must be a nonempty subset of {{1, 2, 3}}, got {self.orders}")
        if self.n_batches < 2:
            raise ValueError("n_batches must be >= 2 to estimate a standard deviation")
        if self.horizon < 1 or self.batch_size < 1:
            raise ValueError("horizon and batch_size must be >= 1")
        fam = self.estimator.family
        if self.sweep_variable == "lambda" and fam != "loaded_dice":
            raise ValueError(f"a lambda sweep needs the loaded_dice estimator, not {fam}")
        if self.sweep_variable == "tau" and (fam != "loaded_dice" or self.advantage.kind != "gae"):
            raise ValueError("a tau sweep needs the loaded_dice estimator with gae advantages")
        if self.sweep_variable == "batch_size" and any(
            int(v) != v or v < 1 for v in self.sweep_values
        ):
            raise ValueError("batch_size sweep values must be positive integers")

    @property
    def max_order(self) -> int:
        return max(self.orders)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["orders"] = list(self.orders)
        d["sweep_values"] = list(self.sweep_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SweepConfig:
        d = dict(d)
        d["estimator"] = EstimatorConfig(**d["estimator"])
        d["advantage"] = AdvantageConfig(**d["advantage"])
        d["orders"] = tuple(d["orders"])
        d["sweep_values"] = tuple(d["sweep_values"])
        return cls(**d)


@dataclass(frozen=True)
class SweepRow:
    sweep_variable: str
    sweep_value: float
    order: int
    bias: float
    std: float
    correlation: float
    n_batches: int
    batch_size: int
    mdp_seed: int
    run_seed: int
    bias_se: float = math.nan
    std_se: float = math.nan


def derive_seed(*keys: int) -> int:
    """Stable 64-bit child seed from integer keys."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
               .generate_state(1, np.uint64)[0])


@dataclass
class Problem:
    """Everything a sweep holds fixed: MDP, policy, values and the truth."""

    mdp: Mdp
    logits: np.ndarray
    values: ValueTable
    truth: list[np.ndarray]


def setup_problem(cfg: SweepConfig) -> Problem:
    mdp = random_mdp(cfg.n_states, cfg.n_actions, cfg.gamma, cfg.mdp_seed)
    logits = make_rng(derive_seed(cfg.mdp_seed, 1)).normal(
        0.0, cfg.policy_init_scale, size=(cfg.n_states, cfg.n_actions)
    )
    g = ExprGraph()
    policy = TabularPolicy.create(g, logits)
    vbar, values = exact_value(mdp, policy)
    truth = true_derivatives(vbar, policy, cfg.max_order).values
    if cfg.value_noise_sigma > 0:
        values = perturb_values(values, cfg.value_noise_sigma, derive_seed(cfg.mdp_seed, cfg.run_seed, 2), mdp)
    return Problem(mdp, logits, values, truth)


def _variants(cfg: SweepConfig) -> list[tuple[EstimatorConfig, AdvantageConfig]]:
    adv = replace(cfg.advantage, gamma=cfg.gamma)
    if cfg.sweep_variable == "tau":
        return [(cfg.estimator, replace(adv, tau=float(v))) for v in cfg.sweep_values]
    if cfg.sweep_variable == "lambda":
        return [(replace(cfg.estimator, lam=float(v)), adv) for v in cfg.sweep_values]
    return [(cfg.estimator, adv)]


def trajectory_derivatives(
    traj, logits: np.ndarray, variants, values: Optional[ValueTable], max_order: int,
    advs: Optional[list] = None,
) -> list[list[np.ndarray]]:
    """Derivative stacks of each variant's objective on one shared graph."""
    g = ExprGraph()
    policy = TabularPolicy.create(g, logits)
    out = []
    for i, (est, adv_cfg) in enumerate(variants):
        J = build_objective(traj, policy, est, adv_cfg, values,
                            adv=None if advs is None else advs[i])
        out.append([np.asarray(d) for d in nested_derivatives(J, policy.params, max_order)])
    return out


def _batch_job(args) -> np.ndarray:
    cfg, problem, b = args
    variants = _variants(cfg)
    if cfg.sweep_variable == "batch_size":
        n = int(max(cfg.sweep_values))
    else:
        n = cfg.batch_size
    trajs = sample_batch(problem.mdp, softmax_rows(problem.logits), cfg.horizon, n,
                         derive_seed(cfg.run_seed, b))
    advs = None
    if cfg.normalize_advantages:
        advs = _normalized_advantages(trajs, variants, problem.values)
    n_params = problem.logits.size
    per = np.empty((n, len(variants), cfg.max_order, n_params))
    for i, traj in enumerate(trajs):
        stacks = trajectory_derivatives(
            traj, problem.logits, variants, problem.values, cfg.max_order,
            None if advs is None else [a[i] for a in advs],
        )
        per[i] = stacks
    if cfg.sweep_variable == "batch_size":
        # nested prefixes of one sample: batch 8 is the first 8 of batch 512
        return np.stack([per[: int(v), 0].mean(axis=0) for v in cfg.sweep_values])
    return per.mean(axis=0)  # (n_values, max_order, n_params)


def _normalized_advantages(trajs, variants, values):
    out = []
    for est, adv_cfg in variants:
        raw = [compute_advantages(t, adv_cfg, values) for t in trajs]
        flat = normalize(np.concatenate(raw))
        splits = np.cumsum([len(r) for r in raw])[:-1]
        out.append(np.split(flat, splits))
    return out


def collect_estimates(
    cfg: SweepConfig, threads: int = 1, problem: Optional[Problem] = None
) -> tuple[Problem, np.ndarray]:
    """Per-batch estimates with shape (n_values, n_batches, max_order, n_params)."""
    problem = problem or setup_problem(cfg)
    jobs = [(cfg, problem, b) for b in range(cfg.n_batches)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_batch_job, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        results = [_batch_job(j) for j in jobs]
    return problem, np.stack(results, axis=1)


def estimate_batch(
    mdp: Mdp, logits: np.ndarray, cfg: SweepConfig, batch_seed: int,
    values: Optional[ValueTable] = None,
) -> list[np.ndarray]:
    """Batch-mean derivative stack for the configured (first) variant."""
    if values is None:
        values = exact_value_numeric(mdp, softmax_rows(logits))
    est, adv = _variants(cfg)[0]
    trajs = sample_batch(mdp, softmax_rows(logits), cfg.horizon, cfg.batch_size, batch_seed)
    acc = [np.zeros(logits.size) for _ in range(cfg.max_order)]
    for traj in trajs:
        (stack,) = trajectory_derivatives(traj, logits, [(est, adv)], values, cfg.max_order)
        for k in range(cfg.max_order):
            acc[k] += stack[k]
    return [a / len(trajs) for a in acc]


def correlation(est: Sequence[float], truth: Sequence[float]) -> float:
    """Pearson correlation coefficient."""
    x = np.asarray(est, dtype=float).ravel()
    y = np.asarray(truth, dtype=float).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("correlation needs two equal-length vectors of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation is undefined for a constant input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def summarize(est: np.ndarray, truth: np.ndarray, order: int) -> dict:
    """Row statistics for per-batch estimates ``est`` of shape (n_batches, n_params)."""
    n = est.shape[0]
    if order == 1:
        sd = est.std(axis=0, ddof=1)
        bias = float(np.linalg.norm(est.mean(axis=0) - truth))
        std = float(np.sqrt((sd**2).sum()))
    else:
        x = est[:, 0]
        bias = float(abs(x.mean() - truth[0]))
        std = float(x.std(ddof=1))
    try:
        corr = correlation(est, np.tile(truth, (n, 1)))
    except ValueError:
        corr = math.nan
    return {
        "bias": bias,
        "std": std,
        "correlation": corr,
        "bias_se": std / math.sqrt(n),
        "std_se": std / math.sqrt(2 * (n - 1)),
    }


def run_sweep(cfg: SweepConfig, threads: int = 1) -> list[SweepRow]:
    problem, est = collect_estimates(cfg, threads)
    rows = []
    for vi, v in enumerate(cfg.sweep_values):
        bs = int(v) if cfg.sweep_variable == "batch_size" else cfg.batch_size
        for order in cfg.orders:
            stats = summarize(est[vi][:, order - 1], problem.truth[order - 1], order)
            rows.append(SweepRow(
                cfg.sweep_variable, float(v), order, n_batches=cfg.n_batches, batch_size=bs,
                mdp_seed=cfg.mdp_seed, run_seed=cfg.run_seed, **stats,
            ))
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()
