"""Command-line entry point: ``loaded-dice {gen-mdp,exact,sweep,meta,replay}``.

Every file written gets a sibling ``<file>.manifest.json`` holding the fully
resolved configuration; ``loaded-dice replay <manifest>`` regenerates the
file byte for byte.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .advantage import AdvantageConfig
from .autodiff import AutodiffError, ExprGraph
from .estimators import FAMILIES, EstimatorConfig
from .experiments import SweepConfig, rows_to_csv, run_sweep
from .mdp import Mdp, MdpSchemaError, TabularPolicy, make_rng, random_mdp
from .metademo import MetaConfig, meta_train
from .oracle import exact_value, true_derivatives

EXIT_USAGE = 2
EXIT_NUMERIC = 3
SEED_ENV = "LOADED_DICE_SEED"


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_with_manifest(out: Path, text: str, command: str, config: dict, seeds: dict) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "outputs": [str(out)],
    }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# -- gen-mdp -------------------------------------------------------------

def _gen_mdp(config: dict) -> str:
    return random_mdp(config["states"], config["actions"], config["gamma"], config["seed"]).dumps()


def cmd_gen_mdp(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    config = {"states": args.states, "actions": args.actions, "gamma": args.gamma, "seed": seed}
    try:
        text = _gen_mdp(config)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if args.out is None:
        sys.stdout.write(text)
    else:
        _write_with_manifest(Path(args.out), text, "gen-mdp", config, {"seed": seed})
    return 0


# -- exact ---------------------------------------------------------------

def _exact(config: dict) -> str:
    mdp = Mdp.from_dict(config["mdp"])
    if config["policy_seed"] is None:
        logits = np.zeros((mdp.n_states, mdp.n_actions))
    else:
        logits = make_rng(config["policy_seed"]).normal(0.0, 0.1, (mdp.n_states, mdp.n_actions))
    g = ExprGraph()
    policy = TabularPolicy.create(g, logits)
    vbar, table = exact_value(mdp, policy)
    stack = true_derivatives(vbar, policy, config["max_order"])
    doc = {
        "value": vbar.value,
        "state_values": table.v.tolist(),
        "logits": logits.tolist(),
        "derivatives": {str(k): stack[k].tolist() for k in range(1, stack.order + 1)},
    }
    return json.dumps(doc, indent=1) + "\n"


def cmd_exact(args) -> int:
    try:
        doc = json.loads(Path(args.mdp).read_text())
    except OSError as err:
        raise UsageError(f"cannot read {args.mdp}: {err}") from None
    except json.JSONDecodeError as err:
        raise MdpSchemaError(f"{args.mdp} is not valid JSON: {err}") from None
    Mdp.from_dict(doc)  # validate before doing any work
    config = {"mdp": doc, "policy_seed": args.policy_seed, "max_order": args.max_order}
    text = _exact(config)
    if args.out is None:
        sys.stdout.write(text)
    else:
        _write_with_manifest(Path(args.out), text, "exact", config, {"policy_seed": args.policy_seed})
    return 0


# -- sweep ---------------------------------------------------------------

def _sweep(config: dict, threads: int = 1) -> str:
    return rows_to_csv(run_sweep(SweepConfig.from_dict(config), threads))


def cmd_sweep(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    variable = {"tau": "tau", "lambda": "lambda", "batch": "batch_size"}[args.sweep]
    if args.values is None:
        values = (8, 32, 128, 512) if variable == "batch_size" else (0.0, 0.25, 0.5, 0.75, 1.0)
    else:
        values = args.values
    try:
        cfg = SweepConfig(
            mdp_seed=args.mdp_seed,
            run_seed=seed,
            n_states=args.states,
            n_actions=args.actions,
            gamma=args.gamma,
            batch_size=args.batch_size,
            horizon=args.horizon,
            n_batches=args.batches,
            orders=args.orders,
            sweep_variable=variable,
            sweep_values=tuple(int(v) for v in values) if variable == "batch_size" else values,
            estimator=EstimatorConfig(args.estimator, args.lam, args.discount_objective),
            advantage=AdvantageConfig(args.advantage, args.tau, args.gamma, args.bootstrap),
            value_noise_sigma=args.value_noise,
            normalize_advantages=args.normalize_advantages,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    config = cfg.to_dict()
    text = _sweep(config, args.threads)
    seeds = {"mdp_seed": cfg.mdp_seed, "run_seed": cfg.run_seed}
    if args.out is None:
        sys.stdout.write(text)
    else:
        _write_with_manifest(Path(args.out), text, "sweep", config, seeds)
    return 0


# -- meta ----------------------------------------------------------------

def _meta(config: dict) -> str:
    result = meta_train(MetaConfig.from_dict(config))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["outer_step", "mean_post_adapt_return", "stderr"])
    for i, (m, e) in enumerate(zip(result.mean_post_adapt_return, result.stderr)):
        w.writerow([i, f"{m:.17g}", f"{e:.17g}"])
    return buf.getvalue()


def cmd_meta(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        cfg = MetaConfig(
            inner_lr=args.inner_lr,
            inner_estimator=EstimatorConfig("loaded_dice", args.lam, args.discount_objective),
            inner_advantage=AdvantageConfig("gae", args.tau, args.gamma),
            task_seeds=args.tasks,
            task_batch=args.task_batch,
            outer_batch=args.outer_batch,
            outer_steps=args.outer_steps,
            outer_lr=args.outer_lr,
            inner_steps=args.inner_steps,
            horizon=args.horizon,
            n_states=args.states,
            n_actions=args.actions,
            gamma=args.gamma,
            run_seed=seed,
            init_seed=args.init_seed,
            normalize_advantages=args.normalize_advantages,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None
    config = cfg.to_dict()
    text = _meta(config)
    seeds = {"run_seed": seed, "task_seeds": list(cfg.task_seeds), "init_seed": cfg.init_seed}
    if args.out is None:
        sys.stdout.write(text)
    else:
        _write_with_manifest(Path(args.out), text, "meta", config, seeds)
    return 0


# -- replay --------------------------------------------------------------

_RUNNERS = {"gen-mdp": _gen_mdp, "exact": _exact, "sweep": _sweep, "meta": _meta}


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        command, config = manifest["command"], manifest["config"]
        runner = _RUNNERS[command]
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise UsageError(f"unusable manifest {args.manifest}: {err}") from None
    text = runner(config, args.threads) if command == "sweep" else runner(config)
    out = Path(args.out) if args.out else Path(manifest["outputs"][0])
    _write_with_manifest(out, text, command, config, manifest.get("seeds", {}))
    return 0


# -- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loaded-dice", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_mdp_shape(sp, seed_help="run seed (default: $LOADED_DICE_SEED or 0)"):
        sp.add_argument("--states", type=int, default=5)
        sp.add_argument("--actions", type=int, default=4)
        sp.add_argument("--gamma", type=float, default=0.95)
        sp.add_argument("--seed", type=int, default=None, help=seed_help)

    g = sub.add_parser("gen-mdp", help="write a random MDP as JSON")
    add_mdp_shape(g, "MDP seed (default: $LOADED_DICE_SEED or 0)")
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen_mdp)

    e = sub.add_parser("exact", help="analytic value and true derivatives of an MDP file")
    e.add_argument("--mdp", required=True, help="MDP JSON file")
    e.add_argument("--policy-seed", type=int, default=None,
                   help="perturb logits with Normal(0, 0.1) noise from this seed (default: uniform policy)")
    e.add_argument("--max-order", type=int, default=3, choices=(1, 2, 3))
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_exact)

    s = sub.add_parser("sweep", help="bias / std / correlation sweep, written as CSV")
    add_mdp_shape(s)
    s.add_argument("--mdp-seed", type=int, default=0)
    s.add_argument("--estimator", choices=FAMILIES, default="loaded_dice")
    s.add_argument("--sweep", choices=("tau", "lambda", "batch"), required=True)
    s.add_argument("--values", type=_floats, default=None)
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--advantage", choices=("gae", "monte_carlo_return", "exact_q_minus_v"), default="gae")
    s.add_argument("--value-noise", type=float, default=0.0)
    s.add_argument("--batches", type=int, default=200)
    s.add_argument("--batch-size", type=int, default=512)
    s.add_argument("--horizon", type=int, default=50)
    s.add_argument("--orders", type=_ints, default=(1, 2, 3))
    s.add_argument("--discount-objective", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--bootstrap", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--normalize-advantages", action="store_true")
    s.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("meta", help="tabular meta-learning demo, learning curve as CSV")
    add_mdp_shape(m)
    m.add_argument("--tasks", type=_ints, default=(0, 1, 2, 3, 4), help="task MDP seeds")
    m.add_argument("--inner-lr", type=float, default=0.1)
    m.add_argument("--outer-lr", type=float, default=0.03)
    m.add_argument("--outer-steps", type=int, default=100)
    m.add_argument("--inner-steps", type=int, default=1)
    m.add_argument("--task-batch", type=int, default=20)
    m.add_argument("--outer-batch", type=int, default=20)
    m.add_argument("--lambda", dest="lam", type=float, default=1.0)
    m.add_argument("--tau", type=float, default=0.0)
    m.add_argument("--horizon", type=int, default=50)
    m.add_argument("--init-seed", type=int, default=None)
    m.add_argument("--discount-objective", action=argparse.BooleanOptionalAction, default=False)
    m.add_argument("--normalize-advantages", action="store_true")
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_meta)

    r = sub.add_parser("replay", help="regenerate an output from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", default=None, help="write here instead of the recorded path")
    r.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        return args.func(args)
    except (UsageError, MdpSchemaError) as err:
        print(f"loaded-dice {stage}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (AutodiffError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"loaded-dice {stage}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
