"""``plasticnet`` command-line entry point.

Subcommands:

``run``        train one task/variant over a list of seeds
``evaluate``   score a checkpoint (or a random policy) without updates
``gradcheck``  run the finite-difference gradient-check suite
``trace``      dump the neuromodulator output over one trial of a checkpoint

Exit status is 0 when every requested run finished and every enabled check
passed, 1 when a check failed, 2 for usage or configuration errors and 3
when a run raised.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import a2c, checks
from .config import ConfigError, ExperimentConfig, load_config, parse_override, write_config
from .lm import LMDiverged, train_lm

log = logging.getLogger("plasticnet")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_RUN_FAILED = 0, 1, 2, 3


# -- run ----------------------------------------------------------------------------

def _run_seed(cfg: ExperimentConfig, seed: int) -> str:
    """Train one seed; every artifact goes to ``cfg.out``.  Returns the curve path."""
    tag = f"seed{seed}"
    if cfg.task == "lm":
        train_lm(cfg.lm_for(seed), out_dir=cfg.out, tag=tag)
        return os.path.join(cfg.out, f"curve_{tag}.csv")
    result = a2c.train_run(cfg.task, cfg.variant, cfg.hidden_size, cfg.train_for(seed),
                           out_dir=cfg.out, alpha=cfg.alpha, eta=cfg.eta, tag=tag)
    if cfg.trace:
        rows = a2c.emit_modulator_trace(result.model, cfg.task, seed)
        a2c.write_trace(os.path.join(cfg.out, f"trace_{tag}.csv"), rows)
    return os.path.join(cfg.out, f"curve_{tag}.csv")


def aggregate_curves(paths) -> list:
    """Across-seed median and quartiles of the per-interval median reward.

    Rows keep the per-seed schema: ``median_reward`` is the median over
    seeds, ``iqr_low``/``iqr_high`` the 25th/75th percentiles over seeds, and
    loss/grad_norm are across-seed medians.
    """
    tables = []
    for path in paths:
        with open(path, newline="") as fh:
            tables.append([[float(v) for v in row] for row in list(csv.reader(fh))[1:]])
    n_rows = min(len(t) for t in tables)
    out = []
    for i in range(n_rows):
        rows = np.array([t[i] for t in tables])
        q25, q50, q75 = np.percentile(rows[:, 1], [25, 50, 75])
        out.append((int(rows[0, 0]), q50, q25, q75, float(np.median(rows[:, 4])), float(np.median(rows[:, 5]))))
    return out


def cmd_run(cfg: ExperimentConfig, gradcheck: bool = False) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    write_config(cfg, os.path.join(cfg.out, "config.ini"))
    status = EXIT_OK
    if gradcheck:
        status = max(status, cmd_gradcheck(cfg.out))
    seeds = list(cfg.seeds)
    if cfg.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(seeds))) as pool:
            paths = list(pool.map(_run_seed, [cfg] * len(seeds), seeds))
    else:
        paths = [_run_seed(cfg, s) for s in seeds]
    if cfg.task != "lm":
        a2c.write_curve(os.path.join(cfg.out, "curve_aggregate.csv"), aggregate_curves(paths))
    print(f"wrote {len(paths)} run(s) to {cfg.out}")
    return status


# -- gradcheck ----------------------------------------------------------------------

GRADCHECK_FIELDS = ("check", "max_relative_error", "passed")


def cmd_gradcheck(out: str | None = None, seed: int = 0) -> int:
    results = checks.run_suite(seed)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "gradcheck.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRADCHECK_FIELDS)
            for name, err, ok in results:
                w.writerow([name, f"{err:.3e}", int(ok)])
    failed = [name for name, _, ok in results if not ok]
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} {err:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks within {checks.TOLERANCE:g}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


# -- evaluate / trace ---------------------------------------------------------------

def cmd_evaluate(args) -> int:
    if args.checkpoint:
        model, meta = a2c.load_model(args.checkpoint)
        task = args.task or meta.get("task")
        stats = a2c.evaluate(model, task, args.episodes, args.seed)
    elif args.policy == "random":
        if not args.task:
            raise ConfigError("--task is required with --policy random")
        task = args.task
        stats = a2c.evaluate_policy(a2c.random_policy, task, args.episodes, args.seed)
    else:
        raise ConfigError("evaluate needs --checkpoint or --policy random")
    stats = {"task": task, "episodes": args.episodes, "seed": args.seed, **stats}
    text = json.dumps(stats, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    model, meta = a2c.load_model(args.checkpoint)
    task = args.task or meta.get("task")
    rows = a2c.emit_modulator_trace(model, task, args.seed, args.trial)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", f"trace_seed{args.seed}.csv")
    a2c.write_trace(out, rows)
    print(f"wrote {len(rows)} steps to {out}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file ([experiment], [train], [lm] sections)")
    p.add_argument("--task", help="cue-reward, cue-reward-fixed4, maze or lm")
    p.add_argument("--variant", help="nonplastic, plastic, simple-mod or retro-mod")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="single seed")
    seeds.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0-8")
    p.add_argument("--out", help="output directory (default: $PLASTICNET_OUT or ./runs)")
    p.add_argument("--episodes", type=int, help="training episodes per seed (RL)")
    p.add_argument("--hidden-size", type=int, help="recurrent layer size")
    p.add_argument("--workers", type=int, help="seeds trained in parallel")
    p.add_argument("--trace", action="store_true", default=None,
                   help="also write a modulator trace per seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plasticnet", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a task/variant over seeds")
    _add_experiment_flags(run)
    run.add_argument("--gradcheck", action="store_true", help="run the gradient-check suite first")

    ev = sub.add_parser("evaluate", help="score a checkpoint or the random policy")
    ev.add_argument("--checkpoint")
    ev.add_argument("--policy", choices=("random",))
    ev.add_argument("--task")
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="write the statistics as JSON here")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--out", help="directory for gradcheck.csv")
    gc.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("trace", help="neuromodulator trace of one trial")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--task")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--trial", type=int)
    tr.add_argument("--out")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = [parse_override(item) + (f"--set {item}",) for item in args.set]
    flags = {
        ("experiment", "task"): args.task,
        ("experiment", "variant"): args.variant,
        ("experiment", "seeds"): args.seeds if args.seeds is not None else args.seed,
        ("experiment", "out"): args.out,
        ("experiment", "hidden_size"): args.hidden_size,
        ("experiment", "workers"): args.workers,
        ("experiment", "trace"): args.trace,
        ("train", "episodes"): args.episodes,
    }
    for (section, key), value in flags.items():
        if value is not None:
            overrides.append((section, key, str(value), f"--{key.replace('_', '-')}"))
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            return cmd_run(config_from_args(args), args.gradcheck)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.out, args.seed)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        return cmd_trace(args)
    except ConfigError as exc:
        print(f"plasticnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (a2c.TrainingDiverged, LMDiverged, ValueError, OSError) as exc:
        print(f"plasticnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
