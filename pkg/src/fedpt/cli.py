"""Command line: ``fedpt run | sweep | eval | inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config, load_grid
from .errors import FedPTError
from .experiment import build_data, run, sweep
from .fed import evaluate
from .metrics import comm_cost, mean_pm_std, reduction_factor
from .model import load_checkpoint, trainable_fraction


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    results = run(cfg, seed=args.seed, repeats=args.repeats, out_dir=args.out)
    accs = [r.final_accuracy for r in results]
    print(f"trainable fraction: {100 * results[0].trainable_fraction:.2f}%")
    print(f"final eval accuracy: {mean_pm_std(accs)} ({len(accs)} run(s))")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    rows = sweep(cfg, load_grid(args.grid), args.out)
    for row in rows:
        print(json.dumps(row))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    params = load_checkpoint(args.checkpoint)
    _, held_out = build_data(cfg)
    print(f"eval accuracy: {100 * evaluate(params, params.y, held_out):.2f}%")
    return 0


def _cmd_inspect(args) -> int:
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        model, plan = params.model, params.plan
    else:
        cfg = load_config(args.config)
        model, plan = cfg.build_model(), cfg.freeze_plan()
    blocks, warnings = plan.resolve(model)
    frac = trainable_fraction(plan, model)
    n_train = sum(b.size for b in blocks if b.trainable)
    for layer, count in model.layer_param_counts().items():
        print(f"{layer:<16}{count:>12,}")
    print(f"{'total':<16}{model.param_count:>12,}")
    for b in blocks:
        print(f"  {b.name:<24}{str(b.shape):<20}{b.role:<12}{'trainable' if b.trainable else 'frozen'}")
    for w in warnings:
        print(f"warning: {w}")
    down, up = comm_cost(n_train, 1)
    print(f"trainable: {n_train:,} ({100 * frac:.2f}%), reduction {reduction_factor(frac):.1f}x")
    print(f"per-client bytes: down {down:,}, up {up:,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run every point of a parameter grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's held-out split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="show parameter blocks, trainable fraction and comm cost")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--checkpoint")
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
