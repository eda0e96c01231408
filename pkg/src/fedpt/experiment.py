"""End-to-end runs, repeats and grid sweeps driven by ``ExperimentConfig``."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import ExperimentConfig, validate_grid
from .data import Dataset, FederatedDataset, dirichlet_partition, PartitionConfig, shard_equal, synth_gaussian_mixture
from .errors import ConfigError
from .fed import Simulation, evaluate
from .metrics import MetricsRow, filter_outliers, mean_pm_std, write_metrics, write_timings
from .model import PartitionedParams, apply_freeze_plan, save_checkpoint
from .rng import derive_seed

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    params: PartitionedParams
    final_accuracy: float
    best_accuracy: float

    @property
    def trainable_fraction(self) -> float:
        return self.params.num_trainable / self.params.model.param_count

    def mean_round_ms(self) -> float:
        kept = filter_outliers([r.round_ms for r in self.rows])
        return float(np.mean(kept)) if kept else float("nan")


def build_data(cfg: ExperimentConfig) -> tuple[FederatedDataset, Dataset]:
    rng = np.random.default_rng(derive_seed(cfg.seed, "data"))
    n_train = cfg.num_clients * cfg.examples_per_client
    if cfg.data == "image_mixture":
        dim, shape = 28 * 28, (28, 28, 1)
    else:
        dim, shape = cfg.dim, None
    full = synth_gaussian_mixture(cfg.num_classes, dim, n_train + cfg.eval_examples, cfg.separation, cfg.noise_std, rng, shape)
    train = full.subset(np.arange(n_train))
    held_out = full.subset(np.arange(n_train, n_train + cfg.eval_examples))
    if cfg.partition == "iid":
        fed = shard_equal(train, cfg.num_clients, rng)
    else:
        fed = dirichlet_partition(
            train, PartitionConfig(cfg.num_clients, cfg.alpha, cfg.examples_per_client, derive_seed(cfg.seed, "partition"))
        )
    return fed, held_out


def build_params(cfg: ExperimentConfig) -> PartitionedParams:
    return apply_freeze_plan(cfg.build_model(), cfg.freeze_plan(), derive_seed(cfg.seed, "init"))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Run ``cfg.rounds`` rounds; writes metrics.csv, timing.csv and checkpoint.bin when ``out_dir`` is set."""
    params = build_params(cfg)
    fed, held_out = build_data(cfg)
    sim = Simulation(params, fed, cfg.engine_config())
    dp = cfg.dp_config()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[MetricsRow] = []
    total = params.model.param_count
    try:
        for t in range(cfg.rounds):
            res = sim.run_round(t)
            last = t == cfg.rounds - 1
            acc = evaluate(params, sim.y, held_out) if ((t + 1) % cfg.eval_every == 0 or last) else None
            rows.append(
                MetricsRow(
                    round=t,
                    train_loss=res.mean_loss,
                    eval_accuracy=acc,
                    trainable_params=sim.num_trainable,
                    frozen_params=total - sim.num_trainable,
                    bytes_down=res.bytes_down,
                    bytes_up=res.bytes_up,
                    peak_alloc_bytes=res.peak_bytes,
                    clients=len(res.clients),
                    dropped=len(res.dropped),
                    clip_fraction=res.clip_fraction,
                    noise_multiplier=dp.noise_multiplier if dp else None,
                    round_ms=res.round_ms,
                )
            )
    finally:
        if out is not None:
            write_metrics(rows, out / "metrics.csv")
            write_timings(rows, out / "timing.csv")
    final = sim.current()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", final)
    accs = [r.eval_accuracy for r in rows if r.eval_accuracy is not None]
    return RunResult(cfg, rows, final, accs[-1], max(accs))


def run(cfg: ExperimentConfig, seed: int | None = None, repeats: int = 1, out_dir=None) -> list[RunResult]:
    """``repeats`` runs with seeds ``seed, seed+1, ...``; writes summary.json with mean ± stddev."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    base = cfg.seed if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for k in range(repeats):
        run_cfg = cfg.replace(seed=base + k)
        sub = None if out is None else (out if repeats == 1 else out / f"seed_{base + k}")
        results.append(run_experiment(run_cfg, sub))
    if out is not None:
        summary = {
            "seeds": [base + k for k in range(repeats)],
            "trainable_fraction": results[0].trainable_fraction,
            "final_accuracy": [r.final_accuracy for r in results],
            "final_accuracy_pct": mean_pm_std([r.final_accuracy for r in results]),
            "mean_round_ms": [r.mean_round_ms() for r in results],
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return results


def grid_points(cfg: ExperimentConfig, grid: Mapping[str, list]) -> list[tuple[dict, ExperimentConfig]]:
    """Every Cartesian point as a validated config; fails before anything runs."""
    grid = validate_grid(grid)
    keys = list(grid)
    points = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        try:
            points.append((overrides, cfg.replace(**overrides)))
        except ConfigError as exc:
            raise ConfigError(f"grid point {overrides}: {exc}") from None
    return points


def sweep(cfg: ExperimentConfig, grid: Mapping[str, list], out_dir) -> list[dict]:
    points = grid_points(cfg, grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, (overrides, point_cfg) in enumerate(points):
        log.info("sweep point %d/%d: %s", i + 1, len(points), overrides)
        res = run_experiment(point_cfg, out / f"point_{i}")
        summary.append(
            {
                "point": i,
                **{k: json.dumps(v) if isinstance(v, (list, tuple)) else v for k, v in overrides.items()},
                "trainable_fraction": res.trainable_fraction,
                "final_eval_accuracy": res.final_accuracy,
                "best_eval_accuracy": res.best_accuracy,
            }
        )
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)
    return summary
