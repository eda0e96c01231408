"""Communication accounting, per-round metric rows and timing helpers."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

BYTES_PER_PARAM = 4
SEED_BYTES = 8


def comm_cost(num_trainable: int, clients: int, seed_bytes: int = SEED_BYTES) -> tuple[int, int]:
    """``(bytes_down, bytes_up)`` for one round.

    Downlink carries the trainable vector plus the seed; uplink carries only the
    trainable delta.
    """
    if num_trainable < 1:
        raise ConfigError("need at least one trainable parameter")
    if clients < 1:
        raise ConfigError("need at least one client per round")
    return clients * (BYTES_PER_PARAM * num_trainable + seed_bytes), clients * BYTES_PER_PARAM * num_trainable


def reduction_factor(fraction: float) -> float:
    """Communication reduction versus full-model transfer; the seed is ignored."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"trainable fraction must be in (0, 1], got {fraction}")
    return 1.0 / fraction


@dataclass
class MetricsRow:
    round: int
    train_loss: float
    eval_accuracy: float | None
    trainable_params: int
    frozen_params: int
    bytes_down: int
    bytes_up: int
    peak_alloc_bytes: int
    clients: int
    dropped: int
    clip_fraction: float | None
    noise_multiplier: float | None
    round_ms: float = 0.0


# round_ms is excluded by default: wall-clock time would break byte-identical reruns
METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow) if f.name != "round_ms")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 8))
    return str(v)


def write_metrics(rows: Iterable[MetricsRow], path, include_timing: bool = False) -> None:
    columns = METRICS_COLUMNS + (("round_ms",) if include_timing else ())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            d = asdict(row)
            writer.writerow([_fmt(d[c]) for c in columns])


def write_timings(rows: Sequence[MetricsRow], path) -> None:
    kept = set(np.flatnonzero(outlier_mask([r.round_ms for r in rows])).tolist())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("round", "round_ms", "kept"))
        for i, r in enumerate(rows):
            writer.writerow((r.round, f"{r.round_ms:.3f}", int(i in kept)))


def outlier_mask(values: Sequence[float]) -> np.ndarray:
    """True for values within one (population) standard deviation of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return np.zeros(0, dtype=bool)
    return np.abs(v - v.mean()) <= v.std()


def filter_outliers(values: Sequence[float]) -> list[float]:
    v = list(values)
    return [x for x, keep in zip(v, outlier_mask(v)) if keep]


def mean_pm_std(values: Sequence[float], scale: float = 100.0, digits: int = 2) -> str:
    """``"83.75 ± 0.16"``-style summary (sample stddev; 0 for a single run)."""
    v = np.asarray(values, dtype=np.float64) * scale
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return f"{v.mean():.{digits}f} ± {sd:.{digits}f}"


class Timer:
    def __enter__(self) -> "Timer":
        self._start = time.perf_counter()
        self.ms = math.nan
        return self

    def __exit__(self, *exc) -> None:
        self.ms = (time.perf_counter() - self._start) * 1000.0
