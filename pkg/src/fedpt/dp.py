"""Differentially private server path: update clipping and tree-aggregated noise.

Clipped client deltas are averaged with uniform weights over the report goal.
Noise is added to the running prefix sum of those averages through a binary
interval tree, so the prefix at round ``t`` carries ``popcount(t)`` independent
Gaussian node draws. Each node's draw is regenerated from ``(noise seed, node)``
on demand and never stored.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, RoundError, UsageError
from .optim import OptimizerState, optimizer_step
from .rng import seeded_gaussian_block

# noise multiplier -> reported epsilon; metadata only, nothing here computes privacy
NOISE_PRESETS: dict[float, float] = {
    0.0: float("inf"),
    1.13: 18.71,
    2.33: 7.83,
    4.03: 4.19,
    6.21: 2.60,
    8.83: 1.77,
}


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 0.3
    noise_multiplier: float = 0.0
    report_goal: int = 100
    epsilon: float | None = None
    noise_seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.report_goal < 1:
            raise ConfigError("report_goal must be a positive integer")
        if self.epsilon is None and self.noise_multiplier in NOISE_PRESETS:
            object.__setattr__(self, "epsilon", NOISE_PRESETS[self.noise_multiplier])


def l2_norm(v: np.ndarray) -> float:
    v64 = v.astype(np.float64, copy=False)
    return float(np.sqrt(np.dot(v64, v64)))


def clip_update(delta: np.ndarray, clip_norm: float) -> np.ndarray:
    """Project onto the L2 ball of radius ``clip_norm``; inputs inside the ball are returned as is."""
    if not clip_norm > 0:
        raise ConfigError("clip_norm must be positive")
    norm = l2_norm(delta)
    if norm <= clip_norm:
        return delta
    scale = clip_norm / norm
    out = (delta.astype(np.float64) * scale).astype(delta.dtype)
    # float32 rounding can leave the result a hair outside the ball
    shrink = 1.0
    while l2_norm(out) > clip_norm:
        shrink *= 1.0 - 1e-6
        out = (delta.astype(np.float64) * (scale * shrink)).astype(delta.dtype)
    return out


def noise_nodes_for(t: int) -> list[tuple[int, int]]:
    """Dyadic intervals covering rounds ``1..t``, largest first."""
    if t < 1:
        raise UsageError(f"round index must be >= 1, got {t}")
    nodes, start = [], 1
    for bit in range(t.bit_length() - 1, -1, -1):
        if t >> bit & 1:
            size = 1 << bit
            nodes.append((start, start + size - 1))
            start += size
    return nodes


@dataclass
class TreeNoiseState:
    noise_seed: int
    dim: int
    t: int = 0


def node_noise(state: TreeNoiseState, node: tuple[int, int], stddev: float) -> np.ndarray:
    return seeded_gaussian_block(state.noise_seed, f"tree-node/{node[0]}-{node[1]}", (state.dim,), stddev, dtype=np.float64)


def tree_prefix_noise(state: TreeNoiseState, t: int, noise_multiplier: float, clip_norm: float) -> np.ndarray:
    """Noise on the prefix sum through round ``t``; per-coordinate stddev of each node is ``sigma*C``."""
    total = np.zeros(state.dim, dtype=np.float64)
    if t == 0 or noise_multiplier == 0:
        return total
    stddev = noise_multiplier * clip_norm
    for node in noise_nodes_for(t):
        total += node_noise(state, node, stddev)
    return total


def uniform_average(deltas: Sequence[np.ndarray], divisor: int) -> np.ndarray:
    """``sum(deltas) / divisor`` accumulated in float64 in the given order."""
    if not deltas:
        raise RoundError("no client updates to aggregate")
    w = float(Fraction(1, divisor))
    acc = np.zeros(deltas[0].shape, dtype=np.float64)
    for d in deltas:
        acc += w * d.astype(np.float64)
    return acc.astype(deltas[0].dtype)


def dp_aggregate(updates, cfg: DpConfig) -> np.ndarray:
    """Clip each update, sum in ascending client-id order, divide by the report goal."""
    if not updates:
        raise RoundError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    return uniform_average([clip_update(u.delta, cfg.clip_norm) for u in ordered], cfg.report_goal)


def dp_server_step(
    y: np.ndarray,
    t: int,
    delta: np.ndarray,
    state: TreeNoiseState,
    cfg: DpConfig,
    server_opt: OptimizerState,
) -> np.ndarray:
    """Momentum step on the difference of privatized prefix sums.

    With ``S_t = sum_{s<=t} delta_s + noise_t / report_goal`` the round estimate
    is ``S_t - S_{t-1} = delta_t + (noise_t - noise_{t-1}) / report_goal``. It is
    formed from the noise difference directly so that ``sigma = 0`` reproduces
    the plain server optimizer bit for bit.
    """
    if t < 1:
        raise UsageError(f"round index must be >= 1, got {t}")
    if not np.all(np.isfinite(delta)):
        raise NumericError("non-finite aggregate in DP server step")
    estimate = delta
    if cfg.noise_multiplier > 0:
        diff = tree_prefix_noise(state, t, cfg.noise_multiplier, cfg.clip_norm) - tree_prefix_noise(
            state, t - 1, cfg.noise_multiplier, cfg.clip_norm
        )
        estimate = (delta.astype(np.float64) + diff / cfg.report_goal).astype(delta.dtype)
    state.t = t
    return optimizer_step(server_opt, y, -estimate)
