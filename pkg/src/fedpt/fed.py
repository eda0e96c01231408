"""The federated round loop over partially trainable models.

Each round the server sends ``(y, z)`` to a sampled subset of clients. A client
rebuilds the full model from the seed, runs its local optimizer on the
trainable part only and returns ``delta = y_local - y``. The server averages
the deltas (weighted by example count) and feeds ``-delta`` to its optimizer as
a pseudo-gradient.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, FederatedDataset, batch_iter
from .dp import DpConfig, TreeNoiseState, clip_update, dp_server_step, l2_norm, uniform_average
from .errors import ConfigError, NumericError, RoundError
from .memory import AllocationTracker, track
from .metrics import BYTES_PER_PARAM, Timer, comm_cost
from .model import Model, ParamBlock, PartitionedParams, frozen_params, unflatten
from .optim import OptimizerState, make_optimizer, optimizer_step
from .rng import SplitMix64, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9

    def build(self, size: int) -> OptimizerState:
        return make_optimizer(self.kind, self.lr, size, self.momentum)


@dataclass(frozen=True)
class EngineConfig:
    clients_per_round: int = 10
    batch_size: int = 16
    local_steps: int | None = None  # None: one epoch over the client's data
    client_opt: OptimizerConfig = OptimizerConfig("sgd", 0.1)
    server_opt: OptimizerConfig = OptimizerConfig("sgd", 1.0)
    seed: int = 0
    weighting: str = "examples"  # or "uniform"
    clip_norm: float | None = None
    dp: DpConfig | None = None
    workers: int = 1
    # send the full model instead of (y, seed); requires an empty freeze plan
    fedavg_baseline: bool = False

    def __post_init__(self):
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_steps is not None and self.local_steps < 0:
            raise ConfigError("local_steps must be >= 0")
        if self.weighting not in ("examples", "uniform"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    weight: float
    loss: float = float("nan")
    steps: int = 0
    frozen_digest: str = ""
    peak_bytes: int = 0


@dataclass
class RoundResult:
    round: int
    y: np.ndarray
    clients: list[int]
    updates: list[ClientUpdate]
    dropped: list[int]
    mean_loss: float
    bytes_down: int
    bytes_up: int
    round_ms: float
    peak_bytes: int
    clip_fraction: float | None = None
    server_frozen_digest: str = ""


def frozen_digest(values: dict[str, np.ndarray], blocks: Sequence[ParamBlock]) -> str:
    h = hashlib.sha256()
    for b in blocks:
        if not b.trainable:
            h.update(b.name.encode())
            h.update(np.ascontiguousarray(values[b.name]).tobytes())
    return h.hexdigest()


def sample_clients(population: Sequence[int], m: int, rng: SplitMix64) -> list[int]:
    if not 1 <= m <= len(population):
        raise ConfigError(f"cannot sample {m} clients from a population of {len(population)}")
    return rng.sample(population, m)


def local_train(
    model: Model,
    blocks: Sequence[ParamBlock],
    frozen: dict[str, np.ndarray],
    y: np.ndarray,
    data: Dataset,
    opt: OptimizerState,
    batch_size: int,
    local_steps: int | None,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float, int]:
    """Run ClientOpt on the trainable vector; returns ``(y_final, mean_loss, steps)``."""
    frozen_t = {k: T.Tensor(v) for k, v in frozen.items()}
    trainable = [b for b in blocks if b.trainable]
    y_cur = y
    losses: list[float] = []
    n = len(data)
    target = local_steps

    def batches():
        while True:
            yield from batch_iter(n, batch_size, rng)
            if target is None:
                return

    for idx in batches():
        if target is not None and len(losses) >= target:
            break
        params = dict(frozen_t)
        leaves = {}
        for name, view in unflatten(y_cur, trainable).items():
            leaves[name] = params[name] = T.Tensor(view, requires_grad=True, name=name)
        logits = model.forward(params, T.Tensor(data.features[idx]))
        loss = T.softmax_cross_entropy(logits, data.labels[idx])
        grads = T.backward(loss)
        g = track(np.concatenate([grads[leaves[b.name]].ravel() for b in trainable]))
        losses.append(float(loss.data))
        del grads, loss, logits, params, leaves
        y_cur = track(optimizer_step(opt, y_cur, g))
    return y_cur, (float(np.mean(losses)) if losses else float("nan")), len(losses)


def client_update(
    params: PartitionedParams,
    y: np.ndarray,
    data: Dataset,
    client_id: int,
    client_opt: OptimizerConfig,
    batch_size: int,
    local_steps: int | None,
    client_seed: int,
    use_seed: bool = True,
) -> ClientUpdate | None:
    """One client's local training; ``None`` when the client has no data or diverged.

    With ``use_seed=False`` the frozen part is expected to be empty and the
    reconstruction step is skipped (plain FedAvg transfer of the full model).
    """
    if len(data) == 0:
        return None
    blocks = params.blocks
    with AllocationTracker() as tracker:
        y0 = track(np.array(y, dtype=np.float32, copy=True))
        frozen = frozen_params(params.seed, blocks) if use_seed else {}
        digest = frozen_digest(frozen, blocks) if frozen else ""
        rng = np.random.default_rng(client_seed)
        try:
            y_final, loss, steps = local_train(
                params.model, blocks, frozen, y0, data, client_opt.build(y0.size), batch_size, local_steps, rng
            )
        except NumericError as exc:
            log.warning("client %d dropped: %s", client_id, exc)
            return None
        delta = track(y_final - y0)
        peak = tracker.peak
    if not np.all(np.isfinite(delta)):
        log.warning("client %d dropped: non-finite delta", client_id)
        return None
    return ClientUpdate(client_id, delta, float(len(data)), loss, steps, digest, peak)


def aggregate(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """``sum(p_i * delta_i) / sum(p_i)``, reduced in ascending client-id order.

    Normalized weights are formed with exact rational arithmetic so that
    rescaling every ``p_i`` by the same factor cannot change the result.
    """
    if not updates:
        raise RoundError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    size = ordered[0].delta.shape
    if any(u.delta.shape != size for u in ordered):
        raise RoundError("client deltas differ in length")
    weights = [Fraction(u.weight) for u in ordered]
    if any(w <= 0 for w in weights):
        raise RoundError("client weights must be positive")
    total = sum(weights)
    acc = np.zeros(size, dtype=np.float64)
    for u, w in zip(ordered, weights):
        acc += float(w / total) * u.delta.astype(np.float64)
    return acc.astype(ordered[0].delta.dtype)


def server_step(state: OptimizerState, y: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """ServerOpt on the pseudo-gradient ``-delta``."""
    if y.shape != delta.shape:
        raise RoundError(f"aggregate length {delta.size} != model length {y.size}")
    if not np.all(np.isfinite(delta)):
        raise NumericError("non-finite aggregate")
    return optimizer_step(state, y, -delta)


def evaluate(params: PartitionedParams, y: np.ndarray, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    pred = params.model.predict(params.reconstruct(y), data.features)
    return float(np.mean(pred == data.labels))


class Simulation:
    """Driver owning the global trainable vector and server-side optimizer state."""

    def __init__(self, params: PartitionedParams, fed_data: FederatedDataset, cfg: EngineConfig):
        if cfg.fedavg_baseline and params.frozen_blocks:
            raise ConfigError("the FedAvg baseline transfers the full model; use an empty freeze plan")
        if cfg.clients_per_round > len(fed_data):
            raise ConfigError(f"clients_per_round={cfg.clients_per_round} exceeds population {len(fed_data)}")
        self.params = params
        self.data = fed_data
        self.cfg = cfg
        self.y = np.array(params.y, dtype=np.float32, copy=True)
        self.server_opt = cfg.server_opt.build(self.y.size)
        self.noise = TreeNoiseState(cfg.dp.noise_seed, self.y.size) if cfg.dp else None
        self.population = fed_data.client_ids

    @property
    def num_trainable(self) -> int:
        return self.y.size

    def current(self) -> PartitionedParams:
        return self.params.with_y(self.y.copy())

    def _client_seed(self, t: int, cid: int) -> int:
        return derive_seed(self.cfg.seed, "client", t, cid)

    def _bytes(self, sent: int, received: int) -> tuple[int, int]:
        if self.cfg.fedavg_baseline:
            n = self.params.model.param_count
            return sent * BYTES_PER_PARAM * n, received * BYTES_PER_PARAM * n
        down = comm_cost(self.y.size, sent)[0] if sent else 0
        up = comm_cost(self.y.size, received)[1] if received else 0
        return down, up

    def run_round(self, t: int) -> RoundResult:
        cfg = self.cfg
        rng = SplitMix64(derive_seed(cfg.seed, "sample", t))
        chosen = sorted(sample_clients(self.population, cfg.clients_per_round, rng))

        def work(cid: int):
            return client_update(
                self.params, self.y, self.data.clients[cid], cid, cfg.client_opt, cfg.batch_size,
                cfg.local_steps, self._client_seed(t, cid), use_seed=not cfg.fedavg_baseline,
            )

        with Timer() as timer:
            if cfg.workers > 1:
                with ThreadPoolExecutor(cfg.workers) as pool:
                    results = list(pool.map(work, chosen))
            else:
                results = [work(cid) for cid in chosen]
        updates = [u for u in results if u is not None]
        dropped = [cid for cid, u in zip(chosen, results) if u is None]
        if not updates:
            raise RoundError(f"round {t}: every sampled client failed")

        clip_fraction = None
        clip = cfg.dp.clip_norm if cfg.dp else cfg.clip_norm
        if clip is not None:
            clip_fraction = float(np.mean([l2_norm(u.delta) > clip for u in updates]))
        if cfg.dp is not None:
            ordered = sorted(updates, key=lambda u: u.client_id)
            delta = uniform_average([clip_update(u.delta, clip) for u in ordered], cfg.dp.report_goal)
            self.y = dp_server_step(self.y, t + 1, delta, self.noise, cfg.dp, self.server_opt)
        else:
            if clip is not None:
                updates_for_agg = [
                    ClientUpdate(u.client_id, clip_update(u.delta, clip), u.weight) for u in updates
                ]
            else:
                updates_for_agg = updates
            if cfg.weighting == "uniform":
                ordered = sorted(updates_for_agg, key=lambda u: u.client_id)
                delta = uniform_average([u.delta for u in ordered], len(ordered))
            else:
                delta = aggregate(updates_for_agg)
            self.y = server_step(self.server_opt, self.y, delta)
        if not np.all(np.isfinite(self.y)):
            raise NumericError(f"round {t}: global model became non-finite")

        down, up = self._bytes(len(chosen), len(updates))
        return RoundResult(
            round=t,
            y=self.y,
            clients=chosen,
            updates=updates,
            dropped=dropped,
            mean_loss=float(np.mean([u.loss for u in updates])),
            bytes_down=down,
            bytes_up=up,
            round_ms=timer.ms,
            peak_bytes=max(u.peak_bytes for u in updates),
            clip_fraction=clip_fraction,
            server_frozen_digest=self.server_frozen_digest(),
        )

    def server_frozen_digest(self) -> str:
        return frozen_digest(self.params.reconstruct(self.y), self.params.blocks)
