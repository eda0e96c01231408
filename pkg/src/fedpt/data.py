"""Synthetic classification data and client partitioning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # [n, ...] float32
    labels: np.ndarray  # [n] int64
    num_classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ConfigError("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True, eq=False)
class FederatedDataset:
    clients: dict[int, Dataset]
    num_classes: int
    # source row indices per client, when built by partitioning
    indices: dict[int, np.ndarray] | None = None

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.clients)

    def __len__(self) -> int:
        return len(self.clients)

    def sizes(self) -> dict[int, int]:
        return {cid: len(d) for cid, d in self.clients.items()}


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    alpha: float = 1.0
    examples_per_client: int | None = None  # None: assign every example
    seed: int = 0


def synth_gaussian_mixture(
    num_classes: int,
    dim: int,
    n: int,
    separation: float,
    noise_std: float,
    rng: np.random.Generator,
    shape: tuple[int, ...] | None = None,
) -> Dataset:
    """Isotropic Gaussian classes around ``separation`` times a unit direction.

    With ``num_classes <= dim`` the directions are the first coordinate axes;
    otherwise they are random unit vectors. Labels are balanced to within one.
    """
    if num_classes < 2 or dim < 1 or n < num_classes or noise_std < 0:
        raise ConfigError(f"invalid mixture sizes: K={num_classes}, d={dim}, n={n}, noise_std={noise_std}")
    if shape is not None and int(np.prod(shape)) != dim:
        raise ConfigError(f"shape {shape} does not hold {dim} features")
    if num_classes <= dim:
        directions = np.eye(num_classes, dim)
    else:
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(n) % num_classes)
    features = separation * directions[labels] + noise_std * rng.standard_normal((n, dim))
    features = features.astype(np.float32)
    if shape is not None:
        features = features.reshape((n, *shape))
    return Dataset(features, labels.astype(np.int64), num_classes)


def train_eval_split(data: Dataset, eval_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    perm = rng.permutation(len(data))
    n_eval = int(round(eval_fraction * len(data)))
    return data.subset(np.sort(perm[n_eval:])), data.subset(np.sort(perm[:n_eval]))


def sample_dirichlet(alpha: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Dirichlet draw, computed in log space so tiny ``alpha`` stays finite.

    Uses Gamma(a) = Gamma(a + 1) * U**(1/a).
    """
    log_g = np.log(rng.gamma(alpha + 1.0, size=k)) + np.log(rng.random(k)) / alpha
    log_g -= log_g.max()
    g = np.exp(log_g)
    return g / g.sum()


def dirichlet_partition(data: Dataset, cfg: PartitionConfig) -> FederatedDataset:
    """Label-skewed federation: each client draws label proportions from Dir(alpha).

    Examples are assigned one at a time by drawing a label from the client's
    proportions and popping from that label's shuffled pool. When the pool is
    empty the example is drawn uniformly from everything that remains.
    """
    n, k = len(data), data.num_classes
    if cfg.num_clients < 1 or not cfg.alpha > 0:
        raise ConfigError("num_clients must be >= 1 and alpha > 0")
    if cfg.examples_per_client is None:
        counts = np.full(cfg.num_clients, n // cfg.num_clients)
        counts[: n % cfg.num_clients] += 1
    else:
        counts = np.full(cfg.num_clients, cfg.examples_per_client)
    if counts.sum() > n or counts.min() < 1:
        raise ConfigError(f"cannot give {counts.sum()} examples to {cfg.num_clients} clients from {n}")

    rng = np.random.default_rng(cfg.seed)
    pools = [list(rng.permutation(np.flatnonzero(data.labels == c))) for c in range(k)]
    remaining = np.array([len(p) for p in pools])
    clients, indices = {}, {}
    for cid in range(cfg.num_clients):
        probs = sample_dirichlet(cfg.alpha, k, rng)
        picked = []
        for label in rng.choice(k, size=counts[cid], p=probs):
            if remaining[label] == 0:
                label = int(rng.choice(k, p=remaining / remaining.sum()))
            picked.append(pools[label].pop())
            remaining[label] -= 1
        idx = np.asarray(picked, dtype=np.int64)
        indices[cid] = idx
        clients[cid] = data.subset(idx)
    return FederatedDataset(clients, k, indices)


def shard_equal(data: Dataset, num_clients: int, rng: np.random.Generator) -> FederatedDataset:
    """IID control: random permutation cut into equal shards (remainder dropped)."""
    n = len(data)
    if num_clients < 1 or num_clients > n:
        raise ConfigError(f"cannot split {n} examples over {num_clients} clients")
    per = n // num_clients
    perm = rng.permutation(n)
    indices = {cid: perm[cid * per : (cid + 1) * per] for cid in range(num_clients)}
    return FederatedDataset({cid: data.subset(idx) for cid, idx in indices.items()}, data.num_classes, indices)


def batch_iter(n: int, batch_size: int, rng: np.random.Generator | None = None, shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index batches covering one epoch of ``n`` examples; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = rng.permutation(n) if (shuffle and rng is not None) else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# --- dump / load ------------------------------------------------------------


def save_federated(path, fed: FederatedDataset) -> None:
    """JSON header line, then all clients' float32 features and int32 labels (little-endian)."""
    ids = fed.client_ids
    example_shape = list(fed.clients[ids[0]].features.shape[1:]) if ids else []
    header = {
        "num_classes": fed.num_classes,
        "feature_shape": example_shape,
        "clients": [[cid, len(fed.clients[cid])] for cid in ids],
    }
    feats = b"".join(fed.clients[c].features.astype("<f4").tobytes() for c in ids)
    labels = b"".join(fed.clients[c].labels.astype("<i4").tobytes() for c in ids)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(feats)
        fh.write(labels)


def load_federated(path) -> FederatedDataset:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(head)
        shape = tuple(header["feature_shape"])
        table = [(int(c), int(m)) for c, m in header["clients"]]
        k = int(header["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from None
    per = int(np.prod(shape)) if shape else 1
    total = sum(m for _, m in table)
    if len(payload) != total * per * 4 + total * 4:
        raise IntegrityError(f"{path}: payload size does not match header")
    feats = np.frombuffer(payload[: total * per * 4], dtype="<f4").astype(np.float32).reshape((total, *shape))
    labels = np.frombuffer(payload[total * per * 4 :], dtype="<i4").astype(np.int64)
    clients, offset = {}, 0
    for cid, m in table:
        clients[cid] = Dataset(feats[offset : offset + m], labels[offset : offset + m], k)
        offset += m
    return FederatedDataset(clients, k)
