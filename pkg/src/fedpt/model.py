"""Declarative models, freeze plans and seed-based reconstruction.

A model's full parameter set ``x`` is split into a trainable flat vector ``y``
and a frozen remainder that is never stored: it is regenerated from the 64-bit
master seed ``z`` whenever a client (or the server) needs the full model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, IntegrityError
from .rng import seeded_gaussian_block

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv2d", "groupnorm", "maxpool", "flatten", "relu")
NORM_ROLES = ("norm-scale", "norm-shift")
GROUP_NORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    units: int = 0  # dense output width or conv filter count
    kernel: int = 0  # square conv kernel size
    groups: int = 0

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v not in (0, "")} | {"kind": self.kind}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        counters: dict[str, int] = {}
        named = []
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"unknown layer kind {layer.kind!r}")
            idx = counters.get(layer.kind, 0)
            counters[layer.kind] = idx + 1
            named.append(layer if layer.name else replace(layer, name=f"{layer.kind}_{idx}"))
        names = [l.name for l in named]
        if len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique: {names}")
        object.__setattr__(self, "layers", tuple(named))

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]))


@dataclass(frozen=True)
class ParamBlock:
    name: str
    layer: str
    shape: tuple[int, ...]
    role: str  # weight | bias | norm-scale | norm-shift
    init_std: float = 0.0  # 0 means constant init
    init_value: float = 0.0
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def initial_value(self, seed: int) -> np.ndarray:
        if self.init_std > 0:
            return seeded_gaussian_block(seed, self.name, self.shape, self.init_std)
        return np.full(self.shape, self.init_value, dtype=np.float32)


def _glorot_std(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


class Model:
    """Parameter blocks plus a forward function for a validated ``ModelSpec``."""

    def __init__(self, spec: ModelSpec):
        if not spec.layers:
            raise ConfigError("model spec has no layers")
        self.spec = spec
        self.blocks: list[ParamBlock] = []
        self.output_shapes: list[tuple[int, ...]] = []
        shape = spec.input_shape
        for layer in spec.layers:
            shape = self._add_layer(layer, shape)
            self.output_shapes.append(shape)
        self._by_name = {b.name: b for b in self.blocks}

    def _add_layer(self, layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
        n = layer.name
        if layer.kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"{n}: dense layer needs a flat input, got {shape}")
            if layer.units < 1:
                raise ConfigError(f"{n}: units must be positive")
            fin, fout = shape[0], layer.units
            self.blocks += [
                ParamBlock(f"{n}/kernel", n, (fin, fout), "weight", _glorot_std(fin, fout)),
                ParamBlock(f"{n}/bias", n, (fout,), "bias"),
            ]
            return (fout,)
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"{n}: conv2d needs (h, w, c) input, got {shape}")
            k = layer.kernel
            if k < 1 or k % 2 == 0 or layer.units < 1:
                raise ConfigError(f"{n}: conv2d needs an odd kernel and positive filters")
            cin, cout = shape[2], layer.units
            self.blocks += [
                ParamBlock(f"{n}/kernel", n, (k, k, cin, cout), "weight", _glorot_std(k * k * cin, k * k * cout)),
                ParamBlock(f"{n}/bias", n, (cout,), "bias"),
            ]
            return (shape[0], shape[1], cout)
        if layer.kind == "groupnorm":
            c = shape[-1]
            if layer.groups < 1 or c % layer.groups:
                raise ConfigError(f"{n}: {c} channels not divisible by {layer.groups} groups")
            self.blocks += [
                ParamBlock(f"{n}/scale", n, (c,), "norm-scale", init_value=1.0),
                ParamBlock(f"{n}/shift", n, (c,), "norm-shift"),
            ]
            return shape
        if layer.kind == "maxpool":
            if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
                raise ConfigError(f"{n}: maxpool needs (h, w, c) input with even h, w; got {shape}")
            return (shape[0] // 2, shape[1] // 2, shape[2])
        if layer.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape  # relu

    @property
    def param_count(self) -> int:
        return sum(b.size for b in self.blocks)

    def layer_param_counts(self) -> dict[str, int]:
        counts = {l.name: 0 for l in self.spec.layers}
        for b in self.blocks:
            counts[b.layer] += b.size
        return counts

    def block(self, name: str) -> ParamBlock:
        return self._by_name[name]

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return {b.name: b.initial_value(seed) for b in self.blocks}

    def forward(self, params: Mapping[str, T.Tensor], x: T.Tensor) -> T.Tensor:
        h = x
        for layer in self.spec.layers:
            n = layer.name
            if layer.kind == "dense":
                h = T.affine(h, params[f"{n}/kernel"], params[f"{n}/bias"])
            elif layer.kind == "conv2d":
                h = T.conv2d(h, params[f"{n}/kernel"], params[f"{n}/bias"])
            elif layer.kind == "groupnorm":
                h = T.group_norm(h, params[f"{n}/scale"], params[f"{n}/shift"], layer.groups, GROUP_NORM_EPS)
            elif layer.kind == "maxpool":
                h = T.maxpool2d(h)
            elif layer.kind == "flatten":
                h = T.flatten(h)
            else:
                h = T.relu(h)
        return h

    def predict(self, params: Mapping[str, np.ndarray], features: np.ndarray, batch_size: int = 256) -> np.ndarray:
        tensors = {k: T.Tensor(v) for k, v in params.items()}
        out = []
        for i in range(0, len(features), batch_size):
            logits = self.forward(tensors, T.Tensor(features[i : i + batch_size]))
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def emnist_cnn_spec(num_classes: int = 62, gn_groups: int = 32) -> ModelSpec:
    """The character-recognition CNN: two 5x5 convs, group norm, two dense layers."""
    return ModelSpec(
        (28, 28, 1),
        (
            LayerSpec("conv2d", units=32, kernel=5),
            LayerSpec("relu"),
            LayerSpec("maxpool"),
            LayerSpec("conv2d", units=64, kernel=5),
            LayerSpec("relu"),
            LayerSpec("groupnorm", groups=gn_groups),
            LayerSpec("maxpool"),
            LayerSpec("flatten"),
            LayerSpec("dense", units=512),
            LayerSpec("relu"),
            LayerSpec("dense", units=num_classes),
        ),
    )


def mlp_spec(dim: int, hidden: int, num_classes: int) -> ModelSpec:
    return ModelSpec(
        (dim,),
        (LayerSpec("dense", units=hidden), LayerSpec("relu"), LayerSpec("dense", units=num_classes)),
    )


# --- freeze plans -----------------------------------------------------------


@dataclass(frozen=True)
class FreezePlan:
    frozen: frozenset[str] = frozenset()
    protect_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "frozen", frozenset(self.frozen))

    def to_dict(self) -> dict:
        return {"frozen": sorted(self.frozen), "protect_norm": self.protect_norm}

    def resolve(self, model: Model) -> tuple[list[ParamBlock], list[str]]:
        """Blocks with their trainable flag set, plus any policy warnings."""
        layer_blocks: dict[str, list[str]] = {l.name: [] for l in model.spec.layers}
        for b in model.blocks:
            layer_blocks[b.layer].append(b.name)
        wanted: set[str] = set()
        for name in sorted(self.frozen):
            if name in layer_blocks:
                wanted.update(layer_blocks[name])
            elif name in model._by_name:
                wanted.add(name)
            else:
                raise ConfigError(f"freeze plan names unknown block {name!r}")
        warnings = []
        if self.protect_norm:
            for b in model.blocks:
                if b.name in wanted and b.role in NORM_ROLES:
                    wanted.discard(b.name)
                    warnings.append(f"{b.name} is a normalization block and stays trainable (protect_norm)")
        blocks = [replace(b, trainable=b.name not in wanted) for b in model.blocks]
        if not any(b.trainable for b in blocks):
            raise ConfigError("freeze plan leaves no trainable parameters")
        return blocks, warnings


@dataclass(frozen=True, eq=False)
class PartitionedParams:
    model: Model
    plan: FreezePlan
    seed: int
    y: np.ndarray
    blocks: tuple[ParamBlock, ...]
    warnings: tuple[str, ...] = field(default=())

    @property
    def trainable_blocks(self) -> list[ParamBlock]:
        return [b for b in self.blocks if b.trainable]

    @property
    def frozen_blocks(self) -> list[ParamBlock]:
        return [b for b in self.blocks if not b.trainable]

    @property
    def num_trainable(self) -> int:
        return sum(b.size for b in self.trainable_blocks)

    def reconstruct(self, y: np.ndarray | None = None) -> dict[str, np.ndarray]:
        return reconstruct(self.y if y is None else y, self.seed, self.blocks)

    def with_y(self, y: np.ndarray) -> "PartitionedParams":
        if y.shape != self.y.shape:
            raise IntegrityError(f"y has length {y.size}, expected {self.y.size}")
        return replace(self, y=y)


def apply_freeze_plan(model: Model, plan: FreezePlan, seed: int, params: Mapping[str, np.ndarray] | None = None) -> PartitionedParams:
    blocks, warnings = plan.resolve(model)
    for w in warnings:
        log.warning(w)
    if params is None:
        params = {b.name: b.initial_value(seed) for b in blocks if b.trainable}
    y = flatten_trainable(params, blocks)
    return PartitionedParams(model, plan, int(seed), y, tuple(blocks), tuple(warnings))


def frozen_params(seed: int, blocks: Iterable[ParamBlock]) -> dict[str, np.ndarray]:
    return {b.name: b.initial_value(seed) for b in blocks if not b.trainable}


def reconstruct(y: np.ndarray, seed: int, blocks: Iterable[ParamBlock]) -> dict[str, np.ndarray]:
    """Full parameter set: trainable blocks sliced from ``y``, frozen ones regenerated from ``seed``."""
    blocks = list(blocks)
    values = unflatten(y, blocks)
    values.update(frozen_params(seed, blocks))
    return {b.name: values[b.name] for b in blocks}


def trainable_fraction(plan: FreezePlan, model: Model) -> float:
    blocks, _ = plan.resolve(model)
    return sum(b.size for b in blocks if b.trainable) / model.param_count


def flatten_trainable(params: Mapping[str, np.ndarray], blocks: Iterable[ParamBlock]) -> np.ndarray:
    parts = []
    for b in blocks:
        if not b.trainable:
            continue
        v = np.asarray(params[b.name], dtype=np.float32)
        if v.shape != b.shape:
            raise IntegrityError(f"{b.name}: shape {v.shape} != {b.shape}")
        parts.append(v.ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


def unflatten(flat: np.ndarray, blocks: Iterable[ParamBlock]) -> dict[str, np.ndarray]:
    """Inverse of ``flatten_trainable``; returned arrays are views into ``flat``."""
    trainable = [b for b in blocks if b.trainable]
    expected = sum(b.size for b in trainable)
    if flat.ndim != 1 or flat.size != expected:
        raise IntegrityError(f"flat vector has length {flat.size}, expected {expected}")
    out, offset = {}, 0
    for b in trainable:
        out[b.name] = flat[offset : offset + b.size].reshape(b.shape)
        offset += b.size
    return out


# --- checkpoints ----------------------------------------------------------


def _write_framed(path: Path, header: dict, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def _read_framed(path: Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: missing header line")
    try:
        return json.loads(head.decode("utf-8")), payload
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None


def save_checkpoint(path, params: PartitionedParams) -> None:
    """JSON header line (spec, plan, seed, y byte length) followed by ``y`` as little-endian float32."""
    payload = params.y.astype("<f4").tobytes()
    header = {
        "spec": params.model.spec.to_dict(),
        "plan": params.plan.to_dict(),
        "seed": params.seed,
        "y_bytes": len(payload),
    }
    _write_framed(Path(path), header, payload)


def load_checkpoint(path) -> PartitionedParams:
    header, payload = _read_framed(Path(path))
    try:
        spec = ModelSpec.from_dict(header["spec"])
        plan = FreezePlan(frozenset(header["plan"]["frozen"]), bool(header["plan"]["protect_norm"]))
        seed, n_bytes = int(header["seed"]), int(header["y_bytes"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint header ({exc})") from None
    if len(payload) != n_bytes:
        raise IntegrityError(f"{path}: expected {n_bytes} bytes of y, found {len(payload)}")
    y = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    model = build_model(spec)
    blocks, warnings = plan.resolve(model)
    expected = sum(b.size for b in blocks if b.trainable)
    if y.size != expected:
        raise IntegrityError(f"{path}: y has {y.size} values, plan expects {expected}")
    return PartitionedParams(model, plan, seed, y, tuple(blocks), tuple(warnings))
