"""Client and server optimizers over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

KINDS = ("sgd", "sgdm", "adam")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; choose from {KINDS}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")


def make_optimizer(kind: str, lr: float, size: int, momentum: float = 0.9) -> OptimizerState:
    state = OptimizerState(kind, lr, momentum=momentum)
    if kind in ("sgdm", "adam"):
        state.m = np.zeros(size, dtype=np.float32)
    if kind == "adam":
        state.v = np.zeros(size, dtype=np.float32)
    return state


def _check(params: np.ndarray, grad: np.ndarray) -> None:
    if params.shape != grad.shape:
        raise DimensionError(f"params {params.shape} and grad {grad.shape} differ")


def sgd_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    _check(params, grad)
    state.t += 1
    return params - state.lr * grad


def sgdm_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Heavy-ball momentum: ``m = momentum*m + g``, ``p -= lr*m``."""
    _check(params, grad)
    if state.m is None:
        state.m = np.zeros_like(params)
    state.t += 1
    state.m = state.momentum * state.m + grad
    return params - state.lr * state.m


def adam_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    _check(params, grad)
    if state.m is None:
        state.m = np.zeros_like(params)
    if state.v is None:
        state.v = np.zeros_like(params)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return (params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)


_STEPS = {"sgd": sgd_step, "sgdm": sgdm_step, "adam": adam_step}


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return _STEPS[state.kind](state, params, grad)
