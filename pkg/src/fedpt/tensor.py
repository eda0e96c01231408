"""Minimal dense tensors with tape-based reverse-mode differentiation.

Only the layers the federated models need are provided: affine, same-padded
conv2d (NHWC, cross-correlation), 2x2 max-pool, group norm, relu, reshape and
softmax cross-entropy. A tape node is recorded only when some input requires a
gradient, and each node keeps just the forward values its backward pass will
actually use: a layer whose weights are frozen does not retain its input.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError, UsageError
from .memory import track

_default_dtype = np.float32


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in 64-bit precision (for gradient checks)."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.float64
    try:
        yield
    finally:
        _default_dtype = previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype))
        _check_finite(arr, name or "tensor construction")
        self.data = track(arr)
        self.requires_grad = requires_grad
        self.name = name
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward, **saved) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = track(data)
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = None
    if out.requires_grad:
        for v in saved.values():
            if isinstance(v, np.ndarray):
                track(v)
        out.node = TapeNode(op, inputs, backward, saved)
    return out


# --- elementary ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(data, "reshape", (x,), lambda g: (g.reshape(orig),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _result(out, "relu", (x,), lambda g: (g * mask,), mask=mask)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    a_saved = a.data if b.requires_grad else None
    b_saved = b.data if a.requires_grad else None

    def backward(g):
        ga = g @ b_saved.T if a.requires_grad else None
        gb = a_saved.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), backward, a=a_saved, b=b_saved)


# --- layers ---------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x[batch, in]``, ``w[in, out]``, ``b[out]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(f"affine expects 2-D x, 2-D w, 1-D b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    # the input is only needed for the weight gradient
    x_saved = x.data if w.requires_grad else None
    w_saved = w.data if x.requires_grad else None

    def backward(g):
        gx = g @ w_saved.T if x.requires_grad else None
        gw = x_saved.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    out = x.data @ w.data + b.data
    return _result(out, "affine", (x, w, b), backward, x=x_saved, w=w_saved)


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    # [b, h, w, cin, kh, kw] -> [b*h*w, cin*kh*kw]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    b, _, _, cin = xp.shape
    return windows[:, :h, :w].reshape(b * h * w, cin * kh * kw)


def conv2d(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' zero-padded cross-correlation, ``x[b,h,w,cin]``, ``k[kh,kw,cin,cout]``."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel; got {x.shape}, {k.shape}")
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, h, w)
    kmat = k.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = (cols @ kmat + bias.data).reshape(b, h, w, cout)
    cols_saved = cols if k.requires_grad else None
    kmat_saved = kmat if x.requires_grad else None
    del xp

    def backward(g):
        g2 = g.reshape(b * h * w, cout)
        gx = gk = gb = None
        if k.requires_grad:
            gk = (cols_saved.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ kmat_saved.T).reshape(b, h, w, cin, kh, kw)
            gxp = np.zeros((b, h + kh - 1, w + kw - 1, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + h, j : j + w, :] += gcols[..., i, j]
            gx = gxp[:, ph : ph + h, pw : pw + w, :]
        return gx, gk, gb

    return _result(out, "conv2d", (x, k, bias), backward, cols=cols_saved, kmat=kmat_saved)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2. Ties route the gradient to the first element in row-major order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects [b,h,w,c], got {x.shape}")
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    idx_saved = idx if x.requires_grad else None

    def backward(g):
        gwin = np.zeros((b, h // 2, w // 2, c, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx_saved[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, h, w, c)
        return (gx,)

    return _result(out, "maxpool2d", (x,), backward, idx=idx_saved)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group standardization over all non-batch axes, then ``gamma*x + beta``."""
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: scale/shift must have shape ({c},)")
    shape = x.shape
    b = shape[0]
    xg = x.data.reshape(b, -1, groups, c // groups)
    n = xg.shape[1] * xg.shape[3]
    mean = xg.mean(axis=(1, 3), keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=(1, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(shape).astype(x.dtype)
    out = xhat * gamma.data + beta.data
    need_x = x.requires_grad
    xhat_saved = xhat if (need_x or gamma.requires_grad) else None
    gamma_saved = gamma.data if need_x else None
    inv_saved = inv_std if need_x else None
    red = tuple(range(len(shape) - 1))

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat_saved).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if need_x:
            dxhat = (g * gamma_saved).reshape(b, -1, groups, c // groups)
            xh = xhat_saved.reshape(dxhat.shape)
            s1 = dxhat.sum(axis=(1, 3), keepdims=True)
            s2 = (dxhat * xh).sum(axis=(1, 3), keepdims=True)
            gx = (inv_saved / n * (n * dxhat - s1 - xh * s2)).reshape(shape).astype(g.dtype)
        return gx, gg, gb

    return _result(out, "group_norm", (x, gamma, beta), backward, xhat=xhat_saved, inv_std=inv_saved)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got {logits.shape}")
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(bsz)
    loss = np.asarray((logsumexp - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(z - logsumexp[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / bsz),)

    return _result(loss, "softmax_cross_entropy", (logits,), backward)


# --- backward -------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf tensor with ``requires_grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            leaves[t] = track(g)
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {t.node.op}")
            prev = grads.get(id(parent))
            grads[id(parent)] = track(pg if prev is None else prev + pg)
    return leaves
