"""Simulation-level allocation accounting.

Counts bytes of live numpy buffers created while a tracker is active and keeps
the high-water mark. Views are charged to their root buffer once. This is a
model of tensor memory, not a process RSS measurement.
"""

from __future__ import annotations

import contextvars
import weakref

import numpy as np

_active: contextvars.ContextVar["AllocationTracker | None"] = contextvars.ContextVar(
    "fedpt_alloc_tracker", default=None
)


class AllocationTracker:
    def __init__(self):
        self.live = 0
        self.peak = 0
        self._sizes: dict[int, int] = {}
        self._token = None

    def track(self, arr: np.ndarray) -> None:
        root = arr
        while isinstance(root.base, np.ndarray):
            root = root.base
        key = id(root)
        if key in self._sizes:
            return
        size = int(root.nbytes)
        self._sizes[key] = size
        self.live += size
        self.peak = max(self.peak, self.live)
        weakref.finalize(root, self._release, key)

    def _release(self, key: int) -> None:
        size = self._sizes.pop(key, 0)
        self.live -= size

    def __enter__(self) -> "AllocationTracker":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None


def track(arr):
    tracker = _active.get()
    if tracker is not None and isinstance(arr, np.ndarray):
        tracker.track(arr)
    return arr
