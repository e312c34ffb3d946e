"""Byte-tracked allocator used for peak-memory accounting.

Every :class:`~prge.tensor.core.Tensor` (and quantized weight block) reports its
buffer to the process-global tracker on creation and on release. Because
CPython frees objects by reference counting, the live-byte figure follows the
real lifetime of activations during a forward pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass


class AllocationError(MemoryError):
    """Raised when an allocation would exceed the configured byte budget."""


@dataclass(frozen=True)
class AllocStats:
    live_bytes: int
    peak_bytes: int
    total_allocated: int = 0
    total_freed: int = 0


class _Tracker:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0
        self.total_allocated = 0
        self.total_freed = 0
        self.limit: int | None = None

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            if self.limit is not None and self.live + nbytes > self.limit:
                raise AllocationError(
                    f"allocation of {nbytes} bytes exceeds budget "
                    f"({self.live} live, limit {self.limit})"
                )
            self.live += nbytes
            self.total_allocated += nbytes
            if self.live > self.peak:
                self.peak = self.live

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.live -= nbytes
            self.total_freed += nbytes

    def snapshot(self) -> AllocStats:
        with self._lock:
            return AllocStats(self.live, self.peak, self.total_allocated, self.total_freed)

    def reset_peak(self) -> None:
        with self._lock:
            self.peak = self.live


TRACKER = _Tracker()


def mem_reset() -> AllocStats:
    """Reset the high-water mark to the current live byte count."""
    TRACKER.reset_peak()
    return TRACKER.snapshot()


def mem_peak() -> AllocStats:
    """Return live and peak bytes since the last :func:`mem_reset`."""
    return TRACKER.snapshot()


def live_bytes() -> int:
    return TRACKER.live


@contextmanager
def mem_limit(nbytes: int | None):
    """Temporarily cap live bytes; allocations past the cap raise AllocationError."""
    prev = TRACKER.limit
    TRACKER.limit = nbytes
    try:
        yield
    finally:
        TRACKER.limit = prev
