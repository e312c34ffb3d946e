"""Weight-only symmetric int8 quantization for frozen matrices.

Each output channel (column) ``j`` gets ``scale_j = max|W[:, j]| / 127`` and
values are stored as ``round(W / scale)``. A channel that is entirely zero
uses ``scale = 1``. Dequantization materializes a transient float32 tensor and
bumps a counter so benchmarks can see how many times it happened.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import Tensor, linear_lora
from .tensor.alloc import TRACKER


class QuantTensor:
    __slots__ = ("values", "scales", "dequant_count", "_lock", "_nbytes", "__weakref__")

    def __init__(self, values: np.ndarray, scales: np.ndarray):
        if values.dtype != np.int8 or values.ndim != 2:
            raise TypeError("values must be a 2-d int8 array")
        if scales.shape != (values.shape[1],) or not np.all(scales > 0):
            raise ValueError("need one positive scale per output channel")
        self.values = np.ascontiguousarray(values)
        self.scales = np.ascontiguousarray(scales, dtype=np.float32)
        self._nbytes = self.values.nbytes + self.scales.nbytes
        TRACKER.alloc(self._nbytes)
        self._lock = threading.Lock()
        self.dequant_count = 0

    def __del__(self):
        nbytes = getattr(self, "_nbytes", 0)
        if nbytes:
            TRACKER.free(nbytes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def nbytes(self) -> int:
        return self._nbytes

    def dequantize(self) -> Tensor:
        with self._lock:
            self.dequant_count += 1
        return Tensor(self.values.astype(np.float32) * self.scales)


def quantize(w: Tensor | np.ndarray) -> QuantTensor:
    arr = w.numpy() if isinstance(w, Tensor) else np.asarray(w, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError("quantize expects a 2-d matrix")
    if not np.all(np.isfinite(arr)):
        raise NumericError("cannot quantize non-finite weights")
    amax = np.abs(arr).max(axis=0)
    scales = np.where(amax > 0, amax / np.float32(127.0), np.float32(1.0)).astype(np.float32)
    q = np.clip(np.rint(arr / scales), -127, 127).astype(np.int8)
    return QuantTensor(q, scales)


def dequant_matmul(x: Tensor, qw: QuantTensor) -> Tensor:
    """``x @ dequantize(qw)``; the float weight is freed before returning."""
    if len(x.shape) != 2 or x.shape[1] != qw.shape[0]:
        raise DimensionError(f"dequant_matmul {x.shape} x {qw.shape}")
    w = qw.dequantize()
    return linear_lora(x, w)
