"""Dense row-major float tensors and the forward-only ops built on them.

float32 is the working precision. float64 tensors are accepted so that
finite-difference oracles can run the same ops free of float32 rounding noise;
an op's output takes the dtype of its inputs and mixing the two is an error.
"""

from __future__ import annotations

from math import prod
from typing import Sequence

import numpy as np

from . import kernels
from .alloc import TRACKER


_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """Owns one contiguous float buffer whose bytes are reported to the tracker.

    Tensors produced by ops are treated as immutable. Parameter tensors are the
    exception: the optimizers update them in place through :meth:`add_` and
    :meth:`assign_`.
    """

    __slots__ = ("_data", "_nbytes", "__weakref__")

    def __init__(self, data: np.ndarray):
        # takes ownership; callers hand over freshly allocated arrays only
        if data.dtype not in _DTYPES or not data.flags.c_contiguous:
            raise TypeError("Tensor buffers must be C-contiguous float32 or float64")
        if data.ndim == 0 or any(d < 1 for d in data.shape):
            raise DimensionError(f"invalid shape {data.shape}")
        TRACKER.alloc(data.nbytes)
        self._nbytes = data.nbytes
        self._data = data

    def __del__(self):
        nbytes = getattr(self, "_nbytes", 0)
        if nbytes:
            TRACKER.free(nbytes)

    @classmethod
    def empty(cls, shape: Sequence[int], dtype=np.float32) -> "Tensor":
        return cls(np.empty(tuple(shape), dtype=dtype))

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float32) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype))

    @classmethod
    def from_numpy(cls, arr, dtype=np.float32) -> "Tensor":
        return cls(np.array(arr, dtype=dtype, order="C", copy=True))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def nbytes(self) -> int:
        return self._nbytes

    def numpy(self) -> np.ndarray:
        """Read-only view of the buffer. Copy it if it must outlive the tensor."""
        view = self._data.view()
        view.flags.writeable = False
        return view

    def copy(self) -> "Tensor":
        return Tensor(self._data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data.astype(dtype))

    def reshape(self, *shape: int) -> "Tensor":
        if prod(shape) != self.size:
            raise DimensionError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(self._data.reshape(shape).copy())

    def tolist(self):
        return self._data.tolist()

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    # in-place updates, parameters only
    def add_(self, other: "Tensor | np.ndarray", alpha: float = 1.0) -> None:
        src = other._data if isinstance(other, Tensor) else other
        if src.shape != self.shape:
            raise DimensionError(f"add_ shape {src.shape} vs {self.shape}")
        if alpha == 1.0:
            self._data += src
        else:
            self._data += self._data.dtype.type(alpha) * src

    def assign_(self, other: "Tensor | np.ndarray") -> None:
        src = other._data if isinstance(other, Tensor) else other
        if src.shape != self.shape:
            raise DimensionError(f"assign_ shape {src.shape} vs {self.shape}")
        self._data[...] = src

    def set_flat(self, index: int, value: float) -> None:
        self._data.reshape(-1)[index] = value

    def get_flat(self, index: int) -> float:
        return float(self._data.reshape(-1)[index])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _raw(t: Tensor) -> np.ndarray:
    return t._data


def _dtype(*ts: Tensor) -> np.dtype:
    dt = ts[0]._data.dtype
    for t in ts[1:]:
        if t._data.dtype != dt:
            raise TypeError(f"mixed tensor dtypes {dt} and {t._data.dtype}")
    return dt


# ---------------------------------------------------------------- reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=_dtype(a, b))
    np.matmul(_raw(a), _raw(b), out=out)
    return Tensor(out)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 3 or len(b.shape) != 3:
        raise DimensionError(f"bmm needs 3-d operands, got {a.shape} x {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=_dtype(a, b))
    np.matmul(_raw(a), _raw(b), out=out)
    return Tensor(out)


def grouped_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Split the rows of ``a`` into ``g`` contiguous groups and multiply group i by ``b[i]``.

    Equivalent to ``bmm(a.reshape(g, m // g, k), b).reshape(m, n)`` without the copies.
    """
    m, k = a.shape
    g, k2, n = b.shape
    if k != k2 or m % g:
        raise DimensionError(f"grouped_matmul {a.shape} x {b.shape}")
    out = np.empty((m, n), dtype=_dtype(a, b))
    np.matmul(_raw(a).reshape(g, m // g, k), _raw(b), out=out.reshape(g, m // g, n))
    return Tensor(out)


def linear_lora(x: Tensor, w: Tensor, xa: Tensor | None = None,
                b: Tensor | None = None, scale: float = 1.0) -> Tensor:
    """``x @ w + scale * grouped_matmul(xa, b)`` written into one output buffer.

    ``b`` is ``(g, r, n)`` or a single ``(r, n)`` matrix. The frozen product
    runs as one matmul over every row, whatever the number of groups.
    """
    rows, k = x.shape
    if len(w.shape) != 2 or w.shape[0] != k:
        raise DimensionError(f"linear {x.shape} x {w.shape}")
    n = w.shape[1]
    dt = _dtype(x, w)
    out = np.empty((rows, n), dtype=dt)
    if b is not None:
        braw = _raw(b) if len(b.shape) == 3 else _raw(b)[None]
        g, r, n2 = braw.shape
        if xa is None or xa.shape != (rows, r) or n2 != n or rows % g:
            raise DimensionError(
                f"lora branch xa={None if xa is None else xa.shape} b={b.shape} rows={rows}"
            )
        _dtype(x, xa, b)
    np.matmul(_raw(x), _raw(w), out=out)
    if b is None:
        return Tensor(out)
    res = Tensor(out)
    low = Tensor.empty((rows, n), dtype=dt)  # tracked scratch for the adapter branch
    lo = _raw(low)
    np.matmul(_raw(xa).reshape(g, rows // g, r), braw, out=lo.reshape(g, rows // g, n))
    np.multiply(lo, dt.type(scale), out=lo)
    np.add(out, lo, out=out)
    return res


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    if len(x.shape) != 2:
        raise DimensionError("rms_norm expects (rows, features)")
    out = np.empty(x.shape, dtype=x.dtype)
    kernels.rms_norm(_raw(x), float(eps), out)
    return Tensor(out)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension."""
    arr = _raw(x).reshape(-1, x.shape[-1])
    out = np.empty(arr.shape, dtype=x.dtype)
    kernels.softmax_rows(arr, out)
    return Tensor(out.reshape(x.shape))


def silu(x: Tensor) -> Tensor:
    # x / (1 + exp(-x)) evaluated in place in the output buffer
    src = _raw(x)
    out = np.negative(src)
    np.exp(out, out=out)
    out += out.dtype.type(1)
    np.divide(src, out, out=out)
    return Tensor(out)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_rows: int, seq: int,
                     n_heads: int) -> Tensor:
    """Multi-head causal self-attention over ``n_rows`` sequences of length ``seq``.

    Inputs are flattened ``(n_rows * seq, d_model)``; heads are contiguous column blocks.
    """
    if not (q.shape == k.shape == v.shape) or q.shape[0] != n_rows * seq:
        raise DimensionError(f"attention shapes {q.shape} {k.shape} {v.shape}")
    if q.shape[1] % n_heads:
        raise DimensionError("d_model not divisible by n_heads")
    out = np.empty(q.shape, dtype=_dtype(q, k, v))
    kernels.causal_attention(_raw(q), _raw(k), _raw(v), n_rows, seq, n_heads, out)
    return Tensor(out)


def cross_entropy64(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy over the full last dimension, kept in float64.

    Loss values are scalars that feed difference quotients, so they skip the
    rounding to the tensor dtype.
    """
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if len(logits.shape) != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise DimensionError("label id outside vocabulary")
    out = np.empty(logits.shape[0], dtype=np.float64)
    kernels.cross_entropy(_raw(logits), labels, out)
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy over the full last dimension."""
    return Tensor(cross_entropy64(logits, labels).astype(logits.dtype))


def group_means64(x: np.ndarray, groups: int) -> np.ndarray:
    """Means of ``groups`` contiguous equal blocks, summed in index order in float64."""
    x = np.ascontiguousarray(x)
    if x.ndim != 1 or groups < 1 or x.shape[0] % groups:
        raise DimensionError(f"cannot split {x.shape} into {groups} groups")
    out = np.empty(groups, dtype=np.float64)
    kernels.row_means(x, groups, out)
    return out


def group_means(x: Tensor, groups: int) -> Tensor:
    return Tensor(group_means64(_raw(x), groups).astype(x.dtype))


# ---------------------------------------------------------------- elementwise


def _same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name} {a.shape} vs {b.shape}")
    _dtype(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "add")
    return Tensor(np.add(_raw(a), _raw(b)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "sub")
    return Tensor(np.subtract(_raw(a), _raw(b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "mul")
    return Tensor(np.multiply(_raw(a), _raw(b)))


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(np.multiply(_raw(a), a.dtype.type(s)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by a flat integer index array."""
    ids = np.asarray(ids).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("token id outside embedding table")
    return Tensor(np.ascontiguousarray(_raw(table)[ids]))


def add_rows(x: Tensor, table: Tensor, ids: np.ndarray) -> Tensor:
    """``x + table[ids]``, where ``ids`` holds one table row per row of ``x``."""
    ids = np.asarray(ids).reshape(-1)
    if ids.shape[0] != x.shape[0] or table.shape[1] != x.shape[1]:
        raise DimensionError("add_rows shape mismatch")
    _dtype(x, table)
    return Tensor(np.add(_raw(x), _raw(table)[ids]))


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(_raw(x)[np.asarray(rows)]))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    _dtype(*tensors)
    return Tensor(np.stack([_raw(t) for t in tensors]))
