"""Forward-only tensor math, tracked allocation and seeded noise."""

from .alloc import AllocStats, AllocationError, live_bytes, mem_limit, mem_peak, mem_reset
from .core import (
    DimensionError,
    Tensor,
    add,
    add_rows,
    bmm,
    causal_attention,
    cross_entropy,
    cross_entropy64,
    embedding,
    group_means,
    group_means64,
    grouped_matmul,
    linear_lora,
    matmul,
    mul,
    rms_norm,
    scale,
    silu,
    softmax,
    stack,
    sub,
    take_rows,
)
from .rng import RngStream, derive_seed, gaussian_fill, noise, splitmix64, standard_normals

__all__ = [
    "AllocStats", "AllocationError", "DimensionError", "RngStream", "Tensor",
    "add", "add_rows", "bmm", "causal_attention", "cross_entropy", "cross_entropy64", "derive_seed",
    "embedding", "gaussian_fill", "group_means", "group_means64", "grouped_matmul", "linear_lora",
    "live_bytes", "matmul", "mem_limit", "mem_peak", "mem_reset", "mul", "noise",
    "rms_norm", "scale", "silu", "softmax", "splitmix64", "stack",
    "standard_normals", "sub", "take_rows",
]
