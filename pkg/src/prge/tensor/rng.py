"""Seed-addressed Gaussian noise.

The generator is SplitMix64 used in counter mode: raw word ``n`` of the stream
keyed by ``seed`` is ``mix64(mix64(seed) + (n + 1) * 0x9E3779B97F4A7C15)``, so any
word can be produced without touching the ones before it. Uniforms take the top
53 bits shifted half a step into the open interval (0, 1).

Normal number ``n`` comes from the Box-Muller pair ``n // 2`` built from raw
words ``2*(n//2)`` and ``2*(n//2) + 1``: the cosine branch for even ``n``, the
sine branch for odd ``n``. Values are bit-identical for a given build; nothing
is promised about matching other generators.
"""

from __future__ import annotations

import math
from math import prod
from typing import Sequence

import numba as nb
import numpy as np

from .core import Tensor

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer applied to ``x + GAMMA`` (pure Python, 64-bit wrap)."""
    x = (x + GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *path: int) -> int:
    """Hash a seed and a path of integers into a new 64-bit seed."""
    h = splitmix64(seed & MASK64)
    for p in path:
        h = splitmix64(h ^ (p & MASK64))
    return h


@nb.njit(cache=True, nogil=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True, nogil=True)
def _normals(key, start, out):
    count = out.shape[0]
    gamma = np.uint64(0x9E3779B97F4A7C15)
    inv53 = 1.0 / 9007199254740992.0
    two_pi = 2.0 * math.pi
    pair = start // 2
    i = 0
    while i < count:
        w1 = _mix(key + np.uint64(2 * pair + 1) * gamma)
        w2 = _mix(key + np.uint64(2 * pair + 2) * gamma)
        u1 = (np.float64(w1 >> np.uint64(11)) + 0.5) * inv53
        u2 = (np.float64(w2 >> np.uint64(11)) + 0.5) * inv53
        rad = math.sqrt(-2.0 * math.log(u1))
        ang = two_pi * u2
        n = 2 * pair
        if n >= start:
            out[i] = rad * math.cos(ang)
            i += 1
        if i < count:
            out[i] = rad * math.sin(ang)
            i += 1
        pair += 1


def _key(seed: int) -> np.uint64:
    # mix64 of the seed, computed like splitmix64 minus the gamma step
    x = seed & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return np.uint64(x ^ (x >> 31))


def standard_normals(seed: int, start: int, count: int) -> np.ndarray:
    """Normals ``start .. start+count-1`` of the stream keyed by ``seed`` (float64)."""
    out = np.empty(max(count, 0), dtype=np.float64)
    if count > 0:
        _normals(_key(seed), start, out)
    return out


class RngStream:
    """Single-owner Gaussian source; ``counter`` counts normals drawn so far."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & MASK64
        self.counter = counter

    def normals(self, count: int) -> np.ndarray:
        out = standard_normals(self.seed, self.counter, count)
        self.counter += count
        return out

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def gaussian_fill(stream: RngStream, shape: Sequence[int]) -> Tensor:
    n = prod(shape)
    return Tensor(stream.normals(n).astype(np.float32).reshape(tuple(shape)))


def noise(seed: int, shape: Sequence[int]) -> Tensor:
    """Standard-normal tensor drawn from the start of a fresh stream at ``seed``."""
    return gaussian_fill(RngStream(seed), shape)
