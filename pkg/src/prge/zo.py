"""Randomized gradient estimation and the seed-trick ZO-SGD step.

A query perturbs every trainable tensor along a Gaussian direction ``z``,
measures the loss on both sides and turns the difference into a scalar
projected gradient ``g = (l+ - l-) / (2 eps)``. Directions are never stored:
tensor ``j`` of a :class:`ParamSet` always draws its noise from the stream at
``derive_seed(seed, j)``, so replaying a seed reproduces the same ``z``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor, derive_seed, noise


class ParamSet:
    """Ordered, named references to trainable tensors (updated in place)."""

    def __init__(self, items: Iterable[tuple[str, Tensor]]):
        self._items = list(items)
        names = [n for n, _ in self._items]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        if not self._items:
            raise ValueError("empty parameter set")

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, name: str) -> Tensor:
        for n, t in self._items:
            if n == name:
                return t
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self._items]

    @property
    def tensors(self) -> list[Tensor]:
        return [t for _, t in self._items]

    @property
    def d(self) -> int:
        return sum(t.size for _, t in self._items)

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.numpy().reshape(-1) for _, t in self._items]).astype(np.float64)

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.shape != (self.d,):
            raise DimensionError(f"flat vector of length {vec.shape} for d={self.d}")
        off = 0
        for _, t in self._items:
            t.assign_(vec[off:off + t.size].astype(np.float32).reshape(t.shape))
            off += t.size

    def snapshot(self) -> list[np.ndarray]:
        return [t.numpy().copy() for _, t in self._items]

    def restore(self, snap: Sequence[np.ndarray]) -> None:
        for (_, t), arr in zip(self._items, snap):
            t.assign_(arr)


class SeedSource:
    """Per-query seeds ``derive_seed(run_seed, step, i)``."""

    def __init__(self, run_seed: int):
        self.run_seed = int(run_seed)

    def seed(self, step: int, i: int) -> int:
        return derive_seed(self.run_seed, step, i)

    def seeds(self, step: int, q: int) -> list[int]:
        return [self.seed(step, i) for i in range(q)]


Seeds = Union[SeedSource, Sequence[int]]


def resolve_seeds(source: Seeds, step: int, q: int) -> list[int]:
    if isinstance(source, SeedSource):
        return source.seeds(step, q)
    seeds = [int(s) for s in source]
    if len(seeds) != q:
        raise ConfigError(f"need {q} seeds, got {len(seeds)}")
    return seeds


def tensor_noise(seed: int, index: int, shape: Sequence[int]) -> Tensor:
    """Direction for the ``index``-th tensor of a parameter set under query ``seed``."""
    return noise(derive_seed(seed, index), shape)


def perturb_parameters(params: ParamSet, scale: float, seed: int) -> None:
    """``theta_j += scale * z_j`` for every tensor, with ``z_j`` regenerated from ``seed``."""
    if scale == 0.0:
        return
    for j, (_, t) in enumerate(params):
        t.add_(tensor_noise(seed, j, t.shape), scale)


@dataclass
class ZoStep:
    step: int
    eps: float
    seeds: list[int] = field(default_factory=list)
    projected_grads: list[float] = field(default_factory=list)
    loss_plus: list[float] = field(default_factory=list)
    loss_minus: list[float] = field(default_factory=list)
    forward_count: int = 0

    @property
    def q(self) -> int:
        return len(self.seeds)

    @property
    def loss(self) -> float:
        """Average of all l+ and l- values (a proxy for the loss at theta)."""
        return float(np.mean(self.loss_plus + self.loss_minus))

    def to_dict(self) -> dict:
        return asdict(self)


def projected_gradient(loss_plus: float, loss_minus: float, eps: float) -> float:
    return (loss_plus - loss_minus) / (2.0 * eps)


def check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return value


def apply_update(params: ParamSet, seeds: Sequence[int], grads: Sequence[float],
                 lr: float) -> None:
    """ZO-SGD update ``theta -= (lr / q) * sum_i g_i z_i`` replayed seed by seed."""
    q = len(seeds)
    for s, g in zip(seeds, grads):
        perturb_parameters(params, -(lr / q) * g, s)


LossFn = Callable[[], float]


def _loss_closure(model, batch) -> tuple[LossFn, Callable[[], int]]:
    if hasattr(model, "mean_loss"):
        return (lambda: model.mean_loss(batch)), (lambda: model.forward_count)
    counter = [0]

    def fn() -> float:
        counter[0] += 1
        return float(model(batch))

    return fn, (lambda: counter[0])


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise ConfigError("eps must be > 0")


def mezo_step(model, params: ParamSet, batch, q: int, eps: float, lr: float,
              seed_source: Seeds, step: int = 0) -> ZoStep:
    """One MeZO step with ``q`` sequential queries on a single batch (2q forwards).

    ``model`` is a :class:`~prge.model.Model` or any callable ``f(batch) -> float``
    reading the tensors in ``params``. On a non-finite loss the parameters are
    returned to their entry values before :class:`NumericError` propagates.
    """
    _check_eps(eps)
    if q < 1:
        raise ConfigError("q must be >= 1")
    loss, count = _loss_closure(model, batch)
    seeds = resolve_seeds(seed_source, step, q)
    rec = ZoStep(step=step, eps=eps, seeds=seeds)
    start = count()
    for s in seeds:
        perturb_parameters(params, eps, s)
        try:
            lp = check_finite(loss(), "loss l+")
        except NumericError:
            perturb_parameters(params, -eps, s)
            raise
        perturb_parameters(params, -2.0 * eps, s)
        try:
            lm = check_finite(loss(), "loss l-")
        finally:
            perturb_parameters(params, eps, s)
        rec.loss_plus.append(lp)
        rec.loss_minus.append(lm)
        rec.projected_grads.append(projected_gradient(lp, lm, eps))
    apply_update(params, seeds, rec.projected_grads, lr)
    rec.forward_count = count() - start
    return rec


def flat_noise(params: ParamSet, seed: int) -> np.ndarray:
    """The concatenated direction ``z`` of query ``seed`` as float64."""
    return np.concatenate([tensor_noise(seed, j, t.shape).numpy().reshape(-1)
                           for j, (_, t) in enumerate(params)]).astype(np.float64)


def rge_estimate(loss_fn: LossFn, params: ParamSet, q: int, eps: float,
                 seed_source: Seeds, step: int = 0) -> np.ndarray:
    """``(1/q) sum_i g_i z_i`` as a flat float64 vector; theta is restored exactly."""
    _check_eps(eps)
    if q < 1:
        raise ConfigError("q must be >= 1")
    seeds = resolve_seeds(seed_source, step, q)
    snap = params.snapshot()
    est = np.zeros(params.d)
    try:
        for s in seeds:
            zs = [tensor_noise(s, j, t.shape) for j, (_, t) in enumerate(params)]
            for (_, t), z in zip(params, zs):
                t.add_(z, eps)
            lp = check_finite(float(loss_fn()), "loss l+")
            for (_, t), z in zip(params, zs):
                t.add_(z, -2.0 * eps)
            lm = check_finite(float(loss_fn()), "loss l-")
            params.restore(snap)
            g = projected_gradient(lp, lm, eps)
            est += g * np.concatenate([z.numpy().reshape(-1) for z in zs]).astype(np.float64)
    finally:
        params.restore(snap)
    return est / q


__all__ = [
    "ParamSet", "SeedSource", "ZoStep", "apply_update", "check_finite", "flat_noise",
    "mezo_step", "perturb_parameters", "projected_gradient", "resolve_seeds", "rge_estimate",
    "tensor_noise",
]
