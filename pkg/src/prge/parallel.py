"""Parallelized randomized gradient estimation over LoRA-FA adapters.

Queries run side by side instead of one after another. The batch is tiled into
contiguous row groups and every adapter receives a stack of B copies, one per
group, so a single forward produces all the losses of a step:

* outer loop: ``q`` copies ``B + eps z_i`` (and a second pass with ``B - eps z_i``);
* inner loop: ``2q`` copies, group ``2i`` is ``B + eps z_i`` and ``2i + 1`` is
  ``B - eps z_i`` (query outer, sign inner).

Adapter ``j`` (position in ``model.lora_layers()``) draws ``z_i`` from
``derive_seed(seed_i, j)``, the same stream :func:`prge.zo.perturb_parameters`
uses for tensor ``j`` of ``model.lora_params()``.

Two ways of keeping the weights:

* master mode holds one B per adapter, builds stacks on the fly inside the
  forward and applies ``B -= (lr/q) sum_i g_i z_i`` after the losses are known;
* stateful mode keeps the ``2q`` perturbed copies between steps. Each forward
  first removes last step's perturbation, applies last step's update and adds
  the new noise, so the update of step ``t`` lands at the start of step ``t+1``.
  :func:`finalize` applies the pending update and returns clean weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .model import Batch, Linear, Model, copy_losses, row_losses
from .tensor import Tensor
from .zo import (
    Seeds,
    ZoStep,
    check_finite,
    projected_gradient,
    resolve_seeds,
    tensor_noise,
)

MODES = ("master", "stateful")


@dataclass
class PrgeConfig:
    q: int = 1
    batch_size: int = 16
    inner_parallel: bool = True
    mode: str = "master"
    eps: float = 1e-2
    lr: float = 1e-2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.q < 1:
            raise ConfigError("q must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode == "stateful" and not self.inner_parallel:
            raise ConfigError("stateful mode requires inner_parallel")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")

    @property
    def effective_batch(self) -> int:
        return self.q * self.batch_size

    @property
    def groups(self) -> int:
        return 2 * self.q if self.inner_parallel else self.q

    @property
    def rows_in_flight(self) -> int:
        return self.groups * self.batch_size


def _layer_index(model: Model) -> dict[int, int]:
    return {id(lin): j for j, lin in enumerate(model.lora_layers())}


def layer_stack(b: Tensor, j: int, eps: float, seeds: Sequence[int], inner: bool,
                sign: float = 1.0) -> Tensor:
    """Stack of perturbed copies of one adapter's master ``b`` (adapter index ``j``).

    With ``inner`` the stack has ``2q`` slices ``B + eps z_i, B - eps z_i``;
    otherwise ``q`` slices ``B + sign * eps z_i``.
    """
    base = b.numpy()
    dt = base.dtype.type
    g = len(seeds) * (2 if inner else 1)
    out = np.empty((g,) + base.shape, dtype=base.dtype)
    for i, s in enumerate(seeds):
        ez = dt(eps) * tensor_noise(s, j, base.shape).numpy()
        if inner:
            out[2 * i] = base + ez
            out[2 * i + 1] = base - ez
        elif sign > 0:
            out[i] = base + ez
        else:
            out[i] = base - ez
    return Tensor(out)


def build_stack(masters: Sequence[Tensor], q: int, eps: float, seeds: Sequence[int],
                inner_parallel: bool) -> list[Tensor]:
    """Materialize every adapter's stack at once (the forward builds them lazily)."""
    if len(seeds) != q:
        raise ConfigError(f"need {q} seeds, got {len(seeds)}")
    return [layer_stack(b, j, eps, seeds, inner_parallel) for j, b in enumerate(masters)]


def _group_losses(model: Model, batch: Batch, groups: int, override) -> np.ndarray:
    per_row = row_losses(model, batch.duplicate(groups), override)
    return copy_losses(per_row, groups)


def _finish(rec: ZoStep, lp: np.ndarray, lm: np.ndarray) -> None:
    for i in range(rec.q):
        a = check_finite(float(lp[i]), "loss l+")
        b = check_finite(float(lm[i]), "loss l-")
        rec.loss_plus.append(a)
        rec.loss_minus.append(b)
        rec.projected_grads.append(projected_gradient(a, b, rec.eps))


def stacked_losses(model: Model, batch: Batch, cfg: PrgeConfig,
                   seeds: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """(l+, l-) for every query from stacked forwards around the master B."""
    index = _layer_index(model)
    q = len(seeds)
    if cfg.inner_parallel:
        def both(layer: Linear) -> Tensor:
            return layer_stack(layer.b, index[id(layer)], cfg.eps, seeds, True)

        losses = _group_losses(model, batch, 2 * q, both)
        return losses[0::2], losses[1::2]

    def plus(layer: Linear) -> Tensor:
        return layer_stack(layer.b, index[id(layer)], cfg.eps, seeds, False, 1.0)

    def minus(layer: Linear) -> Tensor:
        return layer_stack(layer.b, index[id(layer)], cfg.eps, seeds, False, -1.0)

    return _group_losses(model, batch, q, plus), _group_losses(model, batch, q, minus)


def master_update(model: Model, seeds: Sequence[int], grads: Sequence[float],
                  lr: float) -> None:
    """``B -= (lr/q) g_i z_i`` for each query in order, on every adapter."""
    q = len(seeds)
    for s, g in zip(seeds, grads):
        coef = -(lr / q) * g
        if coef == 0.0:
            continue
        for j, lin in enumerate(model.lora_layers()):
            lin.b.add_(tensor_noise(s, j, lin.b.shape), coef)


def prge_step_master(model: Model, batch: Batch, cfg: PrgeConfig, seeds: Seeds,
                     step: int = 0) -> ZoStep:
    """One master-copy step: 1 forward with the inner loop, 2 without."""
    cfg.validate()
    seeds = resolve_seeds(seeds, step, cfg.q)
    rec = ZoStep(step=step, eps=cfg.eps, seeds=seeds)
    start = model.forward_count
    lp, lm = stacked_losses(model, batch, cfg, seeds)
    _finish(rec, lp, lm)
    master_update(model, seeds, rec.projected_grads, cfg.lr)
    rec.forward_count = model.forward_count - start
    return rec


# ------------------------------------------------------------- stateful mode


def aggregate_projected_grads(grads: Sequence[float], lr: float) -> np.ndarray:
    """Per-pair update coefficients ``(lr/q) g_j``, shared by every adapter."""
    g = np.asarray(grads, dtype=np.float64)
    return (lr / len(g)) * g if len(g) else g


def pending_update(stack: np.ndarray, coefs: np.ndarray, eps: float) -> np.ndarray:
    """``sum_j coefs_j * diff_j / eps`` where ``diff_j`` is half of pair ``j``'s gap."""
    dt = stack.dtype.type
    upd = np.zeros(stack.shape[1:], dtype=stack.dtype)
    for j, c in enumerate(coefs):
        diff = (stack[2 * j] - stack[2 * j + 1]) / dt(2)
        upd += dt(c) * (diff / dt(eps))
    return upd


def dual_forward_update(stack: Tensor, coefs: np.ndarray, eps: float,
                        noises: Sequence[np.ndarray]) -> None:
    """Advance a ``(2q, r, k_out)`` copy stack in place for one forward.

    For each pair: ``diff = (B[2j] - B[2j+1]) / 2``; ``B[2j] -= diff + update``
    then ``+= eps z_j``; ``B[2j+1] += diff - update - eps z_j``. ``update`` is
    the aggregated deferred update of the previous step.
    """
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    arr = stack.numpy()
    pairs = arr.shape[0] // 2
    if arr.shape[0] != 2 * pairs or len(noises) != pairs or len(coefs) not in (0, pairs):
        raise DimensionError("stack, noise and gradient counts disagree")
    dt = arr.dtype.type
    upd = pending_update(arr, coefs, eps)
    new = np.empty_like(arr)
    for j, zs in enumerate(noises):
        z = dt(eps) * zs
        diff = (arr[2 * j] - arr[2 * j + 1]) / dt(2)
        new[2 * j] = arr[2 * j] - diff - upd + z
        new[2 * j + 1] = arr[2 * j + 1] + diff - upd - z
    stack.assign_(new)


def dual_forward_step(layer: Linear, stack: Tensor, x: Tensor, g_prev: Sequence[float],
                      lr: float, eps: float, noises: Sequence[np.ndarray]) -> Tensor:
    """Stateful dual-forwarding adapter: update the copies, then run the layer."""
    dual_forward_update(stack, aggregate_projected_grads(g_prev, lr), eps, noises)
    return layer(x, stack)


@dataclass
class StepContext:
    """What every adapter needs during one stateful forward."""

    seeds: list[int]
    coefs: np.ndarray
    eps: float


class DualForwardState:
    """The ``2q`` persistent copies of every adapter's B plus the pending gradient."""

    def __init__(self, model: Model, q: int, eps: float, lr: float):
        if not eps > 0:
            raise ConfigError("eps must be > 0")
        self.model = model
        self.q = q
        self.eps = eps
        self.lr = lr
        self.layers = model.lora_layers()
        self.stacks = [Tensor(np.repeat(lin.b.numpy()[None], 2 * q, axis=0))
                       for lin in self.layers]
        self._index = {id(lin): j for j, lin in enumerate(self.layers)}
        self.g_prev: list[float] = [0.0] * q
        self.steps = 0

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for s in self.stacks)

    def override(self, ctx: StepContext):
        def advance(layer: Linear) -> Tensor:
            j = self._index[id(layer)]
            st = self.stacks[j]
            noises = [tensor_noise(s, j, layer.b.shape).numpy() for s in ctx.seeds]
            dual_forward_update(st, ctx.coefs, ctx.eps, noises)
            return st
        return advance

    def step(self, batch: Batch, seeds: Seeds, step: int = 0) -> ZoStep:
        seeds = resolve_seeds(seeds, step, self.q)
        rec = ZoStep(step=step, eps=self.eps, seeds=seeds)
        ctx = StepContext(seeds, aggregate_projected_grads(self.g_prev, self.lr), self.eps)
        start = self.model.forward_count
        losses = _group_losses(self.model, batch, 2 * self.q, self.override(ctx))
        _finish(rec, losses[0::2], losses[1::2])
        self.g_prev = list(rec.projected_grads)
        self.steps += 1
        rec.forward_count = self.model.forward_count - start
        return rec

    def midpoints(self) -> list[np.ndarray]:
        """Per-adapter midpoint of pair 0 (every pair shares it up to rounding)."""
        return [(s.numpy()[0] + s.numpy()[1]) / 2 for s in self.stacks]


def finalize(state: DualForwardState, g_last: Sequence[float] | None = None) -> dict[str, Tensor]:
    """Apply the pending update and write clean master B into the model.

    ``master = midpoint - (lr/q) sum_j g_j diff_j / eps`` using pair 0's
    midpoint. Returns the master tensors keyed by adapter name.
    """
    if state.steps < 1:
        raise ConfigError("finalize needs at least one step")
    g = state.g_prev if g_last is None else list(g_last)
    coefs = aggregate_projected_grads(g, state.lr)
    out = {}
    for lin, st in zip(state.layers, state.stacks):
        arr = st.numpy()
        dt = arr.dtype.type
        diff0 = (arr[0] - arr[1]) / dt(2)
        mid = arr[0] - diff0
        lin.b.assign_(mid - pending_update(arr, coefs, state.eps))
        out[lin.name] = lin.b
    return out


# ---------------------------------------------------------------- trainers


@dataclass
class Trainer:
    """Runs steps of one optimizer flavour with seeds ``derive_seed(run_seed, step, i)``.

    ``kind`` is ``mezo`` (sequential reference path), ``master`` or ``stateful``.
    """

    model: Model
    cfg: PrgeConfig
    seed_source: Seeds
    kind: str = "master"
    state: DualForwardState | None = field(default=None, init=False)
    steps: int = field(default=0, init=False)

    def __post_init__(self):
        if self.kind not in ("mezo", "master", "stateful"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.kind == "stateful":
            if not self.cfg.inner_parallel:
                raise ConfigError("stateful mode requires inner_parallel")
            self.state = DualForwardState(self.model, self.cfg.q, self.cfg.eps, self.cfg.lr)

    def step(self, batch: Batch) -> ZoStep:
        from .zo import mezo_step

        t = self.steps
        if self.kind == "mezo":
            rec = mezo_step(self.model, self.model.lora_params(), batch, self.cfg.q,
                            self.cfg.eps, self.cfg.lr, self.seed_source, step=t)
        elif self.kind == "master":
            rec = prge_step_master(self.model, batch, self.cfg, self.seed_source, step=t)
        else:
            rec = self.state.step(batch, self.seed_source, step=t)
        self.steps += 1
        return rec

    def finalize(self) -> None:
        """Make the model's master B current (a no-op outside stateful mode)."""
        if self.state is not None and self.state.steps:
            finalize(self.state)


__all__ = [
    "DualForwardState", "MODES", "PrgeConfig", "StepContext", "Trainer",
    "aggregate_projected_grads", "build_stack", "dual_forward_step", "dual_forward_update",
    "finalize", "layer_stack", "master_update", "pending_update", "prge_step_master",
    "stacked_losses",
]
