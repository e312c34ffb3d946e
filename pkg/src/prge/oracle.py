"""Brute-force gradient references for checking the zeroth-order estimators.

:func:`fd_gradient` perturbs one coordinate at a time and evaluates the loss
twice per coordinate. It takes the step it actually achieved after storing
``theta +- h`` in the tensor's dtype, so float32 parameters do not bias the
quotient. For the tiny model the losses still carry float32 activation
rounding; run the model through :func:`prge.model.cast_model` to float64 when
per-coordinate changes are near that noise floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor, derive_seed
from .zo import ParamSet, SeedSource, rge_estimate

LossFn = Callable[[], float]
Estimator = Callable[[int, int], np.ndarray]  # (q, repetition) -> flat estimate


@dataclass
class FdSpec:
    h: float = 1e-4
    subset: Sequence[str] | None = None  # parameter names; None means all
    central: bool = True

    def validate(self, params: ParamSet) -> None:
        if not self.h > 0:
            raise ConfigError("finite-difference step must be > 0")
        if self.subset is not None:
            if not self.subset:
                raise ConfigError("empty parameter subset")
            missing = set(self.subset) - set(params.names)
            if missing:
                raise ConfigError(f"unknown parameters {sorted(missing)}")


def _finite(v: float) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise NumericError(f"non-finite loss {v}")
    return v


def fd_gradient(loss_fn: LossFn, params: ParamSet, spec: FdSpec | None = None) -> np.ndarray:
    """Coordinate-wise difference quotients over the selected tensors, in set order."""
    spec = spec or FdSpec()
    spec.validate(params)
    names = set(params.names if spec.subset is None else spec.subset)
    base = _finite(loss_fn())
    out = []
    for name, t in params:
        if name not in names:
            continue
        g = np.empty(t.size)
        for k in range(t.size):
            v = t.get_flat(k)
            try:
                t.set_flat(k, v + spec.h)
                hp = t.get_flat(k)
                lp = _finite(loss_fn())
                if spec.central:
                    t.set_flat(k, v - spec.h)
                    hm = t.get_flat(k)
                    lm = _finite(loss_fn())
                else:
                    hm, lm = v, base
            finally:
                t.set_flat(k, v)
            g[k] = (lp - lm) / (hp - hm)
        out.append(g)
    return np.concatenate(out)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def rel_l2(a: np.ndarray, ref: np.ndarray) -> float:
    return float(np.linalg.norm(a - ref) / np.linalg.norm(ref))


@dataclass
class QueryStats:
    q: int
    n_samples: int
    mean: np.ndarray
    variance: np.ndarray  # per component, unbiased
    cosine: float
    rel_error: float

    @property
    def mean_variance(self) -> float:
        return float(self.variance.mean())


@dataclass
class VarianceReport:
    d: int
    eps: float
    reference: np.ndarray
    rows: dict[int, QueryStats] = field(default_factory=dict)

    def ratio(self, q: int, base: int = 1) -> float:
        return self.rows[q].mean_variance / self.rows[base].mean_variance

    def table(self) -> str:
        lines = [f"{'q':>4} {'n':>8} {'cosine':>9} {'rel_l2':>9} {'mean_var':>12} {'var_ratio':>10}"]
        base = min(self.rows)
        for q in sorted(self.rows):
            r = self.rows[q]
            lines.append(f"{q:>4} {r.n_samples:>8} {r.cosine:>9.5f} {r.rel_error:>9.5f} "
                         f"{r.mean_variance:>12.6g} {self.ratio(q, base):>10.5f}")
        return "\n".join(lines)


def rge_bias_variance_experiment(loss_fn: LossFn, params: ParamSet, q_list: Sequence[int],
                                 eps: float, n_samples: int, seed: int = 0,
                                 reference: np.ndarray | None = None,
                                 estimator: Estimator | None = None) -> VarianceReport:
    """Empirical mean, cosine to the reference gradient and per-component variance per q.

    ``reference`` defaults to :func:`fd_gradient`. ``estimator(q, rep)`` may
    replace the sequential :func:`prge.zo.rge_estimate` (for instance with a
    stacked forward); repetitions use independent seed schedules per q.
    """
    if n_samples < 1000:
        raise ConfigError("n_samples must be >= 1000")
    if reference is None:
        reference = fd_gradient(loss_fn, params)
    if estimator is None:
        def estimator(q: int, rep: int) -> np.ndarray:
            src = SeedSource(derive_seed(seed, q))
            return rge_estimate(loss_fn, params, q, eps, src, step=rep)
    report = VarianceReport(d=params.d, eps=eps, reference=np.asarray(reference, float))
    for q in q_list:
        mean = np.zeros(params.d)
        m2 = np.zeros(params.d)
        for n in range(1, n_samples + 1):
            x = estimator(q, n - 1)
            delta = x - mean
            mean += delta / n
            m2 += delta * (x - mean)
        report.rows[q] = QueryStats(q, n_samples, mean, m2 / (n_samples - 1),
                                    cosine(mean, report.reference),
                                    rel_l2(mean, report.reference))
    return report


def stacked_estimator(model, batch, eps: float, seed: int = 0) -> Estimator:
    """Estimator running all queries of a repetition in one inner+outer forward.

    Directions are drawn once per repetition and shared between the stacked
    copies and the returned estimate.
    """
    from .model import copy_losses, row_losses
    from .zo import tensor_noise

    layers = model.lora_layers()

    def est(q: int, rep: int) -> np.ndarray:
        seeds = SeedSource(derive_seed(seed, q)).seeds(rep, q)
        zs = [[tensor_noise(s, j, lin.b.shape).numpy() for j, lin in enumerate(layers)]
              for s in seeds]
        stacks = {}
        for j, lin in enumerate(layers):
            base = lin.b.numpy()
            st = np.empty((2 * q,) + base.shape, dtype=base.dtype)
            for i in range(q):
                ez = base.dtype.type(eps) * zs[i][j]
                st[2 * i] = base + ez
                st[2 * i + 1] = base - ez
            stacks[lin.name] = Tensor(st)
        losses = copy_losses(row_losses(model, batch.duplicate(2 * q), stacks), 2 * q)
        if not np.all(np.isfinite(losses)):
            raise NumericError("non-finite loss in stacked estimate")
        g = (losses[0::2] - losses[1::2]) / (2.0 * eps)
        out = np.zeros(sum(lin.b.size for lin in layers))
        for gi, z in zip(g, zs):
            out += gi * np.concatenate([zj.reshape(-1) for zj in z])
        return out / q

    return est


__all__ = [
    "FdSpec", "QueryStats", "VarianceReport", "cosine", "fd_gradient", "rel_l2",
    "rge_bias_variance_experiment", "stacked_estimator",
]
