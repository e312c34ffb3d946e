"""Fast invariant suites behind ``prge verify``.

Each check returns a :class:`CheckResult` with a deterministic one-line
detail, so two runs with the same config print identical reports. Sizes are
small enough to finish in well under a minute; the full-size versions live in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import Batch, ModelConfig, cast_model, init_model, quantize_model
from .oracle import FdSpec, fd_gradient, rel_l2, rge_bias_variance_experiment, stacked_estimator
from .parallel import DualForwardState, PrgeConfig, prge_step_master, stacked_losses
from .tensor import Tensor, derive_seed
from .zo import ParamSet, SeedSource, flat_noise, mezo_step, perturb_parameters, rge_estimate


@dataclass
class CheckResult:
    module: str
    invariant: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.module}/{self.invariant}: {self.detail}"


def _random_batch(cfg: ModelConfig, rows: int, seq: int, seed: int) -> Batch:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(max(1, seq // 2), seq + 1, size=rows)
    ids = np.zeros((rows, seq), dtype=np.int64)
    mask = np.zeros((rows, seq), dtype=bool)
    for r, n in enumerate(lengths):
        ids[r, :n] = rng.integers(1, cfg.vocab_size, size=n)
        mask[r, :n] = True
    return Batch(ids, mask, lengths - 1, rng.integers(1, cfg.vocab_size, size=rows))


def _rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-30)))


def check_seed_trick(cfg: ModelConfig, seed: int, eps: float) -> CheckResult:
    model = init_model(cfg, seed)
    params = model.full_params()
    before = params.snapshot()
    s = derive_seed(seed, 99)
    perturb_parameters(params, eps, s)
    perturb_parameters(params, -2 * eps, s)
    perturb_parameters(params, eps, s)
    worst = max(float(np.max(np.abs(t.numpy() - b) / (1 + np.abs(b))))
                for t, b in zip(params.tensors, before))
    return CheckResult("zo-core", "seed-trick-restoration", worst <= 1e-5,
                       f"max drift/(1+|theta|) = {worst:.3e} (limit 1e-05)")


def check_unbiased(seed: int, n: int = 20000) -> CheckResult:
    theta = Tensor.from_numpy(np.random.default_rng(seed).normal(size=10), dtype=np.float64)
    params = ParamSet([("theta", theta)])

    def loss():
        v = theta.numpy()
        return 0.5 * float(v @ v)

    src = SeedSource(seed)
    mean = np.zeros(10)
    for i in range(n):
        mean += rge_estimate(loss, params, 1, 1e-3, src, step=i)
    mean /= n
    err = rel_l2(mean, theta.numpy())
    limit = 3.0 * np.sqrt(11.0 / n)
    return CheckResult("zo-core", "rge-unbiased", err <= limit,
                       f"rel L2 of mean to gradient = {err:.4f} at n={n} (limit {limit:.4f})")


def check_variance(cfg: ModelConfig, seed: int, n: int = 2000) -> CheckResult:
    model = init_model(cfg, seed)
    batch = _random_batch(cfg, 1, 8, derive_seed(seed, 5))
    params = model.lora_params()
    rep = rge_bias_variance_experiment(lambda: model.mean_loss(batch), params, [1, 4], 1e-2, n,
                                       reference=np.ones(params.d),
                                       estimator=stacked_estimator(model, batch, 1e-2, seed))
    r = rep.ratio(4)
    return CheckResult("zo-core", "variance-scaling", 0.15 <= r <= 0.40,
                       f"var(q=4)/var(q=1) = {r:.4f} (band [0.15, 0.40])")


def check_inner_equivalence(cfg: ModelConfig, seed: int, eps: float,
                            fault: str = "none") -> CheckResult:
    worst = 0.0
    for k in range(5):
        model = init_model(cfg, derive_seed(seed, 10 + k))
        batch = _random_batch(cfg, 1 + k % 3, 6 + k, derive_seed(seed, 20 + k))
        q = 1 + k % 3
        seeds = SeedSource(derive_seed(seed, 30 + k)).seeds(0, q)
        inner_eps = eps * 1.01 if fault == "wrong_eps" else eps
        a = stacked_losses(model, batch, PrgeConfig(q=q, inner_parallel=True, eps=inner_eps), seeds)
        b = stacked_losses(model, batch, PrgeConfig(q=q, inner_parallel=False, eps=eps), seeds)
        worst = max(worst, _rel(a[0], b[0]), _rel(a[1], b[1]))
    return CheckResult("prge", "inner-loop-equivalence", worst <= 1e-6,
                       f"max rel diff of (l+, l-) = {worst:.3e} (limit 1e-06)")


def check_outer_equivalence(cfg: ModelConfig, seed: int, eps: float) -> CheckResult:
    model = init_model(cfg, seed)
    batch = _random_batch(cfg, 2, 8, derive_seed(seed, 40))
    seeds = SeedSource(derive_seed(seed, 41)).seeds(0, 4)
    lp, lm = stacked_losses(model, batch, PrgeConfig(q=4, inner_parallel=True, eps=eps), seeds)
    g_par = (lp - lm) / (2 * eps)
    g_seq = []
    for s in seeds:
        p1, m1 = stacked_losses(model, batch, PrgeConfig(q=1, inner_parallel=False, eps=eps), [s])
        g_seq.append((p1[0] - m1[0]) / (2 * eps))
    r = _rel(g_par, g_seq)
    return CheckResult("prge", "outer-loop-equivalence", r <= 1e-6,
                       f"max rel diff of g_i = {r:.3e} (limit 1e-06)")


def check_mode_equivalence(cfg: ModelConfig, seed: int, eps: float, lr: float) -> CheckResult:
    worst = 0.0
    for q in (1, 2):
        batch = _random_batch(cfg, 2, 8, derive_seed(seed, 50 + q))
        src = SeedSource(derive_seed(seed, 60 + q))
        m1 = init_model(cfg, seed)
        m2 = init_model(cfg, seed)
        pc = PrgeConfig(q=q, batch_size=2, eps=eps, lr=lr)
        st = DualForwardState(m2, q, eps, lr)
        for t in range(10):
            a = prge_step_master(m1, batch, pc, src, step=t)
            b = st.step(batch, src, step=t)
            worst = max(worst, _rel(b.loss_plus + b.loss_minus, a.loss_plus + a.loss_minus))
    return CheckResult("prge", "mode-equivalence", worst <= 1e-5,
                       f"max rel diff of stateful vs master losses = {worst:.3e} (limit 1e-05)")


def check_forward_economy(cfg: ModelConfig, seed: int, eps: float) -> CheckResult:
    model = init_model(cfg, seed)
    batch = _random_batch(cfg, 2, 6, derive_seed(seed, 70))
    src = SeedSource(seed)
    got = {}
    for q in (1, 3):
        got[("inner", q)] = prge_step_master(model, batch, PrgeConfig(q=q, eps=eps, lr=0.0),
                                             src).forward_count
        got[("outer", q)] = prge_step_master(
            model, batch, PrgeConfig(q=q, inner_parallel=False, eps=eps, lr=0.0), src).forward_count
        got[("mezo", q)] = mezo_step(model, model.lora_params(), batch, q, eps, 0.0, src).forward_count
    want = {("inner", q): 1 for q in (1, 3)}
    want.update({("outer", q): 2 for q in (1, 3)})
    want.update({("mezo", q): 2 * q for q in (1, 3)})
    ok = got == want
    detail = " ".join(f"{k[0]}(q={k[1]})={v}" for k, v in sorted(got.items()))
    return CheckResult("prge", "forward-economy", ok, detail)


def check_dequant_once(cfg: ModelConfig, seed: int, eps: float) -> CheckResult:
    model = quantize_model(init_model(cfg, seed))
    n = model.quantized_linear_count()
    batch = _random_batch(cfg, 2, 6, derive_seed(seed, 80))
    c0 = model.dequant_count()
    prge_step_master(model, batch, PrgeConfig(q=2, eps=eps, lr=0.0), SeedSource(seed))
    c1 = model.dequant_count()
    prge_step_master(model, batch, PrgeConfig(q=2, inner_parallel=False, eps=eps, lr=0.0),
                     SeedSource(seed))
    c2 = model.dequant_count()
    ok = (c1 - c0 == n) and (c2 - c1 == 2 * n)
    return CheckResult("quant", "dequantize-once", ok,
                       f"inner +{c1 - c0}, sequential +{c2 - c1} for {n} quantized matrices")


def check_b0_transparency(cfg: ModelConfig, seed: int) -> CheckResult:
    model = init_model(cfg, seed)
    batch = _random_batch(cfg, 3, 7, derive_seed(seed, 90))
    a = model.forward_loss(batch).numpy().copy()
    rng = np.random.default_rng(seed)
    for lin in model.lora_layers():
        lin.a.assign_(rng.normal(size=lin.a.shape).astype(np.float32))
    b = model.forward_loss(batch).numpy()
    return CheckResult("model-core", "b0-transparency", bool(np.array_equal(a, b)),
                       "loss unchanged bitwise after redrawing A" if np.array_equal(a, b)
                       else "loss changed when A was redrawn with B = 0")


def check_directional(cfg: ModelConfig, seed: int) -> CheckResult:
    small = ModelConfig(**{**cfg.to_dict(), "lora_targets": ("q",), "lora_rank": 1})
    model = cast_model(init_model(small, seed), np.float64)
    batch = _random_batch(small, 2, 6, derive_seed(seed, 95))
    params = model.lora_params()
    loss = lambda: model.mean_loss(batch)  # noqa: E731
    fd = fd_gradient(loss, params, FdSpec(h=1e-4))
    worst = 0.0
    for i in range(5):
        s = derive_seed(seed, 200 + i)
        snap = params.snapshot()
        perturb_parameters(params, 1e-4, s)
        lp = loss()
        params.restore(snap)
        perturb_parameters(params, -1e-4, s)
        lm = loss()
        params.restore(snap)
        ref = flat_noise(params, s) @ fd
        worst = max(worst, abs((lp - lm) / 2e-4 - ref) / abs(ref))
    return CheckResult("grad-oracle", "directional-derivative", worst <= 1e-2,
                       f"max rel diff (l+ - l-)/(2 eps) vs z.fd = {worst:.3e} over 5 z (limit 1e-02)")


def run_all(cfg: ModelConfig, seed: int = 0, eps: float = 1e-2, lr: float = 0.1,
            fault: str = "none") -> list[CheckResult]:
    suites: list[Callable[[], CheckResult]] = [
        lambda: check_seed_trick(cfg, seed, 1e-3),
        lambda: check_unbiased(seed),
        lambda: check_variance(cfg, seed),
        lambda: check_b0_transparency(cfg, seed),
        lambda: check_inner_equivalence(cfg, seed, eps, fault),
        lambda: check_outer_equivalence(cfg, seed, eps),
        lambda: check_mode_equivalence(cfg, seed, eps, lr),
        lambda: check_forward_economy(cfg, seed, eps),
        lambda: check_dequant_once(cfg, seed, eps),
        lambda: check_directional(cfg, seed),
    ]
    return [s() for s in suites]


def format_report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"


__all__ = ["CheckResult", "format_report", "run_all"]
