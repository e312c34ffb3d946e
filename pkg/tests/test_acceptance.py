"""The fourteen acceptance criteria, each at its stated tolerance and time limit.

Every test prints one ``criterion N [PASS|FAIL]`` line (also collected into the
terminal summary) and asserts the same condition, runtime included.
"""

import io
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_batch
from prge.bench import BenchGrid, fo_activation_proxy, run_sweep, summarize
from prge.cli import EXIT_OK, main
from prge.model import ModelConfig, cast_model, init_model, quantize_model
from prge.oracle import FdSpec, fd_gradient, rel_l2, rge_bias_variance_experiment, stacked_estimator
from prge.parallel import (
    DualForwardState, PrgeConfig, layer_stack, master_update, prge_step_master, stacked_losses,
)
from prge.tasks import TaskSpec, generate
from prge.tensor import Tensor, derive_seed
from prge.train import TrainConfig, run_seeds, train
from prge.zo import ParamSet, SeedSource, flat_noise, mezo_step, perturb_parameters, rge_estimate


def report(num: int, title: str, passed: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = bool(passed) and elapsed < limit
    line = (f"criterion {num} [{'PASS' if ok else 'FAIL'}] {title}: {detail} "
            f"({elapsed:.1f} s, limit {limit:.0f} s)")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def max_rel(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-30)))


def warm(model, scale: float, seed: int):
    rng = np.random.default_rng(seed)
    for lin in model.lora_layers():
        lin.b.assign_(rng.normal(scale=scale, size=lin.b.shape).astype(lin.b.numpy().dtype))
    return model


def test_c01_seed_trick_restoration():
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(3):
        params = init_model(ModelConfig(), k).full_params()
        before = params.snapshot()
        for eps in (1e-3, 1e-2):
            s = derive_seed(k, 7)
            perturb_parameters(params, eps, s)
            perturb_parameters(params, -2 * eps, s)
            perturb_parameters(params, eps, s)
            worst = max(worst, max(float(np.max(np.abs(t.numpy() - b) / (1 + np.abs(b))))
                                   for t, b in zip(params.tensors, before)))
    report(1, "seed-trick restoration", worst <= 1e-5,
           f"max |drift|/(1+|theta|) {worst:.2e} <= 1e-5 on full parameters",
           time.perf_counter() - t0, 1)


def test_c02_rge_unbiased():
    t0 = time.perf_counter()
    theta = Tensor.from_numpy(np.random.default_rng(2).normal(size=10), dtype=np.float64)
    params = ParamSet([("theta", theta)])
    v = theta.numpy()
    loss = lambda: 0.5 * float(v @ v)  # noqa: E731
    src = SeedSource(2)
    n = 100_000
    mean = np.zeros(10)
    for i in range(n):
        mean += rge_estimate(loss, params, 1, 1e-3, src, step=i)
    mean /= n
    err = rel_l2(mean, v)
    report(2, "RGE unbiasedness", err <= 0.02,
           f"rel L2 of mean of {n} estimates to theta {err:.4f} <= 0.02",
           time.perf_counter() - t0, 30)


def test_c03_variance_scaling():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    model = init_model(cfg, 0)
    batch = random_batch(cfg, 1, 8, 3)
    params = model.lora_params()
    rep = rge_bias_variance_experiment(lambda: model.mean_loss(batch), params, [1, 4], 1e-2,
                                       10_000, reference=np.ones(params.d),
                                       estimator=stacked_estimator(model, batch, 1e-2, 3))
    r = rep.ratio(4)
    report(3, "variance scaling", 0.15 <= r <= 0.40,
           f"Var(q=4)/Var(q=1) {r:.4f} in [0.15, 0.40] over 1e4 repetitions",
           time.perf_counter() - t0, 60)


def test_c04_directional_derivative():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    model = cast_model(init_model(cfg, 0), np.float64)
    batch = random_batch(cfg, 16, 12, 4, ragged=False)
    params = model.lora_params()
    loss = lambda: model.mean_loss(batch)  # noqa: E731
    fd = fd_gradient(loss, params, FdSpec(h=1e-4))
    worst = 0.0
    for i in range(20):
        s = derive_seed(4, 100 + i)
        snap = params.snapshot()
        perturb_parameters(params, 1e-4, s)
        lp = loss()
        params.restore(snap)
        perturb_parameters(params, -1e-4, s)
        lm = loss()
        params.restore(snap)
        ref = flat_noise(params, s) @ fd
        worst = max(worst, abs((lp - lm) / 2e-4 - ref) / abs(ref))
    report(4, "directional-derivative consistency", params.d <= 2048 and worst <= 1e-2,
           f"d={params.d}, max rel diff over 20 z {worst:.2e} <= 1e-2",
           time.perf_counter() - t0, 300)


def test_c05_inner_loop_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    targets = ("q", "k", "v", "o", "up", "down")
    worst = 0.0
    for k in range(100):
        chosen = tuple(t for t in targets if rng.random() < 0.5) or ("q",)
        rank = int(rng.choice([1, 2, 4, 8]))
        cfg = ModelConfig(lora_rank=rank, lora_alpha=float(rank), lora_targets=chosen)
        model = warm(init_model(cfg, k), float(rng.choice([0.0, 0.05])), k)
        q = int(rng.integers(1, 5))
        batch = random_batch(cfg, int(rng.integers(1, 5)), int(rng.integers(3, 17)), k)
        eps = float(10 ** rng.uniform(-4, -1))
        seeds = SeedSource(derive_seed(5, k)).seeds(0, q)
        a = stacked_losses(model, batch, PrgeConfig(q=q, inner_parallel=True, eps=eps), seeds)
        b = stacked_losses(model, batch, PrgeConfig(q=q, inner_parallel=False, eps=eps), seeds)
        worst = max(worst, max_rel(a[0], b[0]), max_rel(a[1], b[1]))
    report(5, "inner-loop equivalence", worst <= 1e-6,
           f"max rel diff of (l+, l-) over 100 configs {worst:.2e} <= 1e-6",
           time.perf_counter() - t0, 120)


def _sequential_grads(model, batch, eps, seeds):
    """One query at a time: two single-copy forwards with a 2-D override each."""
    layers = model.lora_layers()
    out = []
    for s in seeds:
        plus = {lin.name: Tensor(layer_stack(lin.b, j, eps, [s], False, 1.0).numpy()[0])
                for j, lin in enumerate(layers)}
        minus = {lin.name: Tensor(layer_stack(lin.b, j, eps, [s], False, -1.0).numpy()[0])
                 for j, lin in enumerate(layers)}
        lp, lm = model.mean_loss(batch, plus), model.mean_loss(batch, minus)
        out.append(((lp - lm) / (2 * eps), lp, lm))
    return out


def test_c06_outer_loop_equivalence():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    eps, lr = 1e-2, 0.1
    worst_g = 0.0
    for k in range(5):
        model = warm(init_model(cfg, k), 0.05, k)
        batch = random_batch(cfg, 4, 8, 60 + k)
        seeds = SeedSource(derive_seed(6, k)).seeds(0, 4)
        lp, lm = stacked_losses(model, batch, PrgeConfig(q=4, eps=eps), seeds)
        seq = [g for g, _, _ in _sequential_grads(model, batch, eps, seeds)]
        worst_g = max(worst_g, max_rel((lp - lm) / (2 * eps), seq))
    # 10-step trajectories: stacked q=4 step vs four sequential queries plus the same update
    batch = random_batch(cfg, 4, 8, 66)
    m1, m2 = init_model(cfg, 6), init_model(cfg, 6)
    src = SeedSource(6)
    worst_t = 0.0
    for t in range(10):
        a = prge_step_master(m1, batch, PrgeConfig(q=4, batch_size=4, eps=eps, lr=lr), src, step=t)
        seq = _sequential_grads(m2, batch, eps, a.seeds)
        master_update(m2, a.seeds, [g for g, _, _ in seq], lr)
        worst_t = max(worst_t, max_rel(a.loss_plus + a.loss_minus,
                                       [x[1] for x in seq] + [x[2] for x in seq]))
    b1, b2 = m1.lora_params().flatten(), m2.lora_params().flatten()
    worst_t = max(worst_t, float(np.max(np.abs(b1 - b2) / (1e-30 + np.abs(b2).max()))))
    report(6, "outer-loop equivalence", worst_g <= 1e-6 and worst_t <= 1e-5,
           f"g_i max rel diff {worst_g:.2e} <= 1e-6; 10-step losses and B {worst_t:.2e} <= 1e-5",
           time.perf_counter() - t0, 120)


def test_c07_mode_equivalence():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    worst = 0.0
    for q in (1, 2, 4):
        batch = random_batch(cfg, 4, 8, 70 + q)
        m1, m2 = init_model(cfg, q), init_model(cfg, q)
        src = SeedSource(derive_seed(7, q))
        pc = PrgeConfig(q=q, batch_size=4, eps=1e-2, lr=0.1)
        state = DualForwardState(m2, q, 1e-2, 0.1)
        for t in range(20):
            a = prge_step_master(m1, batch, pc, src, step=t)
            b = state.step(batch, src, step=t)
            worst = max(worst, max_rel(b.loss_plus + b.loss_minus, a.loss_plus + a.loss_minus))
    report(7, "mode equivalence", worst <= 1e-5,
           f"20-step stateful vs master loss sequences, q in 1,2,4: max rel {worst:.2e} <= 1e-5",
           time.perf_counter() - t0, 120)


def test_c08_forward_economy():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    model = init_model(cfg, 0)
    batch = random_batch(cfg, 2, 6, 8)
    src = SeedSource(8)
    bad = []
    for q in (1, 2, 4):
        got = {
            "inner": prge_step_master(model, batch, PrgeConfig(q=q, lr=0.0), src).forward_count,
            "outer": prge_step_master(model, batch, PrgeConfig(q=q, inner_parallel=False, lr=0.0),
                                      src).forward_count,
            "stateful": DualForwardState(model, q, 1e-2, 0.0).step(batch, src).forward_count,
            "mezo": mezo_step(model, model.lora_params(), batch, q, 1e-2, 0.0, src).forward_count,
        }
        want = {"inner": 1, "outer": 2, "stateful": 1, "mezo": 2 * q}
        bad += [f"{k}(q={q})={got[k]}" for k in want if got[k] != want[k]]
    report(8, "forward-pass economy", not bad,
           "inner 1, outer 2, stateful 1, MeZO 2q forwards per step for q in 1,2,4"
           if not bad else "mismatch " + ", ".join(bad),
           time.perf_counter() - t0, 60)


# ------------------------------------------------------------------ learning

SEEDS = range(5)
TASK = TaskSpec(kind="majority", n_classes=2, n_train=2000, n_eval=500, min_len=3, max_len=9)


def _run(q: int, b: int, seed: int):
    data = generate(TASK)
    model = init_model(ModelConfig(), run_seeds(seed)[0])
    res = train(model, data.train, data.eval, PrgeConfig(q=q, batch_size=b, eps=1e-2, lr=0.1),
                TrainConfig(steps=2000, eval_interval=250), seed)
    return res.final_eval


@pytest.fixture(scope="module")
def learning_runs():
    out = {}
    for q, b in ((4, 4), (1, 16)):
        t0 = time.perf_counter()
        evals = [_run(q, b, s) for s in SEEDS]
        out[(q, b)] = (evals, time.perf_counter() - t0)
    return out


def test_c09_end_to_end_learning(learning_runs):
    evals, elapsed = learning_runs[(4, 4)]
    accs = [e.accuracy for e in evals]
    hits = sum(a >= 0.90 for a in accs)
    report(9, "end-to-end learning", hits >= 4,
           f"q=4 B=4 (E=16) accuracy at step 2000 {', '.join(f'{a:.3f}' for a in accs)}; "
           f"{hits}/5 seeds >= 0.90 (need 4)", elapsed, 900)


def test_c10_multi_query_trend(learning_runs):
    (e4, t4), (e1, t1) = learning_runs[(4, 4)], learning_runs[(1, 16)]
    m4 = float(np.mean([e.loss for e in e4]))
    m1 = float(np.mean([e.loss for e in e1]))
    report(10, "multi-query trend", m4 <= m1 + 0.02,
           f"mean final eval loss q=4 B=4 {m4:.4f} <= q=1 B=16 {m1:.4f} + 0.02", t4 + t1, 1800)


def test_task_is_learnable(learning_runs):
    """The majority task reaches >= 95% eval accuracy on average under the default recipe."""
    evals, _ = learning_runs[(4, 4)]
    assert np.mean([e.accuracy for e in evals]) >= 0.95


# --------------------------------------------------------------- benchmarks

def test_c11_inner_loop_speedup():
    t0 = time.perf_counter()
    grid = BenchGrid(seq_lens=(64,), batch_sizes=(1,), qs=(1,), modes=("outer", "inner"),
                     warmup=5, steps=60)
    rows = {r.config_id: r for r in summarize(run_sweep(grid))}
    outer, inner = rows["tiny-s64-b1-q1-outer-f32"], rows["tiny-s64-b1-q1-inner-f32"]
    ratio = inner.median_ms / outer.median_ms
    report(11, "inner-loop speedup", ratio <= 0.9,
           f"median step inner {inner.median_ms:.3f} ms / outer {outer.median_ms:.3f} ms = "
           f"{ratio:.3f} <= 0.9 at B=1, seq=64", time.perf_counter() - t0, 300)


def test_c12_memory_bound():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    grid = BenchGrid(seq_lens=(64, 128, 256), batch_sizes=(1, 8, 16), qs=(1,),
                     modes=("outer", "inner"), warmup=1, steps=2)
    rows = {r.config_id: r for r in summarize(run_sweep(grid))}
    worst_inner, worst_fo, bad = 0.0, 0.0, []
    for s in grid.seq_lens:
        for b in grid.batch_sizes:
            outer = rows[f"tiny-s{s}-b{b}-q1-outer-f32"].peak_bytes
            inner = rows[f"tiny-s{s}-b{b}-q1-inner-f32"].peak_bytes
            fo = fo_activation_proxy(cfg, b, s)
            worst_inner = max(worst_inner, inner / outer)
            worst_fo = max(worst_fo, outer / fo)
            if inner > 2.2 * outer or outer * 5 > fo:
                bad.append(f"s{s}b{b}")
    report(12, "memory doubling bound", not bad,
           f"seq 64,128,256 x B 1,8,16: max inner/single-pass peak {worst_inner:.3f} <= 2.2, "
           f"max ZO/FO-proxy {worst_fo:.3f} <= 0.2" + (f"; failing {bad}" if bad else ""),
           time.perf_counter() - t0, 300)


def test_c13_dequantize_once():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    model = quantize_model(init_model(cfg, 0))
    n = model.quantized_linear_count()
    batch = random_batch(cfg, 2, 8, 13)
    src = SeedSource(13)
    bad = []

    def delta(fn) -> int:
        c = model.dequant_count()
        fn()
        return model.dequant_count() - c

    for q in (1, 2, 4):
        got = {
            "inner": delta(lambda: prge_step_master(model, batch, PrgeConfig(q=q, lr=0.0), src)),
            "outer": delta(lambda: prge_step_master(
                model, batch, PrgeConfig(q=q, inner_parallel=False, lr=0.0), src)),
        }
        want = {"inner": n, "outer": 2 * n}
        bad += [f"{k}(q={q})=+{got[k]}" for k in want if got[k] != want[k]]
    mezo = delta(lambda: mezo_step(model, model.lora_params(), batch, 1, 1e-2, 0.0, src))
    if mezo != 2 * n:
        bad.append(f"mezo(q=1)=+{mezo}")
    report(13, "dequantize-once", n > 0 and not bad,
           f"{n} int8 matrices: inner +{n}, sequential +{2 * n} per step for q in 1,2,4"
           if not bad else "mismatch " + ", ".join(bad),
           time.perf_counter() - t0, 120)


# -------------------------------------------------------------- determinism

RUN_INI = """
[task]
n_train = 500
n_eval = 100
[optimizer]
mode = {mode}
optimizer = {optimizer}
q = 2
batch_size = 4
effective_batch = 8
steps = 100
eval_interval = 50
[model]
quant = {quant}
[bench]
seq_lens = 16,32
batch_sizes = 1,2
qs = 1,2
modes = outer,inner,stateful,mezo
quant = false,true
warmup = 1
steps = 3
"""

VARIANTS = [("master", "prge", "false"), ("stateful", "prge", "false"),
            ("master", "mezo", "false"), ("master", "prge", "true")]
OUTPUTS = {"train": ["train.records.jsonl", "model.ckpt"], "bench": ["bench.records.jsonl"],
           "verify": ["verify.report.txt"]}


def test_c14_determinism(tmp_path: Path):
    t0 = time.perf_counter()
    bad, n_files = [], 0
    for k, (mode, opt, quant) in enumerate(VARIANTS):
        ini = tmp_path / f"run{k}.ini"
        ini.write_text(RUN_INI.format(mode=mode, optimizer=opt, quant=quant))
        commands = ["train"] + (["bench", "verify"] if k == 0 else [])
        for cmd in commands:
            outs = []
            for rep in "ab":
                out = tmp_path / f"{cmd}{k}{rep}"
                code = main([cmd, str(ini), "--out", str(out), "--seed", "3"], io.StringIO())
                if code != EXIT_OK:
                    bad.append(f"{cmd} run{k} exit {code}")
                outs.append(out)
            for name in OUTPUTS[cmd]:
                n_files += 1
                a, b = (o / name for o in outs)
                if not (a.exists() and b.exists() and a.read_bytes() == b.read_bytes()):
                    bad.append(f"{cmd} run{k} {name}")
    report(14, "determinism", not bad,
           f"{n_files} output files byte-identical across repeated train/bench/verify runs"
           if not bad else "differs: " + ", ".join(bad),
           time.perf_counter() - t0, 300)
