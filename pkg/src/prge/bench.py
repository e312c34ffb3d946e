"""Per-step runtime and memory measurement over a grid of configurations.

Each cell builds a seeded model and a fixed batch, runs ``warmup`` untimed
steps, then ``steps`` timed ones. For every step it records the wall time, the
peak of tracked live bytes above the bytes live at step start (model weights
and optimizer state are therefore excluded), the forward and dequantization
counts and the loss pairs.

Output is split so that reruns can be compared byte for byte:

* ``<name>.records.jsonl`` holds every deterministic field;
* ``<name>.timing.jsonl`` holds ``wall_ms`` keyed by ``(config_id, step)``;
* ``<name>.summary.tsv`` holds per-cell medians and inner-loop speedups.

Every file starts with a schema header line.
"""

from __future__ import annotations

import itertools
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .model import Batch, Model, ModelConfig, init_model, quantize_model
from .parallel import DualForwardState, PrgeConfig, prge_step_master
from .tensor import AllocationError, derive_seed, live_bytes, mem_limit, mem_peak, mem_reset
from .zo import SeedSource, ZoStep, mezo_step

SCHEMA_VERSION = 1
BENCH_MODES = ("mezo", "outer", "inner", "stateful")

MODEL_PRESETS = {
    "tiny": ModelConfig(),
    "small": ModelConfig(n_layers=4, d_model=128, n_heads=4, d_ff=256),
}


def fo_activation_proxy(config: ModelConfig, rows: int, seq: int, itemsize: int = 4) -> int:
    """Bytes a backprop step would keep for the backward pass (analytic, not run).

    Per position and block the stored outputs are: two RMS norms, q, k, v,
    attention output, o, two residual sums and down (``10 d``); up and SiLU
    (``2 d_ff``); the attention probabilities (``n_heads * seq``); and the
    rank-``r`` adapter products ``x A`` (``r`` per adapted projection). The
    embedding sum adds ``d`` per position.
    """
    c = config
    per_pos = (10 * c.d_model + 2 * c.d_ff + c.n_heads * seq
               + c.lora_rank * len(c.lora_targets))
    return itemsize * rows * seq * (c.n_layers * per_pos + c.d_model)


@dataclass(frozen=True)
class BenchCell:
    model: str = "tiny"
    seq_len: int = 64
    batch_size: int = 1
    q: int = 1
    mode: str = "inner"
    quant: bool = False

    def __post_init__(self):
        if self.model not in MODEL_PRESETS:
            raise ConfigError(f"unknown model preset {self.model!r}")
        if self.mode not in BENCH_MODES:
            raise ConfigError(f"bench mode must be one of {BENCH_MODES}")
        if self.seq_len < 1 or self.batch_size < 1 or self.q < 1:
            raise ConfigError("seq_len, batch_size and q must be >= 1")
        if self.seq_len > MODEL_PRESETS[self.model].max_seq_len:
            raise ConfigError("seq_len exceeds the preset's max_seq_len")

    @property
    def config_id(self) -> str:
        return (f"{self.model}-s{self.seq_len}-b{self.batch_size}-q{self.q}-{self.mode}"
                f"-{'int8' if self.quant else 'f32'}")

    @property
    def match_key(self) -> tuple:
        return (self.model, self.seq_len, self.batch_size, self.q, self.quant)


@dataclass
class BenchGrid:
    models: Sequence[str] = ("tiny",)
    seq_lens: Sequence[int] = (64,)
    batch_sizes: Sequence[int] = (1,)
    qs: Sequence[int] = (1,)
    modes: Sequence[str] = ("outer", "inner")
    quant: Sequence[bool] = (False,)
    warmup: int = 3
    steps: int = 20
    eps: float = 1e-2
    lr: float = 1e-2
    seed: int = 0
    mem_limit_bytes: int | None = None

    def cells(self) -> list[BenchCell]:
        out = [BenchCell(m, s, b, q, mode, qu) for m, s, b, q, mode, qu in
               itertools.product(self.models, self.seq_lens, self.batch_sizes, self.qs,
                                 self.modes, self.quant)]
        if not out:
            raise ConfigError("empty benchmark grid")
        return out


@dataclass
class BenchRecord:
    config_id: str
    step: int
    wall_ms: float
    peak_bytes: int
    padding_fraction: float
    forward_count: int
    dequant_count: int
    loss_plus: list[float] = field(default_factory=list)
    loss_minus: list[float] = field(default_factory=list)
    status: str = "ok"


RECORD_FIELDS = [f.name for f in fields(BenchRecord) if f.name != "wall_ms"]
TIMING_FIELDS = ["config_id", "step", "wall_ms"]


def bench_batch(config: ModelConfig, rows: int, seq: int, seed: int) -> Batch:
    """Full-length random token batch (no padding) for timing."""
    rng = np.random.default_rng(seed)
    tok = rng.integers(1, config.vocab_size, size=(rows, seq))
    return Batch(tok, np.ones((rows, seq), dtype=bool), np.full(rows, seq - 1),
                 rng.integers(1, config.vocab_size, size=rows))


class _Stepper:
    def __init__(self, cell: BenchCell, model: Model, eps: float, lr: float, seed: int):
        self.cell = cell
        self.model = model
        self.seeds = SeedSource(seed)
        self.t = 0
        inner = cell.mode in ("inner", "stateful")
        self.cfg = PrgeConfig(q=cell.q, batch_size=1, inner_parallel=inner,
                              mode="stateful" if cell.mode == "stateful" else "master",
                              eps=eps, lr=lr)
        self.state = (DualForwardState(model, cell.q, eps, lr)
                      if cell.mode == "stateful" else None)
        self.params = model.lora_params() if cell.mode == "mezo" else None

    def __call__(self, batch: Batch) -> ZoStep:
        t, self.t = self.t, self.t + 1
        if self.cell.mode == "mezo":
            return mezo_step(self.model, self.params, batch, self.cell.q, self.cfg.eps,
                             self.cfg.lr, self.seeds, step=t)
        if self.state is not None:
            return self.state.step(batch, self.seeds, step=t)
        return prge_step_master(self.model, batch, self.cfg, self.seeds, step=t)


def measure_step(stepper: _Stepper, batch: Batch, config_id: str, step: int) -> BenchRecord:
    model = stepper.model
    dq0 = model.dequant_count()
    base = live_bytes()
    mem_reset()
    t0 = time.perf_counter()
    rec = stepper(batch)
    wall = (time.perf_counter() - t0) * 1e3
    peak = mem_peak().peak_bytes - base
    return BenchRecord(config_id, step, max(wall, 1e-6), int(peak), batch.padding_fraction,
                       rec.forward_count, model.dequant_count() - dq0,
                       list(rec.loss_plus), list(rec.loss_minus))


def run_cell(cell: BenchCell, grid: BenchGrid) -> list[BenchRecord]:
    cfg = MODEL_PRESETS[cell.model]
    model = init_model(cfg, derive_seed(grid.seed, 0))
    if cell.quant:
        quantize_model(model)
    batch = bench_batch(cfg, cell.batch_size, cell.seq_len, derive_seed(grid.seed, 1))
    stepper = _Stepper(cell, model, grid.eps, grid.lr, derive_seed(grid.seed, 2))
    out = []
    for i in range(grid.warmup + grid.steps):
        rec = measure_step(stepper, batch, cell.config_id, i - grid.warmup)
        if i >= grid.warmup:
            out.append(rec)
    return out


def run_sweep(grid: BenchGrid, cells: Iterable[BenchCell] | None = None) -> list[BenchRecord]:
    """Run every cell in order. A cell that exceeds ``mem_limit_bytes`` yields one failed record."""
    if grid.steps < 1 or grid.warmup < 0:
        raise ConfigError("need steps >= 1 and warmup >= 0")
    records: list[BenchRecord] = []
    for cell in (grid.cells() if cells is None else list(cells)):
        try:
            if grid.mem_limit_bytes is None:
                records.extend(run_cell(cell, grid))
            else:
                with mem_limit(grid.mem_limit_bytes):
                    records.extend(run_cell(cell, grid))
        except AllocationError:
            records.append(BenchRecord(cell.config_id, -1, 1e-6, 0, 0.0, 0, 0,
                                       status="failed: allocation limit"))
    return records


# -------------------------------------------------------------------- output


@dataclass
class CellSummary:
    config_id: str
    n_steps: int
    median_ms: float
    peak_bytes: int
    forward_count: int
    dequant_count: int
    status: str
    speedup: float | None = None  # outer median / this cell's median, inner modes only


def parse_config_id(config_id: str) -> BenchCell:
    model, s, b, q, mode, prec = config_id.split("-")
    return BenchCell(model, int(s[1:]), int(b[1:]), int(q[1:]), mode, prec == "int8")


def summarize(records: Sequence[BenchRecord]) -> list[CellSummary]:
    groups: dict[str, list[BenchRecord]] = {}
    for r in records:
        groups.setdefault(r.config_id, []).append(r)
    rows = []
    for cid, recs in groups.items():
        ok = [r for r in recs if r.status == "ok"]
        if not ok:
            rows.append(CellSummary(cid, 0, float("nan"), 0, 0, 0, recs[0].status))
            continue
        rows.append(CellSummary(
            cid, len(ok), statistics.median(r.wall_ms for r in ok),
            max(r.peak_bytes for r in ok), ok[0].forward_count, ok[0].dequant_count, "ok"))
    outer = {}
    for row in rows:
        cell = parse_config_id(row.config_id)
        if cell.mode == "outer" and row.status == "ok":
            outer[cell.match_key] = row.median_ms
    for row in rows:
        cell = parse_config_id(row.config_id)
        if cell.mode in ("inner", "stateful") and cell.match_key in outer and row.status == "ok":
            row.speedup = outer[cell.match_key] / row.median_ms
    return rows


class SinkError(OSError):
    """The output location cannot be written."""


def _header(kind: str, names: list[str]) -> str:
    return json.dumps({"schema": f"prge.bench.{kind}", "version": SCHEMA_VERSION,
                       "fields": names}) + "\n"


def emit(records: Sequence[BenchRecord], sink: str | Path, name: str = "bench") -> dict[str, Path]:
    """Write records, timing and summary files under directory ``sink``."""
    sink = Path(sink)
    paths = {"records": sink / f"{name}.records.jsonl",
             "timing": sink / f"{name}.timing.jsonl",
             "summary": sink / f"{name}.summary.tsv"}
    try:
        sink.mkdir(parents=True, exist_ok=True)
        with paths["records"].open("w", encoding="utf-8", newline="\n") as f:
            f.write(_header("records", RECORD_FIELDS))
            for r in records:
                d = asdict(r)
                f.write(json.dumps({k: d[k] for k in RECORD_FIELDS}) + "\n")
        with paths["timing"].open("w", encoding="utf-8", newline="\n") as f:
            f.write(_header("timing", TIMING_FIELDS))
            for r in records:
                f.write(json.dumps({"config_id": r.config_id, "step": r.step,
                                    "wall_ms": r.wall_ms}) + "\n")
        with paths["summary"].open("w", encoding="utf-8", newline="\n") as f:
            f.write(f"# prge.bench.summary version {SCHEMA_VERSION}\n")
            f.write(format_summary(summarize(records)))
    except OSError as e:
        raise SinkError(f"cannot write benchmark output to {sink}: {e}") from e
    return paths


SUMMARY_COLUMNS = ["config_id", "n_steps", "median_ms", "peak_bytes", "forward_count",
                   "dequant_count", "speedup", "status"]


def format_summary(rows: Sequence[CellSummary]) -> str:
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for r in rows:
        sp = "" if r.speedup is None else f"{r.speedup:.4f}"
        lines.append("\t".join([r.config_id, str(r.n_steps), f"{r.median_ms:.4f}",
                                str(r.peak_bytes), str(r.forward_count), str(r.dequant_count),
                                sp, r.status]))
    return "\n".join(lines) + "\n"


def _read_jsonl(path: Path, kind: str) -> list[dict]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: missing header")
    head = json.loads(lines[0])
    if head.get("schema") != f"prge.bench.{kind}" or head.get("version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unexpected header {head}")
    return [json.loads(ln) for ln in lines[1:]]


def load(sink: str | Path, name: str = "bench") -> list[BenchRecord]:
    """Parse files written by :func:`emit` back into records."""
    sink = Path(sink)
    recs = _read_jsonl(sink / f"{name}.records.jsonl", "records")
    timing = {(t["config_id"], t["step"]): t["wall_ms"]
              for t in _read_jsonl(sink / f"{name}.timing.jsonl", "timing")}
    return [BenchRecord(wall_ms=timing[(d["config_id"], d["step"])], **d) for d in recs]


__all__ = [
    "BENCH_MODES", "BenchCell", "BenchGrid", "BenchRecord", "CellSummary", "MODEL_PRESETS",
    "SinkError", "bench_batch", "emit", "fo_activation_proxy", "format_summary", "load",
    "measure_step", "parse_config_id", "run_cell", "run_sweep", "summarize",
]
