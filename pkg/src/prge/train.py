"""Training loop and evaluation shared by the CLI and the acceptance checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .model import Model, label_logits
from .parallel import PrgeConfig, Trainer
from .tasks import Dataset, batches, train_stream
from .tensor import cross_entropy64, derive_seed, live_bytes, mem_peak, mem_reset
from .zo import SeedSource, ZoStep

OPTIMIZERS = ("prge", "mezo")


@dataclass
class TrainConfig:
    steps: int = 2000
    eval_interval: int = 100
    optimizer: str = "prge"
    eval_batch_size: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eval_interval < 1 or self.eval_batch_size < 1:
            raise ConfigError("eval_interval and eval_batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class EvalResult:
    step: int
    loss: float
    accuracy: float


def evaluate(model: Model, dataset: Dataset, batch_size: int = 100, step: int = 0) -> EvalResult:
    """Mean label cross-entropy and accuracy (argmax over the task's label tokens)."""
    cand = dataset.spec.label_tokens
    losses, hits = [], 0
    for b in batches(dataset, batch_size, max_seq_len=model.config.max_seq_len):
        logits = label_logits(model, b)
        losses.append(cross_entropy64(logits, b.label_ids))
        pred = cand[logits.numpy()[:, cand].argmax(axis=1)]
        hits += int((pred == b.label_ids).sum())
    return EvalResult(step, float(np.concatenate(losses).mean()), hits / len(dataset))


@dataclass
class StepRecord:
    """One optimizer step plus its cost: wall time and peak tracked bytes above step start."""

    step: ZoStep
    wall_ms: float
    peak_bytes: int


@dataclass
class TrainResult:
    steps: list[ZoStep] = field(default_factory=list)
    evals: list[EvalResult] = field(default_factory=list)

    @property
    def final_eval(self) -> EvalResult:
        return self.evals[-1]


def run_seeds(run_seed: int) -> tuple[int, int, int]:
    """(model init, data order, query noise) seeds derived from one run seed."""
    return derive_seed(run_seed, 0), derive_seed(run_seed, 1), derive_seed(run_seed, 2)


def train(model: Model, train_set: Dataset, eval_set: Dataset, cfg: PrgeConfig,
          tcfg: TrainConfig, run_seed: int,
          on_step: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Run ``tcfg.steps`` steps, evaluating every ``eval_interval`` steps and at the end.

    Evaluations use clean master weights; in stateful mode they are refreshed
    with the pending update first, without disturbing the stateful copies.
    """
    cfg.validate()
    tcfg.validate()
    _, data_seed, noise_seed = run_seeds(run_seed)
    kind = "mezo" if tcfg.optimizer == "mezo" else cfg.mode
    trainer = Trainer(model, cfg, SeedSource(noise_seed), kind)
    stream = train_stream(train_set, cfg.batch_size, data_seed, model.config.max_seq_len)
    out = TrainResult()
    for t in range(1, tcfg.steps + 1):
        batch = next(stream)
        base = live_bytes()
        mem_reset()
        t0 = time.perf_counter()
        rec = trainer.step(batch)
        wall = (time.perf_counter() - t0) * 1e3
        peak = mem_peak().peak_bytes - base
        out.steps.append(rec)
        if on_step is not None:
            on_step(StepRecord(rec, wall, int(peak)))
        if t % tcfg.eval_interval == 0 or t == tcfg.steps:
            trainer.finalize()
            out.evals.append(evaluate(model, eval_set, tcfg.eval_batch_size, t))
    trainer.finalize()
    if not out.evals:
        out.evals.append(evaluate(model, eval_set, tcfg.eval_batch_size, 0))
    return out


__all__ = [
    "EvalResult", "OPTIMIZERS", "StepRecord", "TrainConfig", "TrainResult", "evaluate",
    "run_seeds", "train",
]
