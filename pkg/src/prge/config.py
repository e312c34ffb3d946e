"""INI run configuration shared by every CLI command.

Sections and keys (all optional; defaults shown by ``RunConfig().to_ini()``):

``[model]``      ModelConfig fields, ``lora_targets`` comma separated, ``quant`` bool
``[task]``       TaskSpec fields except ``vocab_size`` (taken from ``[model]``)
``[optimizer]``  ``optimizer`` (prge|mezo), ``mode``, ``inner_parallel``, ``q``,
                 ``batch_size``, ``effective_batch`` (must equal q * batch_size),
                 ``eps``, ``lr``, ``steps``, ``eval_interval``
``[bench]``      comma lists ``models``, ``seq_lens``, ``batch_sizes``, ``qs``,
                 ``modes``, ``quant``; scalars ``warmup``, ``steps``,
                 ``mem_limit_bytes`` (0 means unlimited)
``[paths]``      ``out_dir``, ``checkpoint``, ``records`` (relative to out_dir)
``[run]``        ``seed``, ``fault`` (verification fault injection: none|wrong_eps)
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .bench import BENCH_MODES, MODEL_PRESETS, BenchGrid
from .errors import ConfigError
from .model import ModelConfig
from .parallel import PrgeConfig
from .tasks import TaskSpec
from .train import TrainConfig

FAULTS = ("none", "wrong_eps")


@dataclass
class OptimizerSection:
    optimizer: str = "prge"
    mode: str = "master"
    inner_parallel: bool = True
    q: int = 4
    batch_size: int = 4
    effective_batch: int = 16
    eps: float = 1e-2
    lr: float = 0.1
    steps: int = 2000
    eval_interval: int = 100

    def prge(self) -> PrgeConfig:
        return PrgeConfig(q=self.q, batch_size=self.batch_size,
                          inner_parallel=self.inner_parallel, mode=self.mode,
                          eps=self.eps, lr=self.lr)

    def train(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, eval_interval=self.eval_interval,
                           optimizer=self.optimizer)


@dataclass
class PathsSection:
    out_dir: str = "runs"
    checkpoint: str = "model.ckpt"
    records: str = "train.records.jsonl"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: bool = False
    task: TaskSpec = field(default_factory=TaskSpec)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    bench: BenchGrid = field(default_factory=BenchGrid)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0
    fault: str = "none"

    def validate(self) -> None:
        self.model.validate()
        if self.task.vocab_size != self.model.vocab_size:
            raise ConfigError("task vocab_size must equal model vocab_size")
        self.task.validate()
        if self.task.max_len > self.model.max_seq_len:
            raise ConfigError("task max_len exceeds model max_seq_len")
        o = self.optimizer
        if o.effective_batch != o.q * o.batch_size:
            raise ConfigError(f"effective_batch {o.effective_batch} != q * batch_size = "
                              f"{o.q * o.batch_size}")
        o.prge()
        o.train()
        if o.batch_size > self.task.n_train:
            raise ConfigError("batch_size larger than n_train")
        if self.fault not in FAULTS:
            raise ConfigError(f"fault must be one of {FAULTS}")
        b = self.bench
        for m in b.models:
            if m not in MODEL_PRESETS:
                raise ConfigError(f"unknown bench model {m!r}")
        for m in b.modes:
            if m not in BENCH_MODES:
                raise ConfigError(f"unknown bench mode {m!r}")
        if b.steps < 1 or b.warmup < 0:
            raise ConfigError("bench needs steps >= 1 and warmup >= 0")
        b.cells()
        for name in ("out_dir", "checkpoint", "records"):
            if not getattr(self.paths, name):
                raise ConfigError(f"paths.{name} must be non-empty")

    # ---------------------------------------------------------- serialization

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        m = self.model.to_dict()
        m["lora_targets"] = ",".join(self.model.lora_targets)
        m["quant"] = self.quant
        cp["model"] = {k: _fmt(v) for k, v in m.items()}
        t = self.task.to_dict()
        t.pop("vocab_size")
        cp["task"] = {k: _fmt(v) for k, v in t.items()}
        cp["optimizer"] = {f.name: _fmt(getattr(self.optimizer, f.name))
                           for f in fields(self.optimizer)}
        b = self.bench
        cp["bench"] = {
            "models": ",".join(b.models), "seq_lens": _lst(b.seq_lens),
            "batch_sizes": _lst(b.batch_sizes), "qs": _lst(b.qs),
            "modes": ",".join(b.modes), "quant": _lst(b.quant),
            "warmup": str(b.warmup), "steps": str(b.steps), "eps": _fmt(b.eps),
            "lr": _fmt(b.lr), "mem_limit_bytes": str(b.mem_limit_bytes or 0),
        }
        cp["paths"] = {f.name: getattr(self.paths, f.name) for f in fields(self.paths)}
        cp["run"] = {"seed": str(self.seed), "fault": self.fault}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        known = {"model", "task", "optimizer", "bench", "paths", "run"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        try:
            return _build(cp)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))

    def resolve(self, name: str) -> Path:
        return Path(self.paths.out_dir) / getattr(self.paths, name)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _lst(v) -> str:
    return ",".join(_fmt(x) for x in v)


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _split(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _section(cp, name: str, spec: dict) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp[name].items():
        if key not in spec:
            raise ConfigError(f"unknown key {name}.{key}")
        conv = spec[key]
        try:
            out[key] = conv(raw)
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"bad value for {name}.{key}: {raw!r}") from None
    return out


def _build(cp) -> RunConfig:
    ms = _section(cp, "model", {
        "n_layers": int, "d_model": int, "n_heads": int, "d_ff": int, "vocab_size": int,
        "max_seq_len": int, "lora_rank": int, "lora_alpha": float,
        "lora_targets": lambda s: tuple(_split(s)), "quant": _bool})
    quant = ms.pop("quant", False)
    model = ModelConfig(**ms)
    ts = _section(cp, "task", {
        "kind": str, "min_len": int, "max_len": int, "n_train": int, "n_eval": int,
        "n_classes": int, "seed": int})
    task = TaskSpec(vocab_size=model.vocab_size, **ts)
    os_ = _section(cp, "optimizer", {
        "optimizer": str, "mode": str, "inner_parallel": _bool, "q": int, "batch_size": int,
        "effective_batch": int, "eps": float, "lr": float, "steps": int,
        "eval_interval": int})
    opt = OptimizerSection(**os_)
    bs = _section(cp, "bench", {
        "models": _split, "seq_lens": lambda s: [int(x) for x in _split(s)],
        "batch_sizes": lambda s: [int(x) for x in _split(s)],
        "qs": lambda s: [int(x) for x in _split(s)], "modes": _split,
        "quant": lambda s: [_bool(x) for x in _split(s)], "warmup": int, "steps": int,
        "eps": float, "lr": float, "mem_limit_bytes": int})
    if "mem_limit_bytes" in bs:
        bs["mem_limit_bytes"] = bs["mem_limit_bytes"] or None
    for key in ("models", "seq_lens", "batch_sizes", "qs", "modes", "quant"):
        if key in bs:
            bs[key] = tuple(bs[key])
    bench = BenchGrid(**bs)
    ps = PathsSection(**_section(cp, "paths", {"out_dir": str, "checkpoint": str, "records": str}))
    rs = _section(cp, "run", {"seed": int, "fault": str})
    cfg = RunConfig(model=model, quant=quant, task=task, optimizer=opt, bench=bench, paths=ps,
                    seed=rs.get("seed", 0), fault=rs.get("fault", "none"))
    cfg.validate()
    return cfg


__all__ = ["FAULTS", "OptimizerSection", "PathsSection", "RunConfig"]
