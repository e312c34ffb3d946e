"""``prge train|bench|verify|export <config> [--out DIR] [--seed N]``.

Exit codes: 0 success, 1 a verification check failed, 2 invalid configuration
or data, 3 numeric failure, 4 file-system error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import IO, Sequence

from . import checkpoint
from .bench import emit, run_sweep
from .config import RunConfig
from .errors import ConfigError, DataError, NumericError
from .model import init_model, quantize_model
from .tasks import export_jsonl, generate
from .train import run_seeds, train
from .verify import format_report, run_all

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
TRAIN_SCHEMA = "prge.train.records"
TRAIN_SCHEMA_VERSION = 1


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig, log: IO[str]) -> int:
    """Train, writing step/eval records as they happen and a finalized checkpoint."""
    out = _out_dir(cfg)
    data = generate(cfg.task)
    init_seed, _, _ = run_seeds(cfg.seed)
    model = init_model(cfg.model, init_seed)
    if cfg.quant:
        quantize_model(model)
    pc, tc = cfg.optimizer.prge(), cfg.optimizer.train()
    rec_path = cfg.resolve("records")
    timing_path = rec_path.with_name(rec_path.name.replace(".jsonl", "") + ".timing.jsonl")
    header = {"schema": TRAIN_SCHEMA, "version": TRAIN_SCHEMA_VERSION,
              "effective_batch": pc.effective_batch, "config": _config_digest(cfg)}
    with rec_path.open("w", encoding="utf-8", newline="\n") as rf, \
            timing_path.open("w", encoding="utf-8", newline="\n") as tf:
        rf.write(json.dumps(header) + "\n")
        tf.write(json.dumps({"schema": TRAIN_SCHEMA + ".timing",
                             "version": TRAIN_SCHEMA_VERSION}) + "\n")

        def on_step(sr) -> None:
            rec = sr.step
            row = {"type": "step", "step": rec.step + 1, "seeds": rec.seeds,
                   "projected_grads": rec.projected_grads, "loss_plus": rec.loss_plus,
                   "loss_minus": rec.loss_minus, "forward_count": rec.forward_count,
                   "peak_bytes": sr.peak_bytes}
            rf.write(json.dumps(row) + "\n")
            rf.flush()
            tf.write(json.dumps({"step": rec.step + 1, "wall_ms": sr.wall_ms}) + "\n")

        result = train(model, data.train, data.eval, pc, tc, cfg.seed, on_step=on_step)
        for ev in result.evals:
            rf.write(json.dumps({"type": "eval", **dataclasses.asdict(ev)}) + "\n")
    checkpoint.save(model, cfg.resolve("checkpoint"))
    fin = result.final_eval
    print(f"trained {tc.steps} steps (E={pc.effective_batch}); eval loss {fin.loss:.4f} "
          f"accuracy {fin.accuracy:.4f}", file=log)
    return EXIT_OK


def _config_digest(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "q": cfg.optimizer.q, "batch_size": cfg.optimizer.batch_size,
            "mode": cfg.optimizer.mode, "optimizer": cfg.optimizer.optimizer,
            "inner_parallel": cfg.optimizer.inner_parallel, "steps": cfg.optimizer.steps}


def cmd_bench(cfg: RunConfig, log: IO[str]) -> int:
    out = _out_dir(cfg)
    grid = dataclasses.replace(cfg.bench, seed=cfg.seed)
    records = run_sweep(grid)
    paths = emit(records, out)
    print(f"{len(records)} records -> {paths['records']}", file=log)
    print(paths["summary"].read_text(encoding="utf-8"), end="", file=log)
    return EXIT_OK


def cmd_verify(cfg: RunConfig, log: IO[str]) -> int:
    out = _out_dir(cfg)
    results = run_all(cfg.model, seed=cfg.seed, eps=cfg.optimizer.eps, lr=cfg.optimizer.lr,
                      fault=cfg.fault)
    report = format_report(results)
    (out / "verify.report.txt").write_text(report, encoding="utf-8")
    print(report, end="", file=log)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_export(cfg: RunConfig, log: IO[str]) -> int:
    out = _out_dir(cfg)
    data = generate(cfg.task)
    export_jsonl(data.train, out / "train.jsonl")
    export_jsonl(data.eval, out / "eval.jsonl")
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    print(f"exported {len(data.train)} train / {len(data.eval)} eval examples to {out}", file=log)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "verify": cmd_verify, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prge", description="Forward-only LoRA-FA fine-tuning.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", help="INI configuration file")
    p.add_argument("--out", help="output directory (overrides paths.out_dir)")
    p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    return p


def main(argv: Sequence[str] | None = None, log: IO[str] | None = None) -> int:
    log = sys.stdout if log is None else log
    err = sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        cfg = RunConfig.load(args.config)
        if args.out is not None:
            cfg.paths.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        return COMMANDS[args.command](cfg, log)
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=err)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=err)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=err)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


__all__ = ["COMMANDS", "EXIT_CHECK", "EXIT_CONFIG", "EXIT_IO", "EXIT_NUMERIC", "EXIT_OK", "main"]
