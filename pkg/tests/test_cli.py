import io
import json

import pytest

from prge import checkpoint
from prge.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from prge.config import RunConfig

SMALL = """
[task]
n_train = 64
n_eval = 16
[optimizer]
q = 2
batch_size = 2
effective_batch = 4
steps = 4
eval_interval = 2
[bench]
seq_lens = 8
qs = 1
modes = outer,inner
warmup = 0
steps = 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(SMALL)
    return p


def run(*argv):
    log = io.StringIO()
    return main([str(a) for a in argv], log), log.getvalue()


def test_train_writes_records_and_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "out"
    code, log = run("train", cfg_path, "--out", out)
    assert code == EXIT_OK and "trained 4 steps" in log
    lines = (out / "train.records.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    assert head["schema"] == "prge.train.records" and head["effective_batch"] == 4
    kinds = [json.loads(ln)["type"] for ln in lines[1:]]
    assert kinds == ["step"] * 4 + ["eval"] * 2
    assert checkpoint.load(out / "model.ckpt").config.n_layers == 2


def test_runs_are_byte_identical(cfg_path, tmp_path):
    for cmd, name in (("train", "train.records.jsonl"), ("bench", "bench.records.jsonl")):
        a, b = tmp_path / f"{cmd}a", tmp_path / f"{cmd}b"
        assert run(cmd, cfg_path, "--out", a)[0] == EXIT_OK
        assert run(cmd, cfg_path, "--out", b)[0] == EXIT_OK
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    run("train", cfg_path, "--out", c, "--seed", 5)
    assert (c / "train.records.jsonl").read_bytes() != (tmp_path / "traina" / "train.records.jsonl").read_bytes()


def test_export(cfg_path, tmp_path):
    out = tmp_path / "exp"
    code, _ = run("export", cfg_path, "--out", out)
    assert code == EXIT_OK
    assert len((out / "train.jsonl").read_text().splitlines()) == 65
    assert RunConfig.load(out / "config.ini").task.n_train == 64


def test_verify_fault_exits_check(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[run]\nfault = wrong_eps\n")
    code, log = run("verify", p, "--out", tmp_path / "v")
    assert code == EXIT_CHECK
    assert "[FAIL] prge/inner-loop-equivalence" in log
    assert (tmp_path / "v" / "verify.report.txt").read_text() == log


def test_error_exit_codes(tmp_path, cfg_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[optimizer]\nq = 3\n")
    assert run("train", bad)[0] == EXIT_CONFIG
    assert run("train", tmp_path / "missing.ini")[0] == EXIT_IO
    assert run("fly", cfg_path)[0] == EXIT_CONFIG
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    assert run("export", cfg_path, "--out", blocker / "sub")[0] == EXIT_IO
