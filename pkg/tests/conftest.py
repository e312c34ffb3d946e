import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from prge.model import Batch, ModelConfig, init_model

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_batch(cfg: ModelConfig, rows: int, seq: int, seed: int, ragged: bool = True) -> Batch:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(max(1, seq // 2), seq + 1, size=rows) if ragged else np.full(rows, seq)
    ids = np.zeros((rows, seq), dtype=np.int64)
    mask = np.zeros((rows, seq), dtype=bool)
    for r, n in enumerate(lengths):
        ids[r, :n] = rng.integers(1, cfg.vocab_size, size=n)
        mask[r, :n] = True
    return Batch(ids, mask, lengths - 1, rng.integers(1, cfg.vocab_size, size=rows))


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig()


@pytest.fixture
def tiny(tiny_cfg):
    return init_model(tiny_cfg, 0)


@pytest.fixture
def warm_tiny(tiny_cfg):
    """Tiny model with nonzero B so the adapters actually change the output."""
    m = init_model(tiny_cfg, 1)
    rng = np.random.default_rng(1)
    for lin in m.lora_layers():
        lin.b.assign_(rng.normal(scale=0.05, size=lin.b.shape).astype(np.float32))
    return m


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
