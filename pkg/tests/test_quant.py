import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_batch
from prge.errors import NumericError
from prge.model import init_model, quantize_model
from prge.parallel import PrgeConfig, prge_step_master
from prge.quant import QuantTensor, dequant_matmul, quantize
from prge.tensor import Tensor
from prge.zo import SeedSource


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 1000))
def test_roundtrip_error_bound(k, n, seed):
    w = np.random.default_rng(seed).normal(size=(k, n)).astype(np.float32)
    qw = quantize(w)
    back = qw.dequantize().numpy()
    assert np.all(np.abs(back - w) <= qw.scales / 2 + 1e-6)
    assert qw.values.dtype == np.int8 and np.abs(qw.values).max() <= 127


def test_zero_channel_and_bytes():
    w = np.zeros((4, 3), np.float32)
    w[:, 1] = [1, -2, 0.5, 0]
    qw = quantize(w)
    assert qw.scales[0] == 1.0 and qw.scales[2] == 1.0
    assert qw.nbytes == 12 + 12
    assert np.array_equal(qw.dequantize().numpy()[:, 0], np.zeros(4))


def test_rejects_nonfinite_and_bad_shapes():
    with pytest.raises(NumericError):
        quantize(np.array([[np.nan]], np.float32))
    with pytest.raises(TypeError):
        QuantTensor(np.zeros((2, 2), np.int16), np.ones(2, np.float32))


def test_dequant_matmul_counts():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 3)).astype(np.float32)
    qw = quantize(w)
    x = Tensor.from_numpy(rng.normal(size=(2, 5)))
    out = dequant_matmul(x, qw)
    np.testing.assert_allclose(out.numpy(), x.numpy() @ qw.dequantize().numpy(), rtol=1e-5)
    assert qw.dequant_count == 2


def test_quantized_model_close_to_float(tiny_cfg):
    m = init_model(tiny_cfg, 0)
    batch = random_batch(tiny_cfg, 3, 6, 0)
    ref = m.mean_loss(batch)
    quantize_model(m)
    assert m.quantized_linear_count() == 12
    assert abs(m.mean_loss(batch) - ref) < 0.05 * abs(ref)


@pytest.mark.parametrize("q", [1, 3])
def test_dequantize_once_per_forward(tiny_cfg, q):
    m = quantize_model(init_model(tiny_cfg, 0))
    batch = random_batch(tiny_cfg, 2, 5, 1)
    c0 = m.dequant_count()
    prge_step_master(m, batch, PrgeConfig(q=q, lr=0.0), SeedSource(0))
    c1 = m.dequant_count()
    prge_step_master(m, batch, PrgeConfig(q=q, inner_parallel=False, lr=0.0), SeedSource(0))
    assert c1 - c0 == 12
    assert m.dequant_count() - c1 == 24
