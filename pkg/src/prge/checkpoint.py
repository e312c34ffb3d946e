"""Model checkpoint file.

Little-endian layout::

    magic      4 bytes  b"PRGE"
    version    u32      1
    config_len u32      byte length of the JSON config that follows
    config     bytes    UTF-8 JSON of ModelConfig.to_dict()
    count      u32      number of tensor entries
    entries    count times:
        name_len u16, name (UTF-8)
        kind     u8     0 = float32, 1 = float64, 2 = int8 weight + float32 scales
        ndim     u8, dims u32 * ndim
        payload  row-major data; kind 2 stores int8 values then one float32
                 scale per output channel (last dim)

Entries are written in :meth:`Model.named_tensors` order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import PROJECTIONS, Block, Linear, Model, ModelConfig
from .quant import QuantTensor
from .tensor import Tensor

MAGIC = b"PRGE"
VERSION = 1
KIND_F32, KIND_F64, KIND_INT8 = 0, 1, 2


def _write_entry(f, name: str, t) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    if isinstance(t, QuantTensor):
        kind, shape = KIND_INT8, t.shape
    else:
        kind = KIND_F32 if t.dtype == np.float32 else KIND_F64
        shape = t.shape
    f.write(struct.pack("<BB", kind, len(shape)))
    f.write(struct.pack(f"<{len(shape)}I", *shape))
    if kind == KIND_INT8:
        f.write(t.values.tobytes(order="C"))
        f.write(t.scales.astype("<f4").tobytes())
    else:
        f.write(t.numpy().astype("<f4" if kind == KIND_F32 else "<f8").tobytes())


def dumps(model: Model) -> bytes:
    f = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(cfg)))
    f.write(cfg)
    entries = list(model.named_tensors())
    f.write(struct.pack("<I", len(entries)))
    for name, t in entries:
        _write_entry(f, name, t)
    return f.getvalue()


def save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_entry(r: _Reader):
    (n,) = r.unpack("<H")
    name = r.take(n).decode("utf-8")
    kind, ndim = r.unpack("<BB")
    shape = r.unpack(f"<{ndim}I")
    count = int(np.prod(shape))
    if kind == KIND_INT8:
        vals = np.frombuffer(r.take(count), dtype=np.int8).reshape(shape).copy()
        scales = np.frombuffer(r.take(4 * shape[-1]), dtype="<f4").astype(np.float32)
        return name, QuantTensor(vals, scales)
    if kind in (KIND_F32, KIND_F64):
        dt, size = ("<f4", 4) if kind == KIND_F32 else ("<f8", 8)
        arr = np.frombuffer(r.take(size * count), dtype=dt).reshape(shape)
        return name, Tensor(arr.astype(np.float32 if kind == KIND_F32 else np.float64))
    raise DataError(f"unknown tensor kind {kind} for {name!r}")


def loads(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(**json.loads(r.take(cfg_len).decode("utf-8")))
    (count,) = r.unpack("<I")
    tensors = dict(_read_entry(r) for _ in range(count))
    if r.pos != len(buf):
        raise DataError("trailing bytes after checkpoint entries")
    try:
        blocks = []
        for i in range(cfg.n_layers):
            layers = {}
            for kind in PROJECTIONS:
                name = f"blocks.{i}.{kind}"
                if kind in cfg.lora_targets:
                    layers[kind] = Linear(name, tensors[name + ".W"], tensors[name + ".A"],
                                          tensors[name + ".B"], cfg.lora_scaling)
                else:
                    layers[kind] = Linear(name, tensors[name + ".W"])
            blocks.append(Block(i, layers, cfg.n_heads))
        return Model(cfg, tensors["tok_emb"], tensors["pos_emb"], blocks, tensors["lm_head"])
    except KeyError as e:
        raise DataError(f"checkpoint is missing tensor {e}") from None


def load(path: str | Path) -> Model:
    return loads(Path(path).read_bytes())


__all__ = ["MAGIC", "VERSION", "dumps", "load", "loads", "save"]
