"""Small pre-norm decoder transformer with LoRA-FA adapters.

Blocks are ``h + attn(rms(h))`` followed by ``h + down(silu(up(rms(h))))``,
with learned absolute position embeddings and no norm gains. Adapters wrap a
configurable subset of the projections (``q``, ``k``, ``v``, ``o``, ``up``,
``down``); W and A are frozen, only B moves.

The loss is a single next-token cross-entropy per row, read at the row's label
position over the whole vocabulary. Activations are dropped layer by layer, so
only the current residual stream and one block's temporaries are live at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Mapping, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .quant import QuantTensor, quantize
from .tensor import Tensor
from .tensor.rng import RngStream, derive_seed, gaussian_fill

PROJECTIONS = ("q", "k", "v", "o", "up", "down")


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 32
    max_seq_len: int = 256
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_targets: tuple[str, ...] = ("q", "v", "down")

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 1 <= self.lora_rank < min(self.d_model, self.d_ff):
            raise ConfigError("lora_rank must satisfy 1 <= r < min(d_model, d_ff)")
        if self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        bad = set(self.lora_targets) - set(PROJECTIONS)
        if bad:
            raise ConfigError(f"unknown LoRA targets {sorted(bad)}")

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class Batch:
    """``n`` rows of right-padded token ids with one label per row.

    ``pad_mask`` is True on real tokens. The label token is predicted from the
    position ``label_pos`` (the last real token of the row).
    """

    token_ids: np.ndarray
    pad_mask: np.ndarray
    label_pos: np.ndarray
    label_ids: np.ndarray

    def __post_init__(self):
        self.token_ids = np.ascontiguousarray(self.token_ids, dtype=np.int64)
        self.pad_mask = np.ascontiguousarray(self.pad_mask, dtype=bool)
        self.label_pos = np.ascontiguousarray(self.label_pos, dtype=np.int64)
        self.label_ids = np.ascontiguousarray(self.label_ids, dtype=np.int64)
        n, seq = self.token_ids.shape
        if self.pad_mask.shape != (n, seq) or self.label_pos.shape != (n,) \
                or self.label_ids.shape != (n,):
            raise DimensionError("batch arrays disagree on shape")
        if np.any(self.label_pos < 0) or np.any(self.label_pos >= seq):
            raise DimensionError("label position outside sequence")

    @property
    def n_rows(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]

    @property
    def padding_fraction(self) -> float:
        return float(1.0 - self.pad_mask.mean())

    def duplicate(self, factor: int) -> "Batch":
        """Repeat all rows ``factor`` times as contiguous groups (group-major)."""
        if factor == 1:
            return self
        return Batch(
            np.tile(self.token_ids, (factor, 1)),
            np.tile(self.pad_mask, (factor, 1)),
            np.tile(self.label_pos, factor),
            np.tile(self.label_ids, factor),
        )

    def rows(self, start: int, stop: int) -> "Batch":
        return Batch(self.token_ids[start:stop], self.pad_mask[start:stop],
                     self.label_pos[start:stop], self.label_ids[start:stop])


Weight = Union[Tensor, QuantTensor]


class Linear:
    """Frozen projection ``x @ W``, optionally carrying a LoRA-FA branch.

    When ``a`` is set, the layer computes ``x W + scaling * (x A) B`` where ``B``
    is the master copy or a stack of ``g`` copies supplied per forward, one per
    contiguous group of rows.
    """

    def __init__(self, name: str, w: Weight, a: Tensor | None = None,
                 b: Tensor | None = None, scaling: float = 1.0):
        self.name = name
        self.w = w
        self.a = a
        self.b = b
        self.scaling = scaling

    @property
    def has_lora(self) -> bool:
        return self.a is not None

    @property
    def k_in(self) -> int:
        return self.w.shape[0]

    @property
    def k_out(self) -> int:
        return self.w.shape[1]

    @property
    def rank(self) -> int:
        return 0 if self.a is None else self.a.shape[1]

    def __call__(self, x: Tensor, b_stack: Tensor | None = None) -> Tensor:
        w = self.w.dequantize() if isinstance(self.w, QuantTensor) else self.w
        if self.a is None:
            return T.linear_lora(x, w)
        b = self.b if b_stack is None else b_stack
        if len(b.shape) == 3 and b.shape[1:] != self.b.shape:
            raise DimensionError(f"{self.name}: override {b.shape} does not match B {self.b.shape}")
        if len(b.shape) == 2 and b.shape != self.b.shape:
            raise DimensionError(f"{self.name}: override {b.shape} does not match B {self.b.shape}")
        xa = T.matmul(x, self.a)
        return T.linear_lora(x, w, xa, b, self.scaling)


LoraFaLayer = Linear

# per-layer override: mapping name -> stack, or a callable(layer) -> stack or None
Override = Union[None, Mapping[str, Tensor], Callable[[Linear], Union[Tensor, None]]]


class Block:
    def __init__(self, index: int, layers: dict[str, Linear], n_heads: int):
        self.index = index
        self.layers = layers
        self.n_heads = n_heads

    def forward(self, h: Tensor, n: int, seq: int, override: Override) -> Tensor:
        L = self.layers

        def proj(kind: str, x: Tensor) -> Tensor:
            layer = L[kind]
            return layer(x, _resolve(override, layer))

        x = T.rms_norm(h)
        q = proj("q", x)
        k = proj("k", x)
        v = proj("v", x)
        del x
        att = T.causal_attention(q, k, v, n, seq, self.n_heads)
        del q, k, v
        o = proj("o", att)
        del att
        h = T.add(h, o)
        del o
        x = T.rms_norm(h)
        u = proj("up", x)
        del x
        s = T.silu(u)
        del u
        d = proj("down", s)
        del s
        return T.add(h, d)


def _resolve(override: Override, layer: Linear) -> Tensor | None:
    if override is None or not layer.has_lora:
        return None
    if callable(override):
        return override(layer)
    return override.get(layer.name)


class Model:
    def __init__(self, config: ModelConfig, tok_emb: Tensor, pos_emb: Tensor,
                 blocks: list[Block], lm_head: Weight):
        self.config = config
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.lm_head = lm_head
        self.forward_count = 0

    # ------------------------------------------------------------ parameters

    def linears(self) -> Iterator[Linear]:
        for blk in self.blocks:
            for kind in PROJECTIONS:
                yield blk.layers[kind]

    def lora_layers(self) -> list[Linear]:
        return [lin for lin in self.linears() if lin.has_lora]

    def lora_params(self) -> "ParamSet":
        from .zo import ParamSet
        return ParamSet([(lin.name + ".B", lin.b) for lin in self.lora_layers()])

    def named_tensors(self) -> Iterator[tuple[str, Weight]]:
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for lin in self.linears():
            yield lin.name + ".W", lin.w
            if lin.has_lora:
                yield lin.name + ".A", lin.a
                yield lin.name + ".B", lin.b
        yield "lm_head", self.lm_head

    def full_params(self) -> "ParamSet":
        """Every float tensor (embeddings, W, lm_head and B) for full-parameter ZO."""
        from .zo import ParamSet
        return ParamSet([(name, t) for name, t in self.named_tensors()
                         if isinstance(t, Tensor) and not name.endswith(".A")])

    def resident_bytes(self) -> int:
        return sum(t.nbytes for _, t in self.named_tensors())

    def quantized_linear_count(self) -> int:
        return sum(isinstance(lin.w, QuantTensor) for lin in self.linears())

    def dequant_count(self) -> int:
        return sum(lin.w.dequant_count for lin in self.linears()
                   if isinstance(lin.w, QuantTensor))

    # ---------------------------------------------------------------- forward

    def forward_loss(self, batch: Batch, b_override: Override = None) -> Tensor:
        return forward_loss(self, batch, b_override)

    def mean_loss(self, batch: Batch, b_override: Override = None) -> float:
        """Batch-mean loss as a Python float (one forward)."""
        return float(copy_losses(row_losses(self, batch, b_override), 1)[0])


def init_model(config: ModelConfig, seed: int) -> Model:
    """Random frozen base, Gaussian A scaled by 1/sqrt(k_in), zero B."""
    config.validate()
    c = config
    counter = iter(range(1 << 30))

    def gauss(shape, std):
        t = gaussian_fill(RngStream(derive_seed(seed, next(counter))), shape)
        if std != 1.0:
            t = T.scale(t, std)
        return t

    tok = gauss((c.vocab_size, c.d_model), 1.0)
    pos = gauss((c.max_seq_len, c.d_model), 0.1)
    shapes = {
        "q": (c.d_model, c.d_model), "k": (c.d_model, c.d_model),
        "v": (c.d_model, c.d_model), "o": (c.d_model, c.d_model),
        "up": (c.d_model, c.d_ff), "down": (c.d_ff, c.d_model),
    }
    resid = 1.0 / math.sqrt(2 * c.n_layers)
    blocks = []
    for i in range(c.n_layers):
        layers = {}
        for kind in PROJECTIONS:
            k_in, k_out = shapes[kind]
            std = 1.0 / math.sqrt(k_in)
            if kind in ("o", "down"):
                std *= resid
            w = gauss((k_in, k_out), std)
            name = f"blocks.{i}.{kind}"
            if kind in c.lora_targets:
                a = gauss((k_in, c.lora_rank), 1.0 / math.sqrt(k_in))
                b = Tensor.zeros((c.lora_rank, k_out))
                layers[kind] = Linear(name, w, a, b, c.lora_scaling)
            else:
                layers[kind] = Linear(name, w)
        blocks.append(Block(i, layers, c.n_heads))
    head = gauss((c.d_model, c.vocab_size), 0.5 / math.sqrt(c.d_model))
    return Model(config, tok, pos, blocks, head)


def cast_model(model: Model, dtype) -> Model:
    """Independent copy of a float model with every tensor converted to ``dtype``.

    Used by the finite-difference oracles, which need float64 to resolve
    per-coordinate loss changes that float32 activations would round away.
    """
    if model.quantized_linear_count():
        raise TypeError("cast_model does not support quantized weights")

    def cp(t):
        return None if t is None else t.astype(dtype)

    blocks = []
    for blk in model.blocks:
        layers = {kind: Linear(lin.name, cp(lin.w), cp(lin.a), cp(lin.b), lin.scaling)
                  for kind, lin in blk.layers.items()}
        blocks.append(Block(blk.index, layers, blk.n_heads))
    return Model(model.config, cp(model.tok_emb), cp(model.pos_emb), blocks, cp(model.lm_head))


def quantize_model(model: Model) -> Model:
    """Replace every block projection's frozen W with an int8 QuantTensor in place."""
    for lin in model.linears():
        if isinstance(lin.w, Tensor):
            lin.w = quantize(lin.w)
    return model


def label_logits(model: Model, batch: Batch, b_override: Override = None) -> Tensor:
    """One forward pass; logits ``(n, vocab)`` at each row's label position."""
    c = model.config
    n, seq = batch.n_rows, batch.seq_len
    if seq > c.max_seq_len:
        raise DimensionError(f"sequence length {seq} exceeds max_seq_len {c.max_seq_len}")
    if batch.token_ids.max(initial=0) >= c.vocab_size:
        raise DimensionError("token id outside vocabulary")
    model.forward_count += 1
    e = T.embedding(model.tok_emb, batch.token_ids)
    h = T.add_rows(e, model.pos_emb, np.tile(np.arange(seq), n))
    del e
    for blk in model.blocks:
        h = blk.forward(h, n, seq, b_override)
    last = T.take_rows(h, np.arange(n) * seq + batch.label_pos)
    del h
    x = T.rms_norm(last)
    del last
    head = model.lm_head.dequantize() if isinstance(model.lm_head, QuantTensor) else model.lm_head
    return T.linear_lora(x, head)


def row_losses(model: Model, batch: Batch, b_override: Override = None) -> np.ndarray:
    """Per-row cross-entropy as float64; the estimators consume this form."""
    return T.cross_entropy64(label_logits(model, batch, b_override), batch.label_ids)


def forward_loss(model: Model, batch: Batch, b_override: Override = None) -> Tensor:
    """Per-row cross-entropy at each row's label position.

    ``b_override`` supplies, for LoRA layers, either one ``(r, k_out)`` matrix or a
    ``(g, r, k_out)`` stack whose slice ``i`` serves row group ``i`` (rows are
    split into ``g`` equal contiguous groups).
    """
    return T.cross_entropy(label_logits(model, batch, b_override), batch.label_ids)


def loss_per_copy(per_row: Tensor, groups: int) -> Tensor:
    """Mean loss of each of ``groups`` contiguous, equally sized row blocks."""
    return T.group_means(per_row, groups)


def copy_losses(per_row: np.ndarray, groups: int) -> np.ndarray:
    """float64 counterpart of :func:`loss_per_copy` for :func:`row_losses` output."""
    return T.group_means64(per_row, groups)


def predict(model: Model, batch: Batch, candidates: np.ndarray | None = None) -> np.ndarray:
    """Argmax token at each row's label position, optionally over a candidate set."""
    logits = label_logits(model, batch).numpy()
    if candidates is None:
        return logits.argmax(axis=1)
    cand = np.asarray(candidates)
    return cand[logits[:, cand].argmax(axis=1)]


def lora_param_count(model: Model) -> int:
    return sum(lin.b.size for lin in model.lora_layers())


__all__ = [
    "Batch", "Block", "Linear", "LoraFaLayer", "Model", "ModelConfig", "PROJECTIONS",
    "cast_model", "copy_losses", "forward_loss", "init_model", "label_logits", "lora_param_count",
    "loss_per_copy", "predict", "quantize_model", "row_losses",
]
