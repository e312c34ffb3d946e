"""Synthetic single-label sequence tasks.

Token 0 is padding. Every example is a variable-length token sequence whose
label is one vocabulary token, predicted at the sequence's last position.

* ``majority``: tokens drawn from ``n_classes`` symbol tokens; the label is the
  most frequent one (draws with a tied maximum are redrawn).
* ``kv_recall``: ``key value`` pairs followed by one queried key; the label is
  the value stored under it. Keys are distinct within an example.
* ``parity``: a string over two symbol tokens; the label token encodes whether
  the second symbol occurs an odd number of times.

Train and eval splits come from separate seed streams of the same spec.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import Batch
from .tensor import derive_seed

KINDS = ("majority", "kv_recall", "parity")
PAD = 0
SCHEMA = "prge.dataset"
SCHEMA_VERSION = 1


@dataclass
class TaskSpec:
    kind: str = "majority"
    vocab_size: int = 32
    min_len: int = 3
    max_len: int = 9
    n_train: int = 2000
    n_eval: int = 500
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"task kind must be one of {KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.kind == "parity":
            if self.n_classes != 2:
                raise ConfigError("parity has exactly 2 classes")
            need = 4
        elif self.kind == "majority":
            if self.n_classes < 2:
                raise ConfigError("majority needs >= 2 classes")
            if self.max_len < 2:
                raise ConfigError("majority needs max_len >= 2")
            need = 1 + self.n_classes
        else:
            if self.n_classes < 2:
                raise ConfigError("kv_recall needs >= 2 value classes")
            if self.min_len < 3 or self.min_len % 2 == 0 or self.max_len % 2 == 0:
                raise ConfigError("kv_recall lengths must be odd and >= 3")
            need = 1 + self.n_classes + self.n_keys
        if self.vocab_size < need:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for this task (need {need})")

    @property
    def n_keys(self) -> int:
        return (self.max_len - 1) // 2

    @property
    def label_tokens(self) -> np.ndarray:
        """Token ids that can appear as labels, in class order."""
        if self.kind == "parity":
            return np.array([3, 4])
        return np.arange(1, 1 + self.n_classes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    spec: TaskSpec
    split: str
    sequences: list[np.ndarray] = field(default_factory=list)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences], dtype=np.int64)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.spec == other.spec
                and self.split == other.split and len(self) == len(other)
                and np.array_equal(self.labels, other.labels)
                and all(np.array_equal(a, b) for a, b in zip(self.sequences, other.sequences)))


@dataclass
class TaskData:
    train: Dataset
    eval: Dataset


def _majority(rng: np.random.Generator, spec: TaskSpec, length: int) -> tuple[np.ndarray, int]:
    symbols = spec.label_tokens
    while True:
        seq = rng.choice(symbols, size=length)
        counts = np.bincount(seq, minlength=symbols[-1] + 1)[symbols]
        top = counts.max()
        if (counts == top).sum() == 1:
            return seq, int(symbols[counts.argmax()])


def _kv_recall(rng: np.random.Generator, spec: TaskSpec, length: int) -> tuple[np.ndarray, int]:
    n_pairs = (length - 1) // 2
    key_tokens = np.arange(1 + spec.n_classes, 1 + spec.n_classes + spec.n_keys)
    keys = rng.choice(key_tokens, size=n_pairs, replace=False)
    values = rng.choice(spec.label_tokens, size=n_pairs)
    ask = rng.integers(n_pairs)
    seq = np.empty(length, dtype=np.int64)
    seq[0:-1:2] = keys
    seq[1:-1:2] = values
    seq[-1] = keys[ask]
    return seq, int(values[ask])


def _parity(rng: np.random.Generator, spec: TaskSpec, length: int) -> tuple[np.ndarray, int]:
    seq = rng.choice(np.array([1, 2]), size=length)
    odd = int((seq == 2).sum() % 2)
    return seq, int(spec.label_tokens[odd])


_MAKERS = {"majority": _majority, "kv_recall": _kv_recall, "parity": _parity}


def _draw_length(rng: np.random.Generator, spec: TaskSpec) -> int:
    if spec.kind == "kv_recall":
        return 2 * int(rng.integers((spec.min_len - 1) // 2, (spec.max_len - 1) // 2 + 1)) + 1
    return int(rng.integers(spec.min_len, spec.max_len + 1))


def _split(spec: TaskSpec, split: str, n: int) -> Dataset:
    rng = np.random.default_rng(derive_seed(spec.seed, 0 if split == "train" else 1))
    make = _MAKERS[spec.kind]
    seqs, labels = [], []
    for _ in range(n):
        seq, label = make(rng, spec, _draw_length(rng, spec))
        seqs.append(np.asarray(seq, dtype=np.int64))
        labels.append(label)
    return Dataset(spec, split, seqs, np.array(labels, dtype=np.int64))


def generate(spec: TaskSpec) -> TaskData:
    spec.validate()
    return TaskData(_split(spec, "train", spec.n_train), _split(spec, "eval", spec.n_eval))


def make_batch(seqs: Sequence[np.ndarray], labels: Sequence[int], pad_to: int | None = None,
               max_seq_len: int | None = None) -> Batch:
    """Right-pad sequences to ``pad_to`` (default: the longest one) into a Batch."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    longest = int(lengths.max())
    if max_seq_len is not None and longest > max_seq_len:
        raise DataError(f"sequence of length {longest} exceeds max_seq_len {max_seq_len}")
    width = longest if pad_to is None else pad_to
    if width < longest:
        raise DataError(f"pad_to={pad_to} shorter than a sequence of length {longest}")
    if max_seq_len is not None and width > max_seq_len:
        raise DataError(f"pad_to={width} exceeds max_seq_len {max_seq_len}")
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, :len(s)] = s
        mask[r, :len(s)] = True
    return Batch(ids, mask, lengths - 1, np.asarray(labels, dtype=np.int64))


def batches(dataset: Dataset, batch_size: int, pad_to: int | None = None,
            duplicate_factor: int = 1, max_seq_len: int | None = None,
            order: np.ndarray | None = None, drop_last: bool = False) -> Iterator[Batch]:
    """Consecutive batches over ``order`` (default: dataset order).

    Each batch is padded to its own longest row unless ``pad_to`` is given and
    then tiled ``duplicate_factor`` times group by group.
    """
    if batch_size < 1 or duplicate_factor < 1:
        raise ConfigError("batch_size and duplicate_factor must be >= 1")
    idx = np.arange(len(dataset)) if order is None else np.asarray(order)
    stop = len(idx) - (len(idx) % batch_size if drop_last else 0)
    for lo in range(0, stop, batch_size):
        sel = idx[lo:lo + batch_size]
        b = make_batch([dataset.sequences[i] for i in sel], dataset.labels[sel],
                       pad_to, max_seq_len)
        yield b.duplicate(duplicate_factor)


def train_stream(dataset: Dataset, batch_size: int, seed: int,
                 max_seq_len: int | None = None) -> Iterator[Batch]:
    """Endless full batches, reshuffled each epoch from ``derive_seed(seed, epoch)``."""
    if batch_size > len(dataset):
        raise ConfigError("batch_size larger than the dataset")
    epoch = 0
    while True:
        order = np.random.default_rng(derive_seed(seed, epoch)).permutation(len(dataset))
        yield from batches(dataset, batch_size, max_seq_len=max_seq_len, order=order,
                           drop_last=True)
        epoch += 1


def mean_padding_fraction(dataset: Dataset, batch_size: int, seed: int = 0) -> float:
    """Mean per-batch padding fraction over one shuffled epoch of full batches."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    fr = [b.padding_fraction for b in batches(dataset, batch_size, order=order, drop_last=True)]
    return float(np.mean(fr))


# ------------------------------------------------------------------ jsonl io


def export_jsonl(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "split": dataset.split,
                  "spec": dataset.spec.to_dict()}
        f.write(json.dumps(header, sort_keys=False) + "\n")
        for seq, label in zip(dataset.sequences, dataset.labels):
            f.write(json.dumps({"tokens": [int(t) for t in seq], "label": int(label)}) + "\n")


def import_jsonl(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported dataset header {header}")
    spec = TaskSpec(**header["spec"])
    seqs, labels = [], []
    for ln in lines[1:]:
        rec = json.loads(ln)
        toks = np.array(rec["tokens"], dtype=np.int64)
        if toks.size == 0 or toks.min() < 0 or toks.max() >= spec.vocab_size:
            raise DataError(f"{path}: token ids outside the vocabulary")
        seqs.append(toks)
        labels.append(int(rec["label"]))
    return Dataset(spec, header["split"], seqs, np.array(labels, dtype=np.int64))


__all__ = [
    "Dataset", "KINDS", "PAD", "TaskData", "TaskSpec", "batches", "export_jsonl", "generate",
    "import_jsonl", "make_batch", "mean_padding_fraction", "train_stream",
]
