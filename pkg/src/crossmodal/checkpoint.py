"""Binary model checkpoints.

Layout (all integers unsigned 32-bit little-endian):

    "CMCK" | version | config_len | config JSON (utf-8) | entry_count |
    per entry: name_len | name utf-8 | rank | dims... | float32 data (LE)

Entries cover every learnable parameter and every batch-norm running
buffer, in model construction order. Loading rebuilds the model from the
embedded config and validates each entry's shape against it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import EmotionClassifier, ModelConfig

MAGIC = b"CMCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


def _entries(model: EmotionClassifier) -> list[tuple[str, np.ndarray]]:
    named = [(name, t.data) for name, t in model.named_parameters()]
    named += [(f"buffer.{name}", a) for name, a in model.named_buffers()]
    return named


def save_checkpoint(model: EmotionClassifier, path: str | Path) -> None:
    header = json.dumps(
        {"mode": model.mode, "config": model.cfg.to_dict()},
        sort_keys=True,
    ).encode("utf-8")
    entries = _entries(model)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | Path) -> EmotionClassifier:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), str(path))
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a model checkpoint)")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(reader.take(reader.u32("config length"), "config").decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    model = EmotionClassifier(cfg, mode=header["mode"], seed=0)

    expected = dict((name, t.data) for name, t in model.named_parameters())
    expected.update((f"buffer.{name}", a) for name, a in model.named_buffers())

    seen = set()
    count = reader.u32("entry count")
    for _ in range(count):
        name = reader.take(reader.u32("name length"), "entry name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        raw = reader.take(4 * n, f"data of {name}")
        if name not in expected:
            raise CheckpointError(f"{path}: unknown parameter {name!r} for this config")
        target = expected[name]
        if tuple(dims) != target.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for parameter {name!r}: "
                f"file has {tuple(dims)}, config implies {target.shape}"
            )
        values = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(target.dtype)
        target[...] = values
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    if reader.pos != len(reader.blob):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return model
