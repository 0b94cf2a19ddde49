"""Flat binary checkpoints.

Layout (all integers little-endian uint32)::

    b"RATLAB1"                 magic, format version 1
    meta_len, meta             JSON: mode, model config, granularity, vocab, names
    n_blocks
    n_blocks x (ndim, dims...)
    float64 little-endian parameter data, blocks in declaration order
"""
from __future__ import annotations

import json
import struct

import numpy as np

from ratlab.models import ModelConfig, RationaleSystem
from ratlab.vocab import Vocab

MAGIC = b"RATLAB1"


class CheckpointError(ValueError):
    pass


def save(path, system: RationaleSystem, vocab: Vocab, granularity: str, extra: dict | None = None) -> None:
    named = system.named_params()
    meta = {"mode": system.mode, "model": system.cfg.to_dict(), "granularity": granularity,
            "vocab": vocab.to_list(), "names": [n for n, _ in named], "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for _, t in named:
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read(fh, n):
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def load(path) -> tuple[RationaleSystem, Vocab, dict]:
    """Rebuild the system and vocabulary stored at ``path``."""
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError("not a ratlab checkpoint (bad magic)")
        (mlen,) = struct.unpack("<I", _read(fh, 4))
        meta = json.loads(_read(fh, mlen).decode("utf-8"))
        (n,) = struct.unpack("<I", _read(fh, 4))
        shapes = []
        for _ in range(n):
            (ndim,) = struct.unpack("<I", _read(fh, 4))
            shapes.append(struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim)) if ndim else ())
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            arrays.append(np.frombuffer(_read(fh, 8 * count), dtype="<f8").reshape(shape))
        if fh.read(1):
            raise CheckpointError("trailing bytes after parameter blocks")
    vocab = Vocab.from_list(meta["vocab"])
    system = RationaleSystem(meta["mode"], len(vocab), ModelConfig(**meta["model"]), seed=0)
    named = system.named_params()
    if [nm for nm, _ in named] != meta["names"]:
        raise CheckpointError("parameter layout does not match the stored model config")
    for (nm, t), a in zip(named, arrays):
        if t.data.shape != a.shape:
            raise CheckpointError(f"shape mismatch for {nm}: {a.shape} vs {t.data.shape}")
        t.data[...] = a
    return system, vocab, meta
