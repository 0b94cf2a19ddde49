import struct

import numpy as np
import pytest

from ratlab import checkpoint
from ratlab.models import ModelConfig, RationaleSystem
from ratlab.vocab import Vocab


@pytest.mark.parametrize("mode", ["rnp", "a2r", "attention"])
def test_roundtrip(tmp_path, mode):
    vocab = Vocab(["a", "b", "c"])
    cfg = ModelConfig(d_emb=5, hidden=3, head="mlp", head_hidden=4)
    s = RationaleSystem(mode, len(vocab), cfg, seed=7)
    for t in s.params():
        t.data += np.random.default_rng(1).normal(size=t.data.shape)
    path = tmp_path / "m.bin"
    checkpoint.save(path, s, vocab, "sentence", {"best_epoch": 3})
    back, v2, meta = checkpoint.load(path)
    assert v2.itos == vocab.itos and meta["granularity"] == "sentence" and meta["extra"]["best_epoch"] == 3
    assert back.mode == mode
    for (na, a), (nb, b) in zip(s.named_params(), back.named_params()):
        assert na == nb
        np.testing.assert_array_equal(a.data, b.data)


def test_header_layout(tmp_path):
    vocab = Vocab(["a"])
    s = RationaleSystem("rnp", len(vocab), ModelConfig(d_emb=2, hidden=2), 0)
    path = tmp_path / "m.bin"
    checkpoint.save(path, s, vocab, "token")
    raw = path.read_bytes()
    assert raw[:7] == b"RATLAB1"
    (mlen,) = struct.unpack("<I", raw[7:11])
    (n,) = struct.unpack("<I", raw[11 + mlen:15 + mlen])
    assert n == len(s.named_params())
    total = sum(t.data.size for t in s.params())
    assert raw[-8 * total:] == b"".join(np.ascontiguousarray(t.data, "<f8").tobytes() for t in s.params())


def test_corrupt_files_rejected(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTRAT1xxxx")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(bad)
    vocab = Vocab(["a"])
    s = RationaleSystem("rnp", len(vocab), ModelConfig(d_emb=2, hidden=2), 0)
    good = tmp_path / "good.bin"
    checkpoint.save(good, s, vocab, "sentence")
    data = good.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(data[:-5])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "trunc.bin")
    (tmp_path / "long.bin").write_bytes(data + b"\0")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "long.bin")
