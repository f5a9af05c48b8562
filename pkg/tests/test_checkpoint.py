import json
import struct

import pytest
import torch
from conftest import make_toy_kg

from mudok.checkpoint import CheckpointError, load_checkpoint, read_container, save_checkpoint, sidecar_path
from mudok.encoder import EncoderConfig, ItemEncoder
from mudok.pretrain import load_encoder, save_encoder


def _tensors():
    g = torch.Generator().manual_seed(0)
    return {"a": torch.randn(3, 4, generator=g), "b.c": torch.randn(5, generator=g), "scalar": torch.tensor(2.5)}


def test_save_load_save_byte_identical(tmp_path):
    p1 = save_checkpoint(tmp_path / "one.mdkc", _tensors(), {"k": 1})
    tensors, cfg = load_checkpoint(p1)
    p2 = save_checkpoint(tmp_path / "two.mdkc", tensors, cfg)
    assert p1.read_bytes() == p2.read_bytes()
    assert sidecar_path(p1).read_bytes() == sidecar_path(p2).read_bytes()
    for k, v in _tensors().items():
        assert torch.equal(tensors[k], v)


def test_encoder_round_trip(tmp_path):
    kg, _ = make_toy_kg()
    enc = ItemEncoder(EncoderConfig(d_feat=16, d_model=8, heads=2, n_relations=kg.n_relations), seed=4)
    p1 = save_encoder(tmp_path / "enc.mdkc", enc)
    back, cfg, extra = load_encoder(p1)
    assert not extra and cfg["encoder"] == enc.config.to_dict()
    p2 = save_encoder(tmp_path / "enc2.mdkc", back)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    p = save_checkpoint(tmp_path / "t.mdkc", _tensors())
    data = p.read_bytes()
    for cut in (3, 10, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            read_container(p)


def test_trailing_bytes_rejected(tmp_path):
    p = save_checkpoint(tmp_path / "t.mdkc", _tensors())
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_container(p)


def test_bad_magic_and_version(tmp_path):
    p = save_checkpoint(tmp_path / "t.mdkc", _tensors())
    data = p.read_bytes()
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_container(p)
    p.write_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        read_container(p)


def test_sidecar_shape_disagreement(tmp_path):
    p = save_checkpoint(tmp_path / "t.mdkc", _tensors())
    side = json.loads(sidecar_path(p).read_text())
    side["tensors"]["a"] = [4, 3]
    sidecar_path(p).write_text(json.dumps(side))
    with pytest.raises(CheckpointError, match="'a'"):
        load_checkpoint(p)


def test_missing_sidecar(tmp_path):
    p = save_checkpoint(tmp_path / "t.mdkc", _tensors())
    sidecar_path(p).unlink()
    with pytest.raises(CheckpointError, match="sidecar"):
        load_checkpoint(p)


def test_wrong_width_names_tensor(tmp_path):
    enc = ItemEncoder(EncoderConfig(d_model=128, n_relations=3), seed=0)
    p = save_encoder(tmp_path / "wide.mdkc", enc)
    with pytest.raises(CheckpointError, match="W_proj"):
        load_encoder(p, EncoderConfig(d_model=64, n_relations=3))


def test_duplicate_names_rejected(tmp_path):
    p = save_checkpoint(tmp_path / "t.mdkc", {"x": torch.zeros(1)})
    data = bytearray(p.read_bytes())
    body = data[12:]
    data[8:12] = struct.pack("<I", 2)
    p.write_bytes(bytes(data) + bytes(body))
    with pytest.raises(CheckpointError, match="duplicate"):
        read_container(p)
