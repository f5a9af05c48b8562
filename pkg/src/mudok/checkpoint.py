"""Named-tensor container (``MDKC``) with a JSON config sidecar.

Layout: magic ``MDKC`` | u32 version | u32 tensor_count, then per tensor
u16 name_len | UTF-8 name | u8 dtype (0 = f32) | u8 rank | rank x u64 dims |
row-major little-endian payload. The sidecar sits next to it with suffix ``.json``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MDKC"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def _encode(tensors: Mapping[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps rank 0
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], config: dict | None = None) -> Path:
    path = Path(path)
    if len(set(tensors)) != len(tensors):
        raise CheckpointError("tensor names must be unique")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(tensors))
    side = {
        "format_version": VERSION,
        "config": config or {},
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
    }
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_container(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated or corrupt at byte {pos} (need {n} more)")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an MDKC checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2))
        if dtype_code not in DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[dtype_code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(size), dtype=dt).reshape(dims).copy()
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        out[name] = torch.from_numpy(arr)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_checkpoint(
    path: str | Path, expected_shapes: Mapping[str, tuple[int, ...]] | None = None
) -> tuple[dict[str, torch.Tensor], dict]:
    """Read tensors and sidecar config, checking shapes against both the sidecar
    and (optionally) a caller-supplied expectation."""
    tensors = read_container(path)
    side_file = sidecar_path(path)
    if not side_file.exists():
        raise CheckpointError(f"{path}: missing config sidecar {side_file.name}")
    side = json.loads(side_file.read_text(encoding="utf-8"))
    if side.get("format_version") != VERSION:
        raise CheckpointError(f"{side_file}: unsupported format_version {side.get('format_version')}")
    declared = side.get("tensors", {})
    if set(declared) != set(tensors):
        raise CheckpointError(f"{path}: sidecar tensor list does not match container")
    for name, t in tensors.items():
        if list(t.shape) != list(declared[name]):
            raise CheckpointError(f"{path}: tensor {name!r} has shape {list(t.shape)}, sidecar says {declared[name]}")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"shape mismatch for tensor {name!r}: checkpoint {tuple(tensors[name].shape)}, expected {tuple(shape)}"
                )
    return tensors, side.get("config", {})
