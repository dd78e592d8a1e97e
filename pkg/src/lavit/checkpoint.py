"""Binary checkpoints.

Layout (all integers little-endian)::

    b"LAVT" | u32 version=1 | u32 config length | config JSON (UTF-8)
    u32 tensor count | tensor records...

Each tensor record is ``u32 name length | UTF-8 name | u32 rank |
u64 × rank shape | float64 payload (row-major)``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from lavit.config import ModelConfig
from lavit.model import LaViTModel, ParameterStore

MAGIC = b"LAVT"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.require(arr, dtype="<f8", requirements="C")  # keeps rank 0
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def _read(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def decode_tensor(f: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read(f, 4, "tensor name length"))
    name = _read(f, name_len, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read(f, 4, f"rank of {name}"))
    shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank, f"shape of {name}"))
    count = int(np.prod(shape)) if rank else 1
    payload = _read(f, 8 * count, f"payload of {name}")
    return name, np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def write_checkpoint(path: str | Path, config: ModelConfig, params: ParameterStore) -> None:
    cfg = config.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            f.write(encode_tensor(name, t.data))


def read_checkpoint(path: str | Path) -> LaViTModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        (cfg_len,) = struct.unpack("<I", _read(f, 4, "config length"))
        config = ModelConfig.from_json(_read(f, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read(f, 4, "tensor count"))
        store = ParameterStore()
        for _ in range(count):
            name, arr = decode_tensor(f)
            store.add(name, arr)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    return LaViTModel(config, store)
