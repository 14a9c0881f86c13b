"""Binary checkpoint format.

Layout (little-endian): magic ``FFLC``, u32 version, u32 tensor count, then
per tensor u16 name length, UTF-8 name, u8 rank, u32 dims, float32 data.
The remainder of the file is a UTF-8 ``key=value`` block.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FFLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}; checkpoints store float32")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"meta entry {k!r} cannot be stored")
    parts.append("".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode("utf-8"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(buf, "<f4", size, pos).astype(np.float32).reshape(shape)
            pos += 4 * size
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header ({e})") from None
    meta = {}
    for line in buf[pos:].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    return tensors, meta
