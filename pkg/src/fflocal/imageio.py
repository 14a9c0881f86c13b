"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def _write(path: str | os.PathLike, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an ``[H,W,3]`` uint8 array."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"write_ppm expects uint8 [H,W,3], got {rgb.dtype} {rgb.shape}")
    _write(path, b"P6", rgb)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an ``[H,W]`` uint8 array."""
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"write_pgm expects uint8 [H,W], got {gray.dtype} {gray.shape}")
    _write(path, b"P5", gray)


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    vals: list[int] = []
    pos = 2
    while len(vals) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed PNM header")
        vals.append(int(data[start:pos]))
    return vals, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    """Read P5 or P6; returns uint8 ``[H,W]`` or ``[H,W,3]``."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    (w, h, maxval), start = _tokens(data, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=start)
    return raster.reshape((h, w, 3) if channels == 3 else (h, w))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[C,H,W]`` reals in [0,1] -> ``[H,W,C]`` uint8 (round half up)."""
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def load_image(path) -> np.ndarray:
    """PPM -> float32 ``[3,H,W]`` in [0,1]."""
    raw = read_pnm(path)
    return (raw.transpose(2, 0, 1).astype(np.float32) / 255.0)


def load_mask(path) -> np.ndarray:
    """PGM -> float32 ``[1,H,W]`` of {0,1} (pristine = 1)."""
    raw = read_pnm(path)
    return (raw > 127).astype(np.float32)[None]


def save_image(path, img: np.ndarray) -> None:
    write_ppm(path, to_uint8(img))


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).reshape(mask.shape[-2:])
    write_pgm(path, np.where(m > 0.5, 255, 0).astype(np.uint8))
