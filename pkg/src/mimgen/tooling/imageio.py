"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim != 3 or p.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB pixels, got {p.shape}")
    return np.round(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    data = to_bytes(pixels)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    if blob[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (missing P6 magic)")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"malformed PPM header fields {fields!r}") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    need = w * h * 3
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"PPM raster truncated: {len(raster)} of {need} bytes")
    return (np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)


def write_image(pixels: np.ndarray, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(encode_ppm(pixels))
    return path


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
