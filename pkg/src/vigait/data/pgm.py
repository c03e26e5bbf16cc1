"""Binary (P5) 8-bit PGM reading and writing."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class PgmFormatError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        image = image.astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PgmFormatError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _tokens(data, 4)
    if tokens[0] != b"P5":
        raise PgmFormatError(f"{os.fspath(path)}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PgmFormatError(f"{os.fspath(path)}: bad header") from exc
    if maxval > 255:
        raise PgmFormatError(f"{os.fspath(path)}: only 8-bit PGM is supported (maxval {maxval})")
    raster = data[offset : offset + w * h]
    if len(raster) != w * h:
        raise PgmFormatError(f"{os.fspath(path)}: expected {w * h} pixels, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        img = (img.astype(np.uint16) * 255 // maxval).astype(np.uint8)
    return img.copy()
