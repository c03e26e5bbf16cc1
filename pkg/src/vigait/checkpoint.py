"""Versioned binary checkpoints.

Layout (little-endian)::

    b"VIGE" | u32 version | u32 len | config UTF-8 JSON
    repeated: u32 name_len | name | u32 rank | u64 dims[rank] | f64 data
    u32 CRC32 of every preceding byte

The JSON text carries the model/train configuration, iteration counter and
sampler RNG state; tensors carry parameters (``param/``) and Adam state
(``adam.m/``, ``adam.v/``, ``adam.t/``).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VIGE"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    iteration: int = 0
    rng_state: dict | None = None
    version: int = VERSION

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        for kind in ("m", "v", "t"):
            for k, v in self.moments.get(kind, {}).items():
                out[f"adam.{kind}/{k}"] = v
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {"config": ckpt.config, "iteration": ckpt.iteration, "rng_state": ckpt.rng_state}
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(text)), text]
    for name, arr in ckpt.tensors().items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checkpoint is truncated or corrupt (CRC mismatch)")
    try:
        (text_len,) = struct.unpack_from("<I", body, 8)
        pos = 12 + text_len
        header = json.loads(body[12:pos].decode("utf-8"))
        tensors = {}
        while pos < len(body):
            (name_len,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + name_len].decode("utf-8")
            pos += 4 + name_len
            (rank,) = struct.unpack_from("<I", body, pos)
            dims = struct.unpack_from(f"<{rank}Q", body, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(body):
                raise CheckpointFormatError(f"record {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from exc

    params, moments = {}, {"m": {}, "v": {}, "t": {}}
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind.startswith("adam.") and kind[5:] in moments:
            moments[kind[5:]][key] = arr
        else:
            raise CheckpointFormatError(f"unknown record {name!r}")
    return Checkpoint(header["config"], params, moments, header["iteration"], header["rng_state"], version)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
