"""Binary parameter checkpoints.

Layout (little-endian)::

    b"EVAW"  u16 version
    repeated until EOF:
        u16 name_length, UTF-8 name, u8 rank, u32 dims[rank], f64 payload
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"EVAW"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(params: Mapping[str, Tensor | np.ndarray], path) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 6:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}

    def need(n: int) -> None:
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated record at offset {pos}")

    while pos < len(buf):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(8 * count)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        if name in out:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr.astype(np.float64)
    return out
