"""Flat binary checkpoint format.

Layout: the magic bytes ``LAGA1`` followed by one record per named array::

    u32 name_length | utf-8 name | u32 rank | u32 dims[rank] | f64 payload

All integers and floats are little-endian. Records run until end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import FormatError

MAGIC = b"LAGA1"


def dumps(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, value in arrays.items():
        a = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint: bad magic", offset=0)
    pos = len(MAGIC)
    out: Dict[str, np.ndarray] = {}

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint", offset=pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", read(4))
        name = read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}I", read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(read(8 * count), dtype="<f8").astype(np.float64)
        out[name] = payload.reshape(dims)
    return out


def save(path, arrays: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
