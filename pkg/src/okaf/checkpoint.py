"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"OKAF" | version u32 | count u64
    count x ( name_len u32 | name utf-8 | rank u32 | dims u64 * rank | payload f64 * prod(dims) )
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"OKAF"
VERSION = 1


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValidationError("not an OKAF checkpoint (bad magic)")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            if off + 8 * n > len(blob):
                raise ValidationError(f"truncated checkpoint: payload of {name!r} is cut short")
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
            off += 8 * n
            out[name] = arr.reshape(shape)
    except struct.error as exc:
        raise ValidationError(f"truncated checkpoint: {exc}") from None
    if off != len(blob):
        raise ValidationError("trailing bytes after last checkpoint record")
    return out


def save(path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
