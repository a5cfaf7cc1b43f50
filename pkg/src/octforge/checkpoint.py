"""Binary checkpoint archive of named float32 tensors.

Layout (all integers little-endian)::

    b"OCTF" | u32 version=1 | u32 count
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 dim | float32 data )
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"OCTF"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"rank too large for {name}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16:
        raise CheckpointFormatError("checkpoint truncated: header incomplete")
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointFormatError("checkpoint CRC mismatch (corrupt or truncated file)")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(body):
                raise CheckpointFormatError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"checkpoint truncated: {exc}") from None
    if pos != len(body):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return out


def save(tensors: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return decode(Path(path).read_bytes())


def pack_u64(value: int) -> np.ndarray:
    """64-bit integer as four 16-bit chunks (each exact in float32)."""
    value &= 0xFFFFFFFFFFFFFFFF
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float32)


def unpack_u64(arr: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(np.asarray(arr).reshape(-1)))


def pack_f64(value: float) -> np.ndarray:
    """Bit pattern of a float64, via :func:`pack_u64`."""
    return pack_u64(struct.unpack("<Q", struct.pack("<d", float(value)))[0])


def unpack_f64(arr: np.ndarray) -> float:
    return struct.unpack("<d", struct.pack("<Q", unpack_u64(arr)))[0]
