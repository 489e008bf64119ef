"""Portable tensor files.

Single tensor ("SGT1"): magic, u32 rank, u64 per-dim sizes, then the payload
as little-endian float64 in row-major order. Bundles ("SGB1") hold a count
followed by (u16 name length, utf-8 name, embedded SGT1 record) entries and
back checkpoints and golden tests.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC_TENSOR = b"SGT1"
MAGIC_BUNDLE = b"SGB1"


class FormatError(ValueError):
    """File does not follow the SGT1/SGB1 layout."""


def _encode_tensor(arr):
    # ascontiguousarray would promote rank-0 arrays to rank 1
    arr = np.asarray(arr, dtype="<f8")
    header = MAGIC_TENSOR + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + arr.tobytes()


def _decode_tensor(buf, offset=0):
    if buf[offset:offset + 4] != MAGIC_TENSOR:
        raise FormatError("bad tensor magic")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return arr.reshape(dims).astype(np.float64), offset


def write_tensor(path, arr):
    Path(path).write_bytes(_encode_tensor(arr))


def read_tensor(path):
    arr, _ = _decode_tensor(Path(path).read_bytes())
    return arr


def write_bundle(path, tensors):
    """Write an ordered {name: array} mapping as one SGB1 file."""
    parts = [MAGIC_BUNDLE, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_encode_tensor(arr))
    Path(path).write_bytes(b"".join(parts))


def read_bundle(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC_BUNDLE:
        raise FormatError("bad bundle magic")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        arr, offset = _decode_tensor(buf, offset)
        out[name] = arr
    return out
