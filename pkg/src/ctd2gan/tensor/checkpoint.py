"""``CTDG`` tensor container: a flat, named, little-endian dump of arrays.

Layout: ``b"CTDG"``, u32 version, u32 entry count, then per entry a u16 name
length, the UTF-8 name, a dtype byte (0 = f32, 1 = f64), a u8 rank, u32
extents and the raw values.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTDG"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class CheckpointError(ValueError):
    """Malformed, truncated or unsupported checkpoint file."""


def dumps(tensors: dict[str, np.ndarray], dtype="f8") -> bytes:
    store = np.dtype(dtype).newbyteorder("<")
    if store not in _CODES:
        raise ValueError(f"unsupported storage dtype {dtype!r}; use f4 or f8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[store], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=store).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, file has {len(blob)}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a CTDG checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for entry {name!r} at offset {pos - 2}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return out


def save(path, tensors: dict[str, np.ndarray], dtype="f8") -> None:
    Path(path).write_bytes(dumps(tensors, dtype))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
