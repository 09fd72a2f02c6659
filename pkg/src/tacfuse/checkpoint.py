"""Checkpoint serialization.

Binary layout, little-endian throughout:

    magic   8 bytes  b"RTACKPT1"
    count   u32      number of named records
    record  u16 name length, UTF-8 name,
            u8 dtype code (0 = float32, 1 = float64),
            u8 rank, rank x u64 extents,
            raw values in row-major order

Optimizer moments ride along under the parameter name suffixed ".m1"
and ".m2"; the step counter and any auxiliary arrays (normalization
stats) are plain named records.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTACKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def write_records(path: str | Path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"record '{name}' has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:8]!r}, expected {MAGIC!r}")
    off = 8

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {off}")
        out = buf[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4, "record count"))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPES:
            raise CheckpointError(f"record '{name}': unknown dtype code {code} at offset {off - 2}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        dtype = _DTYPES[code]
        n_items = int(np.prod(shape)) if rank else 1
        raw = take(n_items * dtype.itemsize, f"payload of '{name}'")
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after last record at offset {off}")
    return records
