"""Binary checkpoint container.

Layout (little-endian)::

    b"MMDGCKPT"  u8 version
    u32 entry count, then per entry: u16 name length, UTF-8 name, u8 ndim, u32 dims...
    float64 payloads in entry order
    u32 metadata length, UTF-8 JSON metadata
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMDGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = [MAGIC, struct.pack("<BI", VERSION, len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
                      + struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr).tobytes())
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payload))
        fh.write(struct.pack("<I", len(meta_raw)) + meta_raw)
    tmp.replace(path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<BI", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 13
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    (mlen,) = struct.unpack_from("<I", raw, pos)
    meta = json.loads(raw[pos + 4:pos + 4 + mlen].decode("utf-8"))
    return arrays, meta
