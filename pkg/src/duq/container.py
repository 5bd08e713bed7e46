"""Flat binary container for named float64 arrays.

Layout (little-endian)::

    magic        4 bytes   b"DUQT" (dataset tensors) or b"DUQP" (parameters)
    version      uint32
    meta_len     uint32    length of the UTF-8 JSON metadata block
    meta         bytes
    n_entries    uint32
    per entry:
        name_len uint16, name (UTF-8)
        ndim     uint32
        extents  uint64 * ndim
        data     float64 * prod(extents), row-major
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

VERSION = 1
TENSOR_MAGIC = b"DUQT"
PARAM_MAGIC = b"DUQP"


class ContainerError(ValueError):
    pass


def write_container(path, magic: bytes, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [magic, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    _atomic_write(path, b"".join(chunks))


def read_container(path, magic: bytes) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise ContainerError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")
    pos = 4
    version, meta_len = struct.unpack_from("<II", buf, pos)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    pos += 8
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(buf):
            raise ContainerError(f"{path}: truncated entry {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return arrays, meta


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
