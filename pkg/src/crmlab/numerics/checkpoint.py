"""Binary tensor checkpoints.

Layout: the 8-byte magic ``CRMCKPT1`` followed by records until EOF. Each
record is ``name_len:u64 | name:utf-8 | rows:u64 | cols:u64 | payload`` with a
row-major little-endian float32 payload of ``rows * cols`` values. Metadata is
carried as zero-sized records named ``meta:<key>=<value>``. 1-D tensors are
written as a single row.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CRMCKPT1"
_META = "meta:"
_U64 = struct.Struct("<Q")


def _write_record(buf, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(_U64.pack(len(raw)))
    buf.write(raw)
    buf.write(_U64.pack(arr.shape[0]))
    buf.write(_U64.pack(arr.shape[1]))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for key, value in (meta or {}).items():
        if "=" in key:
            raise ValueError(f"metadata key may not contain '=': {key!r}")
        _write_record(buf, f"{_META}{key}={value}", np.zeros((0, 0), np.float32))
    for name, arr in tensors.items():
        if name.startswith(_META):
            raise ValueError(f"tensor name may not start with {_META!r}")
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[None, :]
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim != 2:
            raise ValueError(f"{name}: only 0-2 dimensional tensors can be stored, got {arr.shape}")
        _write_record(buf, name, arr)
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if data[:8] != MAGIC:
        raise ValueError("not a CRMCKPT1 checkpoint (bad magic)")
    pos = 8
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}

    def read_u64():
        nonlocal pos
        if pos + 8 > len(data):
            raise ValueError(f"truncated checkpoint at byte {pos}")
        (v,) = _U64.unpack_from(data, pos)
        pos += 8
        return v

    while pos < len(data):
        n = read_u64()
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        rows, cols = read_u64(), read_u64()
        nbytes = rows * cols * 4
        if pos + nbytes > len(data):
            raise ValueError(f"truncated payload for tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += nbytes
        if name.startswith(_META):
            key, _, value = name[len(_META):].partition("=")
            meta[key] = value
        else:
            tensors[name] = arr.astype(np.float32)
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    Path(path).write_bytes(dumps(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return loads(Path(path).read_bytes())
