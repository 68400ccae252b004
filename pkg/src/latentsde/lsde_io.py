"""The LSDE array format and JSON helpers.

Layout (little endian): ``b"LSDE"``, version ``u32``, rows ``u32``, cols ``u32``,
then ``rows * cols`` float64 values in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NotFoundError

MAGIC = b"LSDE"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_array(path, array) -> None:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InvalidInputError(f"LSDE arrays are 2-D, got shape {a.shape}")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_array(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise InvalidInputError(f"{path}: expected {rows * cols} values, file holds {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such file: {path}")
    return json.loads(path.read_text())
