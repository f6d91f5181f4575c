"""Binary tensor container and deterministic file helpers.

Container layout: magic ``PCXT``, version byte 0x01, dtype byte 0x01
(float32 little-endian), ndim byte, ndim u64 little-endian dims, then the
raw row-major payload. All writes go through a temp-file-then-rename step
so readers never observe partial files and repeated runs are byte-stable.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"PCXT"
VERSION = 0x01
DTYPE_F32 = 0x01


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write a float32 tensor to `path` in the PCXT container format."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise InputError("refusing to write non-finite tensor", path=str(path))
    header = MAGIC + bytes([VERSION, DTYPE_F32, arr.ndim])
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    atomic_write_bytes(path, header + arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a PCXT tensor. Rejects bad magic, truncation and non-finite data."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read tensor file: {exc}", path=str(path)) from exc
    if len(blob) < 7:
        raise InputError("tensor file shorter than header", path=str(path), offset=len(blob))
    if blob[:4] != MAGIC:
        raise InputError("bad magic bytes", path=str(path), offset=0)
    if blob[4] != VERSION:
        raise InputError(f"unsupported version {blob[4]}", path=str(path), offset=4)
    if blob[5] != DTYPE_F32:
        raise InputError(f"unsupported dtype byte {blob[5]}", path=str(path), offset=5)
    ndim = blob[6]
    head_end = 7 + 8 * ndim
    if len(blob) < head_end:
        raise InputError("truncated dim table", path=str(path), offset=len(blob))
    shape = tuple(struct.unpack("<Q", blob[7 + 8 * i : 15 + 8 * i])[0] for i in range(ndim))
    count = 1
    for d in shape:
        if d <= 0:
            raise InputError("non-positive dimension", path=str(path), shape=list(shape))
        count *= d
    expected = head_end + 4 * count
    if len(blob) != expected:
        raise InputError(
            "payload length mismatch",
            path=str(path),
            offset=len(blob),
            expected_bytes=expected,
        )
    arr = np.frombuffer(blob[head_end:], dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise InputError("non-finite value in tensor", path=str(path), flat_index=bad)
    return arr


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    """Canonical JSON: sorted keys, fixed separators, repr floats (round-trip exact)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, dump_json(obj) + "\n")


def read_json(path: str | Path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read JSON file: {exc}", path=str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc.msg}", path=str(path), offset=exc.pos) from exc
