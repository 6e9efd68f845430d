"""OTNS v1 binary tensor format.

Layout: magic ``OTNS`` (4 bytes), version u8 = 1, dtype u8 = 0 (float32
little-endian), ndim u8 in 1..4, reserved u8 = 0, then ndim little-endian u32
extents, then the row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError
from .core import MAX_NDIM, Tensor

MAGIC = b"OTNS"
VERSION = 1
DTYPE_F32 = 0
HEADER_LEN = 8
SUFFIX = ".otns"


def to_bytes(t: Tensor) -> bytes:
    dims = t.dims
    head = MAGIC + bytes([VERSION, DTYPE_F32, len(dims), 0])
    head += struct.pack(f"<{len(dims)}I", *dims)
    return head + t.data.astype("<f4", copy=False).tobytes(order="C")


def from_bytes(buf: bytes) -> Tensor:
    n = len(buf)
    if n < 4:
        raise FormatError(f"truncated header: {n} bytes", n if n else 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if n < HEADER_LEN:
        raise FormatError("truncated header", n)
    if buf[4] != VERSION:
        raise FormatError(f"unsupported version {buf[4]}", 4)
    if buf[5] != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {buf[5]}", 5)
    ndim = buf[6]
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"ndim {ndim} outside 1..{MAX_NDIM}", 6)
    if buf[7] != 0:
        raise FormatError("reserved byte must be 0", 7)
    dims_end = HEADER_LEN + 4 * ndim
    if n < dims_end:
        raise FormatError("truncated extents", n)
    dims = struct.unpack_from(f"<{ndim}I", buf, HEADER_LEN)
    count = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError("zero extent", HEADER_LEN + 4 * i)
        count *= d
    # guards against extents whose product cannot possibly fit in the file
    need = dims_end + 4 * count
    if need > n:
        raise FormatError(f"truncated payload: need {need} bytes, have {n}", n)
    if need < n:
        raise FormatError("trailing bytes after payload", need)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end)
    return Tensor(data.astype(np.float32).reshape(dims), copy=True)


def write_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(t))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def write_array(path, arr) -> None:
    write_tensor(path, Tensor(arr))


def read_array(path) -> np.ndarray:
    return read_tensor(os.fspath(path)).data
