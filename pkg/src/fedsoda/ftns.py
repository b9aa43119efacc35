"""FTNS tensor files: a tiny self-describing little-endian array format.

Layout::

    b"FTNS" | u8 version=1 | u8 dtype (1=f32, 2=f64) | u8 ndim | u8 0
    | ndim x u32 dims | row-major values
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"FTNS"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FTNSError(ValueError):
    """Malformed or unsupported FTNS data."""


def dumps(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise FTNSError(f"unsupported dtype {array.dtype}; only float32/float64 are stored")
    if array.ndim > 255:
        raise FTNSError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, array.ndim, 0)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def loads_from(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the offset just past it."""
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise FTNSError("truncated FTNS header")
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FTNSError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise FTNSError(f"unsupported FTNS version {version}")
    if code not in _DTYPES:
        raise FTNSError(f"unknown dtype code {code}")
    pos = offset + 8
    if len(buf) - pos < 4 * ndim:
        raise FTNSError("truncated FTNS shape")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FTNSError(f"truncated FTNS data: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def loads(buf: bytes) -> np.ndarray:
    arr, end = loads_from(buf)
    if end != len(buf):
        raise FTNSError(f"{len(buf) - end} trailing bytes after tensor")
    return arr


def write_ftns(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def read_ftns(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
