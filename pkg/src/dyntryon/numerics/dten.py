"""DTEN binary tensor dump.

Layout (little-endian): magic ``b"DTEN"``, u32 version (1), u8 dtype
(0 = f32, 1 = f64), u32 rank, rank x u64 dims, then the raw payload in
C order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"DTEN"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class DtenFormatError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise DtenFormatError("bad magic")
    version, code, rank = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise DtenFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise DtenFormatError(f"unknown dtype code {code}")
    offset = 4 + 9
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(dims)) if dims else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise DtenFormatError("payload length does not match header")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
