"""Flat binary tensor format.

Layout: magic ``ECT1``, u8 dtype code, u8 rank, rank x u64 little-endian dims,
then the elements as raw little-endian bytes in row-major order.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"ECT1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def write_tensor(stream: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", code, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor: wanted {n} bytes, got {len(buf)}")
    return buf


def read_array(stream: BinaryIO) -> np.ndarray:
    if _read_exact(stream, 4) != MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack("<BB", _read_exact(stream, 2))
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    dt = DTYPE_CODES[code]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(stream, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def read_tensor(stream: BinaryIO) -> Tensor:
    return Tensor(read_array(stream))


def tensor_to_bytes(t) -> bytes:
    import io
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    import io
    return read_tensor(io.BytesIO(raw))
