"""CDT1 binary tensor format.

Layout: the 4 magic bytes ``CDT1``, a little-endian u32 rank, ``rank``
little-endian u32 extents, then the row-major elements as little-endian
IEEE float32.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import ParameterError

MAGIC = b"CDT1"


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ParameterError("not a CDT1 buffer (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise ParameterError("truncated CDT1 header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise ParameterError(f"CDT1 payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
