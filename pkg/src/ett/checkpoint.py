"""Named-tensor container used for backbone checkpoints and episode dumps.

Layout (all integers little-endian)::

    magic   8 bytes   b"ETTNT\\x00\\x01\\x00"
    count   u32
    then, per tensor, in lexicographic name order:
        name_len u32, name utf-8 bytes
        dtype    u8      (0 = float32, 1 = float64)
        ndim     u32, then ndim x u32 extents
        payload  row-major little-endian values
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ETTNT\x00\x01\x00"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"float32": 0, "float64": 1}


class CheckpointError(ValueError):
    pass


def dumps(tensors, dtype="float32"):
    code = _CODES[dtype]
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=_DTYPES[code])
        raw_name = name.encode("utf-8")
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<BI", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    return bytes(out)


def loads(blob):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a named-tensor container (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BI", blob, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape)
            pos += n * dt.itemsize
            tensors[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt container: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def save(path, tensors, dtype="float32"):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, dtype=dtype))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
