"""Versioned binary checkpoints.

Layout (all integers little-endian u32): magic ``MVCB``, version, entry
count, then per entry: name length + UTF-8 name, ndim, dims, float64
little-endian row-major payload. Entries keep the parameter declaration
order, so identical parameters serialize byte-identically everywhere.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MVCB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(params))
    for name, value in params.items():
        data = np.ascontiguousarray(
            value.data if hasattr(value, "data") else value, dtype="<f8"
        )
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes(order="C")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        n_bytes = 8 * int(np.prod(shape)) if ndim else 8
        data = np.frombuffer(raw, dtype="<f8", count=n_bytes // 8, offset=offset)
        offset += n_bytes
        out[name] = data.reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise CheckpointError("trailing bytes in checkpoint")
    return out
