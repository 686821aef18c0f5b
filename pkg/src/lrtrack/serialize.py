"""CTK1 parameter checkpoints.

Layout: the 4-byte magic ``CTK1`` followed by one record per parameter::

    uint32 name_len | name (utf-8) | uint32 rows | uint32 cols | float64[rows*cols]

All integers and floats are little-endian; records run to end of file.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CTK1"


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim != 2:
            raise CheckpointError(f"parameter {name!r} is not a matrix: shape {arr.shape}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<II", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a CTK1 checkpoint (bad magic)")
    pos = 4
    params: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            r, c = struct.unpack_from("<II", blob, pos)
            pos += 8
            nbytes = 8 * r * c
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated record for {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=r * c, offset=pos).reshape(r, c).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return params


def save(path, params: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
