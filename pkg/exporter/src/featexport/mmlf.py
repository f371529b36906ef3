"""Writer for the MMLF feature-archive format.

Implemented from the published byte layout so this package needs nothing
from the consumer beyond the format itself:

    magic b"MMLF" | u32 version=1 | u32 record count   (little-endian)
    per record: u32 key length | key UTF-8 | u32 ndim | u32*ndim dims
                | f32*prod(dims) values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MMLF"
VERSION = 1


def write_mmlf(records: Sequence[tuple[str, np.ndarray]], path) -> None:
    """Write (key, array) pairs; keys must be unique, values finite."""
    keys = [k for k, _ in records]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate archive keys")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for key, values in records:
            arr = np.ascontiguousarray(values, dtype="<f4")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"record {key!r}: non-finite values")
            kb = key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())
