"""Binary feature-archive format (MMLF).

Layout, little-endian throughout:

    magic  b"MMLF"
    u32    format version (currently 1)
    u32    record count
    per record:
        u32      key length in bytes
        bytes    key (UTF-8)
        u32      ndim
        u32*ndim dims
        f32*prod(dims) values

Values are stored as IEEE-754 binary32; records keep that dtype in memory
so a write/read cycle is bit-exact. Writers are single-writer; readers may
share the resulting records freely.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MMLF"
VERSION = 1


class ArchiveError(Exception):
    """Base class for archive format errors."""


class BadMagicError(ArchiveError):
    """File does not start with the MMLF magic bytes."""


class UnsupportedVersionError(ArchiveError):
    """File declares a format version this reader does not understand."""


class TruncatedArchiveError(ArchiveError):
    """File ended before the declared records were fully read."""


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor: flat float32 values plus a row-major shape."""

    key: str
    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"record {self.key!r}: non-positive dim in shape {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "data", data)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if data.size != n:
            raise ValueError(
                f"record {self.key!r}: shape {shape} implies {n} values, got {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError(f"record {self.key!r}: non-finite values")

    @classmethod
    def from_array(cls, key: str, values) -> "TensorRecord":
        arr = np.asarray(values, dtype=np.float32)
        return cls(key=key, shape=tuple(arr.shape), data=arr.reshape(-1))

    def as_array(self) -> np.ndarray:
        """Values reshaped to ``shape``, promoted to float64 for computation."""
        return self.data.astype(np.float64).reshape(self.shape)


def write_archive(records: Sequence[TensorRecord], path) -> None:
    keys = [r.key for r in records]
    if len(set(keys)) != len(keys):
        dup = sorted(k for k in set(keys) if keys.count(k) > 1)[0]
        raise ValueError(f"duplicate archive key {dup!r}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for rec in records:
            kb = rec.key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<I", len(rec.shape)))
            for dim in rec.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(rec.data.astype("<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedArchiveError(f"truncated archive: expected {n} bytes for {what}")
    return buf


def read_archive(path) -> list[TensorRecord]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported archive version {version}")
        records = []
        for i in range(count):
            (klen,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} key length"))
            key = _read_exact(fh, klen, f"record {i} key").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} ndim"))
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(fh, 4 * ndim, f"record {i} dims")
            )
            n = 1
            for dim in shape:
                n *= dim
            raw = _read_exact(fh, 4 * n, f"record {i} ({key}) values")
            data = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            records.append(TensorRecord(key=key, shape=tuple(shape), data=data))
        trailing = fh.read(1)
        if trailing:
            raise ArchiveError("trailing bytes after final record")
    return records


def load_archive_index(path) -> dict[str, TensorRecord]:
    """Read an archive into a key -> record mapping."""
    return {rec.key: rec for rec in read_archive(path)}

