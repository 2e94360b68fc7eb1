"""Named tensor archive (``.jtrk``).

Layout, all little-endian::

    b"JTRK" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype tag | u8 rank
               | rank x u64 dims | raw scalar payload
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"JTRK"
VERSION = 1

# tag 0 is the float32 payload checkpoints use; the others carry dataset
# integers, flags and float64 oracle values.
DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<i4"),
}
_TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class ArchiveError(ValueError):
    pass


def _tag(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt == np.bool_:
        return 3
    for tag, ref in DTYPE_TAGS.items():
        if dt == ref:
            return tag
    raise ArchiveError(f"unsupported dtype {arr.dtype}")


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ArchiveError("bad magic bytes")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + n].decode("utf-8")
        off += n
        tag, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if tag not in DTYPE_TAGS:
            raise ArchiveError(f"unknown dtype tag {tag} for {name}")
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(blob):
            raise ArchiveError(f"truncated payload for {name}")
        out[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(blob):
        raise ArchiveError("trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
