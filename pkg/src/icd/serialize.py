"""ICDT tensor container.

Layout, all integers little-endian::

    b"ICDT"  | version: u8 (=1) | rank: u8 | extents: rank x u64 | data: prod(extents) x f64

Blobs are self-delimiting, so several can be written back to back.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"ICDT"
VERSION = 1


def encode(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if arr.ndim > 255:
        raise FormatError("rank too large for ICDT")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def write_tensor(fh: BinaryIO, array) -> None:
    fh.write(encode(array))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    start = fh.tell() if fh.seekable() else 0
    head = fh.read(6)
    if len(head) != 6 or head[:4] != MAGIC:
        raise FormatError(f"bad ICDT header at byte {start}")
    version, rank = head[4], head[5]
    if version != VERSION:
        raise FormatError(f"unsupported ICDT version {version}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise FormatError(f"truncated ICDT extents at byte {start}")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape)) if rank else 1
    body = fh.read(8 * count)
    if len(body) != 8 * count:
        raise FormatError(f"truncated ICDT data at byte {start}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)


def save(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
