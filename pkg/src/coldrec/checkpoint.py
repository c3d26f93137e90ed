"""Binary checkpoint format for parameter tensors plus JSON metadata.

Layout (all integers little-endian):

    magic   4 bytes            b"CGNN"
    version u32                currently 1
    records, repeated:
        name_len u32           0 terminates the record stream
        name     UTF-8 bytes
        rank     u32
        dims     rank * u64
        data     row-major float32
    meta_len u64
    metadata UTF-8 JSON

Tensors are stored as 32-bit floats. Saving through this module quantizes
the live float64 state to its float32 representation, so a save/load
round-trip is bitwise exact and a resumed run replays an uninterrupted one.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"CGNN"
VERSION = 1


def write_checkpoint(path: str, tensors: dict, metadata: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        blob += struct.pack("<I", len(name_b))
        blob += name_b
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.astype("<f4").tobytes(order="C")
    blob += struct.pack("<I", 0)
    meta_b = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(meta_b))
    blob += meta_b
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_checkpoint(path: str):
    """Returns (tensors as float64 arrays, metadata dict); never partial."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from None
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    while True:
        name_len = r.u32()
        if name_len == 0:
            break
        name = r.take(name_len).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        count = 1
        for d in dims:
            count *= d
        raw = r.take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    meta_len = r.u64()
    meta_raw = r.take(meta_len)
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after metadata")
    try:
        metadata = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad metadata block: {e}") from None
    return tensors, metadata


def quantize(arr: np.ndarray) -> np.ndarray:
    """The float64 value a tensor will hold after a save/load round trip."""
    return np.asarray(arr).astype("<f4").astype(np.float64)
