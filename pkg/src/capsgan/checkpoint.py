"""Checkpoint container: a single binary file holding named float32 tensors.

Layout, all integers little-endian:

    magic  4 bytes  "CPSG"
    u32    format version (currently 1)
    u32    tensor count
    per tensor:
        u16    name byte length, then that many UTF-8 bytes
        u8     rank
        u32    extent per axis
        f32    row-major data
    u32    CRC-32 of everything between the version field and the CRC

The run configuration and step counter travel as two reserved tensors,
"__config__" (config text bytes widened to f32) and "__step__".
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"CPSG"
VERSION = 1
_RESERVED = ("__config__", "__step__")


class CheckpointError(Exception):
    pass


def _tensor_block(name, arr):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {name!r}")
    # not ascontiguousarray: that would widen rank-0 tensors to rank 1
    arr = np.asarray(arr).astype("<f4", copy=False)
    if arr.ndim > 0xFF:
        raise CheckpointError(f"rank {arr.ndim} too large for {name!r}")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, arrays, config_text="", step=0):
    """Write named tensors plus config snapshot and step counter.  Arrays
    are stored as float32; names are sorted so identical state gives
    identical bytes."""
    for name in _RESERVED:
        if name in arrays:
            raise CheckpointError(f"{name} is a reserved tensor name")
    seen = set()
    items = []
    for name in sorted(arrays):
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        items.append((name, np.asarray(arrays[name])))
    items.append(("__config__", np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8).astype(np.float32)))
    items.append(("__step__", np.array([float(step)], dtype=np.float32)))

    body = struct.pack("<I", len(items))
    for name, arr in items:
        body += _tensor_block(name, arr)
    blob = MAGIC + struct.pack("<I", VERSION) + body
    blob += struct.pack("<I", zlib.crc32(struct.pack("<I", VERSION) + body) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.at = 0

    def take(self, n, what):
        if self.at + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        piece = self.blob[self.at : self.at + n]
        self.at += n
        return piece

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    """Returns (arrays, config_text, step).  Reserved tensors are decoded
    and removed from the array map."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    count = r.u32("tensor count")
    arrays = {}
    for _ in range(count):
        name_len = struct.unpack("<H", r.take(2, "name length"))[0]
        name = r.take(name_len, "name").decode("utf-8")
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        rank = r.take(1, "rank")[0]
        shape = tuple(r.u32(f"extent of {name}") for _ in range(rank))
        n_elems = 1
        for d in shape:
            n_elems *= d
        data = np.frombuffer(r.take(4 * n_elems, f"data of {name}"), dtype="<f4")
        arrays[name] = data.reshape(shape).copy()
    stored_crc = r.u32("crc")
    actual = zlib.crc32(blob[4 : r.at - 4]) & 0xFFFFFFFF
    if stored_crc != actual:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt")
    if r.at != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.at} trailing bytes")

    config_text = ""
    if "__config__" in arrays:
        config_text = bytes(arrays.pop("__config__").astype(np.uint8)).decode("utf-8")
    step = 0
    if "__step__" in arrays:
        step = int(round(float(arrays.pop("__step__").reshape(-1)[0])))
    return arrays, config_text, step
