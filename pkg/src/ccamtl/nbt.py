"""NBT1 binary tensor files and named checkpoints built from them.

Layout of one record: ``b"NBT1"``, u8 rank, rank x u32 little-endian extents,
then float32 little-endian values in row-major order.

A checkpoint is a concatenation of records plus a text index with one line per
tensor: ``name offset nbytes dim0xdim1x...``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import InputError

MAGIC = b"NBT1"


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise InputError("rank too large for NBT1")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; return (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise InputError("bad NBT1 magic")
    if len(buf) < offset + 5:
        raise InputError("truncated NBT1 header")
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) < pos + 4 * rank:
        raise InputError("truncated NBT1 header")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise InputError("truncated NBT1 payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float32), end


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise InputError(f"{path}: trailing bytes after NBT1 record")
    return arr


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    blobs, lines, offset = [], [], 0
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name):
            raise InputError(f"tensor name {name!r} contains whitespace")
        blob = encode(tensors[name])
        shape = "x".join(str(d) for d in np.shape(tensors[name])) or "scalar"
        lines.append(f"{name} {offset} {len(blob)} {shape}\n")
        blobs.append(blob)
        offset += len(blob)
    path.write_bytes(b"".join(blobs))
    Path(str(path) + ".index").write_text("".join(lines))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    out = {}
    for line in Path(str(path) + ".index").read_text().splitlines():
        if not line.strip():
            continue
        name, offset, nbytes, _ = line.split()
        arr, end = decode(buf, int(offset))
        if end - int(offset) != int(nbytes):
            raise InputError(f"index length mismatch for {name}")
        out[name] = arr
    return out
