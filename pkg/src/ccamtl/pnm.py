"""Binary PPM/PGM reading and writing for image/depth/label triplets.

* ``image.ppm``: P6, 8-bit RGB.
* ``depth.pgm``: P5, 16-bit big-endian, with a ``# depth_scale=<meters per unit>``
  header comment.
* ``label.pgm``: P5, 8-bit class ids.

Writers always emit the same header layout, so reading a file written here
and writing it back reproduces it byte for byte.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .augment import LARGE_DEPTH, Sample
from .exceptions import InputError

DEFAULT_DEPTH_SCALE = 0.001
IMAGE_NAME, DEPTH_NAME, LABEL_NAME = "image.ppm", "depth.pgm", "label.pgm"
_SCALE_RE = re.compile(r"depth_scale\s*=\s*([0-9eE.+-]+)")


class Pnm(NamedTuple):
    magic: bytes
    data: np.ndarray
    maxval: int
    comments: list


def _tokens(buf: bytes, count: int):
    """First ``count`` header tokens, the comments seen, and the payload offset."""
    tokens, comments, pos = [], [], 0
    while len(tokens) < count:
        if pos >= len(buf):
            raise InputError("truncated PNM header")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            end = len(buf) if end < 0 else end
            comments.append(buf[pos + 1:end].decode("ascii", "replace").strip())
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the payload
    return tokens, comments, pos + 1


def read_pnm(path) -> Pnm:
    buf = Path(path).read_bytes()
    tokens, comments, offset = _tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise InputError(f"{path}: unsupported PNM type {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InputError(f"{path}: malformed PNM header") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise InputError(f"{path}: bad PNM dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(buf) - offset < count * dtype.itemsize:
        raise InputError(f"{path}: truncated PNM payload")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return Pnm(magic, data.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8),
               maxval, comments)


def write_pnm(path, data: np.ndarray, maxval: int = 255, comments=()) -> None:
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    elif data.ndim == 2:
        magic = b"P5"
    else:
        raise InputError(f"cannot write array of shape {data.shape} as PNM")
    h, w = data.shape[:2]
    header = magic + b"\n"
    for c in comments:
        header += f"# {c}\n".encode("ascii")
    header += f"{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(header + np.ascontiguousarray(data, dtype=dtype).tobytes())


def read_image(path) -> np.ndarray:
    """H x W x 3 float32 in [0, 1]."""
    pnm = read_pnm(path)
    if pnm.magic != b"P6":
        raise InputError(f"{path}: expected a P6 colour image")
    return (pnm.data.astype(np.float32) / np.float32(pnm.maxval)).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    write_pnm(path, q, 255)


def read_depth(path) -> tuple[np.ndarray, float]:
    """Depth in meters and the file's meters-per-unit scale."""
    pnm = read_pnm(path)
    if pnm.magic != b"P5":
        raise InputError(f"{path}: expected a P5 depth map")
    scale = DEFAULT_DEPTH_SCALE
    for c in pnm.comments:
        m = _SCALE_RE.search(c)
        if m:
            scale = float(m.group(1))
    if not scale > 0:
        raise InputError(f"{path}: depth_scale must be positive")
    return (pnm.data.astype(np.float64) * scale).astype(np.float32), scale


def write_depth(path, depth: np.ndarray, scale: float = DEFAULT_DEPTH_SCALE) -> None:
    d = np.asarray(depth, dtype=np.float64)
    d = np.where(d >= LARGE_DEPTH, 0.0, d)
    q = np.clip(np.rint(d / scale), 0, 65535).astype(np.uint16)
    write_pnm(path, q, 65535, [f"depth_scale={scale!r}"])


def read_label(path) -> np.ndarray:
    pnm = read_pnm(path)
    if pnm.magic != b"P5" or pnm.maxval > 255:
        raise InputError(f"{path}: expected an 8-bit P5 label map")
    return pnm.data.astype(np.uint8)


def write_label(path, label: np.ndarray) -> None:
    lab = np.asarray(label)
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise InputError("label ids must fit in 8 bits")
    write_pnm(path, lab.astype(np.uint8), 255)


def read_triplet(directory) -> tuple[Sample, float]:
    d = Path(directory)
    depth, scale = read_depth(d / DEPTH_NAME)
    return Sample(read_image(d / IMAGE_NAME), depth, read_label(d / LABEL_NAME)), scale


def write_triplet(directory, sample: Sample, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / IMAGE_NAME, sample.image)
    write_depth(d / DEPTH_NAME, sample.depth, depth_scale)
    write_label(d / LABEL_NAME, sample.label)


def find_triplets(root) -> list[Path]:
    """``root`` itself if it holds a triplet, else its sorted triplet subdirectories."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    if (root / IMAGE_NAME).exists():
        return [root]
    found = sorted(p for p in root.iterdir() if p.is_dir() and (p / IMAGE_NAME).exists())
    if not found:
        raise InputError(f"no image/depth/label triplets under {root}")
    return found
