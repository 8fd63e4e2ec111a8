"""Synthetic street-like scenes with exact depth and labels.

Surfaces are rasterised nearest-first: every pixel takes the depth and class
of the closest surface covering it. Objects rest lower in the frame and look
bigger the nearer they are, so appearance, position, size and depth are all
correlated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..augment import Sample

BACKGROUND, ROAD, BLOCK, MOVABLE_A, MOVABLE_B = range(5)
CLASS_NAMES = ("background", "road", "block", "movable-a", "movable-b")
MOVABLE = (MOVABLE_A, MOVABLE_B)

_BASE_COLORS = np.array([
    [0.55, 0.70, 0.90],
    [0.40, 0.40, 0.43],
    [0.62, 0.48, 0.32],
    [0.80, 0.22, 0.20],
    [0.74, 0.30, 0.26],
])


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 5
    movable: tuple = MOVABLE
    n_objects: tuple = (2, 6)
    depth_range: tuple = (1.0, 20.0)
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object count range {self.n_objects}")
        if not set(self.movable) <= set(range(self.n_classes)):
            raise ValueError("movable classes must be a subset of the class set")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError(f"bad depth range {self.depth_range}")


class Surface(NamedTuple):
    class_id: int
    mask: np.ndarray
    depth: np.ndarray
    color: np.ndarray


def _background(spec: SceneSpec) -> Surface:
    h, w = spec.height, spec.width
    d_max = spec.depth_range[1]
    rows = np.linspace(0.0, 1.0, h)[:, None]
    depth = np.broadcast_to(d_max * (1.0 - 0.4 * rows), (h, w)).copy()
    return Surface(BACKGROUND, np.ones((h, w), bool), depth, _BASE_COLORS[BACKGROUND])


def _horizon(spec: SceneSpec) -> int:
    return int(round(0.45 * spec.height))


def _ground_row(spec: SceneSpec, depth: float) -> float:
    """Image row where an object at ``depth`` touches the ground."""
    d_min, d_max = spec.depth_range
    near = np.clip((d_max - depth) / (d_max - d_min), 0.0, 1.0)
    hz = _horizon(spec)
    return hz + (spec.height - 1 - hz) * near


def _road(spec: SceneSpec, rng) -> Surface:
    h, w = spec.height, spec.width
    d_min, d_max = spec.depth_range
    top = int(rng.integers(int(0.45 * h), int(0.7 * h)))
    ys = np.arange(h, dtype=np.float64)[:, None]
    frac = np.clip((ys - top) / max(h - 1 - top, 1), 0.0, 1.0)
    far, near = 0.9 * d_max, 1.5 * d_min
    depth = np.broadcast_to(far + (near - far) * frac, (h, w)).copy()
    mask = np.broadcast_to(ys >= top, (h, w)).copy()
    return Surface(ROAD, mask, depth, _BASE_COLORS[ROAD])


def _object(spec: SceneSpec, cls: int, rng) -> Surface:
    h, w = spec.height, spec.width
    d_min, d_max = spec.depth_range
    if cls == BLOCK:
        depth = rng.uniform(0.45 * d_max, 0.9 * d_max)
        bw, bh = rng.uniform(0.18, 0.4) * w, rng.uniform(0.25, 0.5) * h
    else:
        depth = rng.uniform(d_min * 1.5, 0.7 * d_max)
        size = 0.6 * w * (d_min * 3.0) / (depth + d_min * 2.0)
        if cls == MOVABLE_A:
            bw, bh = size * rng.uniform(0.9, 1.3), size * rng.uniform(0.45, 0.65)
        else:
            bw, bh = size * rng.uniform(0.35, 0.5), size * rng.uniform(0.9, 1.2)
    bw, bh = max(bw, 2.0), max(bh, 2.0)
    bottom = _ground_row(spec, depth) if cls != BLOCK else _horizon(spec) + rng.uniform(0, 0.15 * h)
    cx = rng.uniform(0.1 * w, 0.9 * w)
    cy = bottom - bh / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if cls == MOVABLE_B:
        mask = ((xs - cx) / (bw / 2)) ** 2 + ((ys - cy) / (bh / 2)) ** 2 <= 1.0
    else:
        mask = (np.abs(xs - cx) <= bw / 2) & (np.abs(ys - cy) <= bh / 2)
    color = np.clip(_BASE_COLORS[cls] + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    return Surface(cls, mask, np.full((h, w), depth), color)


def _pick_classes(n: int, rng) -> list[int]:
    classes, have_road = [], False
    for _ in range(n):
        cls = int(rng.choice([ROAD, BLOCK, MOVABLE_A, MOVABLE_B], p=[0.2, 0.2, 0.3, 0.3]))
        if cls == ROAD and have_road:
            cls = int(rng.choice([MOVABLE_A, MOVABLE_B]))
        have_road |= cls == ROAD
        classes.append(cls)
    return classes


def rasterize(surfaces: list[Surface], spec: SceneSpec, rng=None) -> Sample:
    """Nearest-surface depth/label composition plus a shaded, noisy image."""
    h, w = spec.height, spec.width
    depth = np.full((h, w), np.inf)
    label = np.zeros((h, w), dtype=np.uint8)
    color = np.zeros((h, w, 3))
    for s in surfaces:
        closer = s.mask & (s.depth < depth)
        depth[closer] = s.depth[closer]
        label[closer] = s.class_id
        color[closer] = s.color
    d_min, d_max = spec.depth_range
    shade = 1.1 - 0.5 * (depth - d_min) / (d_max - d_min)
    image = color * shade[..., None]
    if rng is not None and spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, depth.astype(np.float32), label)


def generate_scene(spec: SceneSpec, rng: np.random.Generator, return_surfaces: bool = False):
    """Random scene with ``spec.n_objects`` surfaces over a background ramp."""
    lo, hi = spec.n_objects
    n = int(rng.integers(lo, hi + 1))
    surfaces = [_background(spec)]
    for cls in _pick_classes(n, rng):
        surfaces.append(_road(spec, rng) if cls == ROAD else _object(spec, cls, rng))
    sample = rasterize(surfaces, spec, rng)
    return (sample, surfaces) if return_surfaces else sample


def generate_dataset(spec: SceneSpec, n: int, seed: int | None = None):
    """``n`` scenes as stacked arrays ``(images, labels, depths)``.

    Scene ``k`` uses its own child seed, so the result does not depend on how
    the work is split.
    """
    seed = spec.seed if seed is None else seed
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(n)
    scenes = [generate_scene(spec, np.random.default_rng(c)) for c in children]
    images = np.stack([s.image for s in scenes])
    labels = np.stack([s.label for s in scenes])
    depths = np.stack([s.depth for s in scenes])
    return images, labels, depths
