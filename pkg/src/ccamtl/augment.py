"""AffineMix and ColorAug.

AffineMix re-pastes one movable object of an image at a new depth ``s * D``.
Moving an object by a depth factor ``s`` shrinks it by ``1/s`` about its
anchor, so the image-plane warp is a scaling by ``1/s`` plus the translation
``t = (1 - 1/s) * anchor`` (normalised units). A warped pixel is pasted only
where it lands on the object and is nearer than what is already there.

ColorAug jitters brightness, contrast and saturation separately on movable and
non-movable regions of an image, using predicted labels to split them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .exceptions import NoMovableObject, ParameterError, ShapeError
from .nn import IGNORE_INDEX

LARGE_DEPTH = 1e9
SCALE_RANGE = (0.5, 1.5)
COLOR_RANGE = (0.8, 1.2)
MIOU_GATE = 0.60
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class Sample:
    """One scene: image H x W x 3 in [0, 1], depth H x W > 0, labels H x W.

    ``softmax`` is an optional C x H x W per-pixel class distribution.
    """

    image: np.ndarray
    depth: np.ndarray
    label: np.ndarray
    softmax: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.depth = np.asarray(self.depth)
        self.label = np.asarray(self.label)
        h, w = self.label.shape
        if self.image.shape != (h, w, 3):
            raise ShapeError(f"image shape {self.image.shape} does not match labels {(h, w)}")
        if self.depth.shape != (h, w):
            raise ShapeError(f"depth shape {self.depth.shape} does not match labels {(h, w)}")
        if self.softmax is not None:
            self.softmax = np.asarray(self.softmax)
            if self.softmax.ndim != 3 or self.softmax.shape[1:] != (h, w):
                raise ShapeError(f"softmax shape {self.softmax.shape} does not match {(h, w)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    def copy(self) -> "Sample":
        return Sample(self.image.copy(), self.depth.copy(), self.label.copy(),
                      None if self.softmax is None else self.softmax.copy())


@dataclass
class AffineMixParams:
    scale: float
    class_id: int
    component: int
    anchor: tuple[float, float]
    seed: int | None = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError(f"scale must be positive, got {self.scale}")

    def to_text(self) -> str:
        lines = [
            f"seed={'' if self.seed is None else self.seed}",
            f"scale={self.scale!r}",
            f"class={self.class_id}",
            f"component={self.component}",
            f"anchor={self.anchor[0]!r},{self.anchor[1]!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AffineMixParams":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            ax, ay = (float(v) for v in kv["anchor"].split(","))
            seed = int(kv["seed"]) if kv.get("seed") else None
            return cls(float(kv["scale"]), int(kv["class"]), int(kv["component"]), (ax, ay), seed)
        except (KeyError, ValueError) as e:
            raise ParameterError(f"malformed AffineMix params: {e}") from None


class SelectedObject(NamedTuple):
    mask: np.ndarray
    class_id: int
    anchor: tuple[float, float]
    component: int


def movable_components(label: np.ndarray, movable: Sequence[int]) -> list[tuple[int, int, np.ndarray]]:
    """``(class, component id, mask)`` for every 4-connected movable component.

    Component ids are 1-based in scan order within each class.
    """
    if not len(movable):
        raise ParameterError("movable class set is empty")
    comps = []
    for cls in sorted(set(int(c) for c in movable)):
        lab, n = ndimage.label(label == cls, structure=_FOUR_CONNECTED)
        for k in range(1, n + 1):
            comps.append((cls, k, lab == k))
    return comps


def centroid_anchor(mask: np.ndarray) -> tuple[float, float]:
    """Mask centroid in normalised ``[0, 1]`` image coordinates (x, y)."""
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    ox = float(xs.mean()) / (w - 1) if w > 1 else 0.0
    oy = float(ys.mean()) / (h - 1) if h > 1 else 0.0
    return ox, oy


def select_movable_object(sample: Sample, movable: Sequence[int], rng: np.random.Generator,
                          ) -> SelectedObject:
    """Pick one movable connected component uniformly at random."""
    comps = movable_components(sample.label, movable)
    if not comps:
        raise NoMovableObject("no pixel of a movable class in the label map")
    cls, comp, mask = comps[int(rng.integers(len(comps)))]
    return SelectedObject(mask, cls, centroid_anchor(mask), comp)


def compute_offsets(s: float, o_x: float, o_y: float) -> tuple[float, float]:
    """Translation ``(1 - 1/s) * o`` that keeps the anchor fixed under 1/s scaling."""
    if not s > 0:
        raise ParameterError(f"scale must be positive, got {s}")
    k = 1.0 - 1.0 / s
    return k * o_x, k * o_y


def _source_coords(h: int, w: int, inv_scale: float, t: tuple[float, float]):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    tx = t[0] * (w - 1)
    ty = t[1] * (h - 1)
    return (xs - tx) / inv_scale, (ys - ty) / inv_scale


def _warp2d(plane: np.ndarray, px: np.ndarray, py: np.ndarray, mode: str, fill):
    h, w = plane.shape
    if mode == "nearest":
        ix = np.floor(px + 0.5).astype(np.int64)
        iy = np.floor(py + 0.5).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.full(plane.shape, fill, dtype=plane.dtype)
        out[inside] = plane[iy[inside], ix[inside]]
        return out
    eps = 1e-9
    inside = (px >= -eps) & (px <= w - 1 + eps) & (py >= -eps) & (py <= h - 1 + eps)
    pxc = np.clip(px, 0, w - 1)
    pyc = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(pxc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(pyc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = pxc - x0
    fy = pyc - y0
    v = plane.astype(np.float64)
    val = ((1 - fx) * (1 - fy) * v[y0, x0] + fx * (1 - fy) * v[y0, x1]
           + (1 - fx) * fy * v[y1, x0] + fx * fy * v[y1, x1])
    out = np.where(inside, val, fill)
    return out.astype(plane.dtype if np.issubdtype(plane.dtype, np.floating) else np.float64)


def affine_warp(plane: np.ndarray, inv_scale: float, t: tuple[float, float],
                kind: str = "image") -> np.ndarray:
    """Scale ``plane`` by ``inv_scale`` about the origin and shift by ``t``.

    ``kind`` is one of ``image`` (H x W x 3, bilinear, black fill), ``depth``
    (bilinear, LARGE_DEPTH fill), ``label`` (nearest, 255 fill), ``mask``
    (nearest, False fill) or ``softmax`` (C x H x W, bilinear, zero fill).
    """
    if not inv_scale > 0:
        raise ParameterError(f"inverse scale must be positive, got {inv_scale}")
    plane = np.asarray(plane)
    if kind == "image":
        h, w = plane.shape[:2]
        px, py = _source_coords(h, w, inv_scale, t)
        return np.stack([_warp2d(plane[..., k], px, py, "bilinear", 0.0)
                         for k in range(plane.shape[2])], axis=-1)
    if kind == "softmax":
        h, w = plane.shape[1:]
        px, py = _source_coords(h, w, inv_scale, t)
        return np.stack([_warp2d(ch, px, py, "bilinear", 0.0) for ch in plane], axis=0)
    h, w = plane.shape
    px, py = _source_coords(h, w, inv_scale, t)
    if kind == "depth":
        return _warp2d(plane, px, py, "bilinear", LARGE_DEPTH)
    if kind == "label":
        return _warp2d(plane, px, py, "nearest", IGNORE_INDEX)
    if kind == "mask":
        return _warp2d(plane.astype(bool), px, py, "nearest", False)
    raise ParameterError(f"unknown plane kind {kind!r}")


def paste_mask(sample: Sample, params: AffineMixParams) -> tuple[np.ndarray, dict]:
    """Occlusion-aware foreground mask and the warped planes it selects from."""
    mask = _component_mask(sample.label, params)
    s = params.scale
    inv = 1.0 / s
    t = compute_offsets(s, *params.anchor)
    depth_a = affine_warp(sample.depth, inv, t, "depth")
    depth_a = np.where(depth_a >= LARGE_DEPTH, LARGE_DEPTH, s * depth_a)
    label_a = affine_warp(sample.label, inv, t, "label")
    comp_a = affine_warp(mask, inv, t, "mask")
    m = comp_a & (label_a == params.class_id) & (depth_a <= sample.depth)
    warped = {"depth": depth_a.astype(sample.depth.dtype, copy=False), "label": label_a,
              "inv": inv, "t": t}
    return m, warped


def _component_mask(label: np.ndarray, params: AffineMixParams) -> np.ndarray:
    lab, n = ndimage.label(label == params.class_id, structure=_FOUR_CONNECTED)
    if n == 0:
        raise NoMovableObject(f"class {params.class_id} absent from the label map")
    if params.component < 1 or params.component > n:
        raise ParameterError(
            f"component {params.component} not found for class {params.class_id} ({n} present)")
    return lab == params.component


def affinemix(sample: Sample, params: AffineMixParams) -> Sample:
    """Paste the selected object back at depth scale ``params.scale``.

    The pasted region also takes the scaled depth, so the returned sample
    stays geometrically consistent.
    """
    m, warped = paste_mask(sample, params)
    inv, t = warped["inv"], warped["t"]
    image_a = affine_warp(sample.image, inv, t, "image")
    image = np.where(m[..., None], image_a, sample.image).astype(sample.image.dtype, copy=False)
    label = np.where(m, warped["label"], sample.label).astype(sample.label.dtype, copy=False)
    depth = np.where(m, warped["depth"], sample.depth)
    softmax = None
    if sample.softmax is not None:
        soft_a = affine_warp(sample.softmax, inv, t, "softmax")
        softmax = np.where(m[None], soft_a, sample.softmax)
    return Sample(image, depth, label, softmax)


def sample_affinemix_params(sample: Sample, movable: Sequence[int], rng: np.random.Generator,
                            scale_range: tuple[float, float] = SCALE_RANGE,
                            seed: int | None = None) -> AffineMixParams:
    """Draw a scale and an object; raises NoMovableObject when there is none."""
    obj = select_movable_object(sample, movable, rng)
    s = float(rng.uniform(*scale_range))
    return AffineMixParams(s, obj.class_id, obj.component, obj.anchor, seed)


def random_affinemix(sample: Sample, movable: Sequence[int], rng: np.random.Generator,
                     n_objects: int = 1, scale_range: tuple[float, float] = SCALE_RANGE):
    """Apply ``n_objects`` random AffineMix pastes in sequence.

    Returns the new sample and the list of parameters used.
    """
    used = []
    out = sample
    for _ in range(n_objects):
        params = sample_affinemix_params(out, movable, rng, scale_range)
        out = affinemix(out, params)
        used.append(params)
    return out, used


def _luma(x: np.ndarray) -> np.ndarray:
    return x @ np.array([0.299, 0.587, 0.114], dtype=x.dtype)


def _jitter(region: np.ndarray, brightness: float, contrast: float, saturation: float):
    out = region
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        m = _luma(out).mean()
        out = m + (out - m) * contrast
    if saturation != 1.0:
        g = _luma(out)[:, None]
        out = g + (out - g) * saturation
    return out


def draw_color_factors(rng: np.random.Generator, low: float = COLOR_RANGE[0],
                       high: float = COLOR_RANGE[1]) -> dict[str, tuple[float, float, float]]:
    vals = rng.uniform(low, high, size=6)
    return {"movable": tuple(float(v) for v in vals[:3]),
            "static": tuple(float(v) for v in vals[3:])}


def coloraug(image: np.ndarray, predicted_labels: np.ndarray, movable: Sequence[int],
             rng: np.random.Generator | None, current_miou: float,
             factors: dict | None = None, gate: float = MIOU_GATE) -> np.ndarray:
    """Different brightness/contrast/saturation on movable vs other regions.

    Returns ``image`` unchanged while ``current_miou < gate``. ``factors`` maps
    ``"movable"`` and ``"static"`` to ``(brightness, contrast, saturation)``;
    they are drawn from ``rng`` when omitted.
    """
    image = np.asarray(image)
    if image.shape[:2] != np.shape(predicted_labels) or image.shape[2:] != (3,):
        raise ShapeError(f"image {image.shape} not aligned with labels {np.shape(predicted_labels)}")
    if current_miou < gate:
        return image.copy()
    if factors is None:
        factors = draw_color_factors(rng)
    is_movable = np.isin(predicted_labels, list(movable))
    out = image.copy()
    for key, mask in (("movable", is_movable), ("static", ~is_movable)):
        if mask.any():
            b, c, s = factors[key]
            out[mask] = _jitter(image[mask], b, c, s)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)
