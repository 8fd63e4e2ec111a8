"""Shared encoder, two decoders and a cross-task link between them."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..ccam import CcamBlock, GatedBlock
from ..exceptions import ParameterError
from ..nn import avg_pool2, conv2d, uniform_fanin, upsample2
from ..tensor import Parameter, Tensor, add, exp, relu

MODES = ("none", "gated", "ccam")
ENCODER, DEPTH, SEG, SHARE = "shared-encoder", "depth-decoder", "segmentation-decoder", "ccam"


class ToyModel:
    """Three-stage encoder with mirrored seg/depth decoders.

    The input is average-pooled once, so the encoder runs at H/2, H/4 and H/8
    and the heads at H/2; head outputs are upsampled back to H x W. The share
    block sits between the deepest decoder features (H/8, ``channels`` wide).
    Decoders receive additive skips from the encoder.
    """

    def __init__(self, n_classes: int = 5, mode: str = "ccam", channels: int = 16,
                 reduction: int = 4, rng=None, depth_init: float = 8.0):
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_classes = n_classes
        self.mode = mode
        self.channels = channels
        c1, c2, c3 = channels // 2, channels, channels
        self.params: dict[str, Parameter] = {}
        self._conv("enc1", 3, c1, ENCODER, rng)
        self._conv("enc2", c1, c2, ENCODER, rng)
        self._conv("enc3", c2, c3, ENCODER, rng)
        for prefix, role in (("seg", SEG), ("depth", DEPTH)):
            self._conv(f"{prefix}.dec1", c3, c3, role, rng)
            self._conv(f"{prefix}.dec2", c3, c1, role, rng)
            self._conv(f"{prefix}.dec3", c1, c1, role, rng)
        self._conv("seg.head", c1, n_classes, SEG, rng, gain=1.0)
        self._conv("depth.head", c1, 1, DEPTH, rng, gain=0.1)
        self.params["depth.head.b"].data[:] = np.log(depth_init)
        self.block = None
        if mode == "ccam":
            self.block = CcamBlock(c3, reduction, rng, prefix="share")
        elif mode == "gated":
            self.block = GatedBlock(c3, rng, prefix="share")
        if self.block is not None:
            self.params.update(self.block.params)

    def _conv(self, name, cin, cout, role, rng, gain=2.0):
        w = uniform_fanin(rng, (cout, cin, 3, 3), cin * 9, gain)
        self.params[f"{name}.w"] = Parameter(w, f"{name}.w", role)
        self.params[f"{name}.b"] = Parameter(np.zeros(cout), f"{name}.b", role)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def names(self, roles) -> list[str]:
        return [n for n, p in self.params.items() if p.role in roles]

    def block_parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values() if p.role == SHARE)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, images, weights: Mapping[str, Tensor] | None = None,
                heads=("seg", "depth"), features: dict | None = None):
        """Run the network on N x 3 x H x W (or N x H x W x 3) images.

        ``weights`` overrides parameters by name (teacher or frozen copies).
        Returns ``(seg_logits, depth)``; a head not listed in ``heads`` is None.
        Decoder activations are stored in ``features`` when a dict is given.
        """
        w = self.params if not weights else {**self.params, **weights}
        x = images if isinstance(images, Tensor) else Tensor._wrap(_nchw(images))

        def conv(name, t, act=True):
            out = conv2d(t, w[f"{name}.w"], w[f"{name}.b"])
            return relu(out) if act else out

        s1 = conv("enc1", avg_pool2(x))
        s2 = conv("enc2", avg_pool2(s1))
        f = conv("enc3", avg_pool2(s2))
        a = conv("seg.dec1", f)
        b = conv("depth.dec1", f)
        if self.block is not None:
            a, b, m = self.block(a, b, w)
            if features is not None:
                features["affinity"] = m
        outs = {}
        for prefix, t in (("seg", a), ("depth", b)):
            if prefix not in heads:
                outs[prefix] = None
                continue
            t1 = t
            t2 = conv(f"{prefix}.dec2", add(upsample2(t1), s2))
            t3 = conv(f"{prefix}.dec3", add(upsample2(t2), s1))
            if features is not None:
                features[prefix] = [t1, t2, t3]
            head = upsample2(conv(f"{prefix}.head", t3, act=False))
            outs[prefix] = head if prefix == "seg" else exp(head)
        return outs["seg"], outs["depth"]


def _nchw(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[-1] == 3 and arr.shape[1] != 3:
        arr = arr.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(arr, dtype=np.float32)
