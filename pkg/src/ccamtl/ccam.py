"""Cross-channel affinity module and the gated message-passing baseline.

CCAM turns two task feature stacks ``A_F`` and ``B_F`` (N x C x H x W) into a
C x C affinity matrix ``M`` and mixes them across channels::

    A'_F[:, i] = A_F[:, i] + sum_j M[i, j] * B_F[:, j]
    B'_F[:, j] = B_F[:, j] + sum_i M[i, j] * A_F[:, i]

Row ``i`` of ``M`` comes from the H x H products of spatially attended channel
``i`` of ``A`` with every transposed channel of ``B``, pooled and squeezed
through a small channel-attention head.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .exceptions import ShapeError
from .nn import conv2d, depthwise_conv2d, fully_connected, global_avg_pool, uniform_fanin
from .tensor import (Parameter, Tensor, add, matmul, mean, mul, relu, reshape, scale, sigmoid,
                     swap_last)

Weights = Mapping[str, Tensor]


def spatial_attention(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``sigmoid(conv3x3(features))``; same shape as the input, values in (0, 1)."""
    return sigmoid(conv2d(features, weight, bias))


class PsiHead:
    """Channel attention: pooled C-vector -> FC(C, C/r) -> relu -> FC(C/r, C) -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 4, rng=None, prefix: str = "psi"):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.hidden = hidden
        self.names = tuple(f"{prefix}.{k}" for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"))
        shapes = [(channels, hidden), (hidden,), (hidden, channels), (channels,)]
        self.params = {}
        for name, shape in zip(self.names, shapes):
            if name.endswith(".b"):
                data = np.zeros(shape)
            else:
                data = uniform_fanin(rng, shape, shape[0])
            self.params[name] = Parameter(data, name, "ccam")

    def __call__(self, pooled: Tensor, w: Weights | None = None) -> Tensor:
        w = self.params if w is None else w
        w1, b1, w2, b2 = (w[n] for n in self.names)
        h = relu(fully_connected(pooled, w1, b1))
        return sigmoid(fully_connected(h, w2, b2))


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"expected N x C x H x W feature maps, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"task feature shapes differ: {a.shape} vs {b.shape}")


def channel_products(a_i: Tensor, b_sf: Tensor) -> Tensor:
    """H x H products ``a_i @ b_j^T`` for every channel j of ``b_sf`` (N x C x H x H)."""
    if a_i.ndim != 4 or a_i.shape[1] != 1:
        raise ShapeError(f"a_i must be N x 1 x H x W, got {a_i.shape}")
    if b_sf.ndim != 4 or a_i.shape[0] != b_sf.shape[0] or a_i.shape[2:] != b_sf.shape[2:]:
        raise ShapeError(f"spatial dims of {a_i.shape} and {b_sf.shape} disagree")
    return matmul(a_i, swap_last(b_sf))


def channel_affinity(a_i: Tensor, b_sf: Tensor, psi: PsiHead, w: Weights | None = None) -> Tensor:
    """Affinity vector (length C) of one attended A-channel against all B-channels.

    The Psi head runs per sample; the result is averaged over the batch.
    """
    # dividing by the contracted width keeps the pooled values inside (0, 1)
    pooled = scale(global_avg_pool(channel_products(a_i, b_sf)), 1.0 / a_i.shape[3])
    return mean(psi(pooled, w), axis=0)


def pooled_cross_products(a_sf: Tensor, b_sf: Tensor) -> Tensor:
    """All pooled channel products at once: (N*C) x C, row (n, i), column j.

    Entry ``(n, i), j`` is the mean of ``a_i @ b_j^T`` divided by the width W.
    """
    _check_pair(a_sf, b_sf)
    n, c, h, wd = a_sf.shape
    a2 = reshape(a_sf, (n, c * h, wd))
    b2 = swap_last(reshape(b_sf, (n, c * h, wd)))
    prod = reshape(matmul(a2, b2), (n * c, h, c, h))
    return scale(mean(prod, axis=(1, 3)), 1.0 / wd)


def cross_affinity_matrix(a_sf: Tensor, b_sf: Tensor, psi: PsiHead,
                          w: Weights | None = None) -> Tensor:
    """C x C affinity matrix; row i equals ``channel_affinity(a_sf[:, i:i+1], b_sf)``."""
    n, c = a_sf.shape[:2]
    if psi.channels != c:
        raise ShapeError(f"Psi head built for {psi.channels} channels, features have {c}")
    alpha = psi(pooled_cross_products(a_sf, b_sf), w)
    return mean(reshape(alpha, (n, c, c)), axis=0)


def mix_features(a_f: Tensor, b_f: Tensor, m: Tensor) -> tuple[Tensor, Tensor]:
    """Add the affinity-weighted channels of each task to the other."""
    _check_pair(a_f, b_f)
    n, c, h, wd = a_f.shape
    if m.shape != (c, c):
        raise ShapeError(f"affinity matrix must be {c} x {c}, got {m.shape}")
    a2 = reshape(a_f, (n, c, h * wd))
    b2 = reshape(b_f, (n, c, h * wd))
    a_out = add(a_f, reshape(matmul(m, b2), a_f.shape))
    b_out = add(b_f, reshape(matmul(swap_last(m), a2), b_f.shape))
    return a_out, b_out


class CcamBlock:
    """Spatial attention on both inputs, affinity matrix, cross-task mixing."""

    def __init__(self, channels: int, reduction: int = 4, rng=None, prefix: str = "ccam"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.reduction = reduction
        self.prefix = prefix
        fan_in = channels * 9
        self.params = {}
        for side in ("wa", "wb"):
            wname, bname = f"{prefix}.{side}.w", f"{prefix}.{side}.b"
            self.params[wname] = Parameter(
                uniform_fanin(rng, (channels, channels, 3, 3), fan_in), wname, "ccam")
            self.params[bname] = Parameter(np.zeros(channels), bname, "ccam")
        self.psi = PsiHead(channels, reduction, rng, prefix=f"{prefix}.psi")
        self.params.update(self.psi.params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __call__(self, a_f: Tensor, b_f: Tensor, w: Weights | None = None):
        return ccam_forward(self, a_f, b_f, w)


def ccam_forward(block: CcamBlock, a_f: Tensor, b_f: Tensor, w: Weights | None = None):
    """Return ``(A'_F, B'_F, M)``."""
    w = block.params if w is None else w
    p = block.prefix
    _check_pair(a_f, b_f)
    a_sf = spatial_attention(a_f, w[f"{p}.wa.w"], w[f"{p}.wa.b"])
    b_sf = spatial_attention(b_f, w[f"{p}.wb.w"], w[f"{p}.wb.b"])
    m = cross_affinity_matrix(a_sf, b_sf, block.psi, w)
    a_out, b_out = mix_features(a_f, b_f, m)
    return a_out, b_out, m


def gated_distillation(f_k: Tensor, f_t: Tensor, gate_w: Tensor, gate_b: Tensor,
                       msg_w: Tensor, msg_b: Tensor) -> Tensor:
    """``F_k + sigmoid(W_g * F_k) . (W_tk * F_t)`` with a per-channel message conv."""
    _check_pair(f_k, f_t)
    gate = sigmoid(conv2d(f_k, gate_w, gate_b))
    return add(f_k, mul(gate, depthwise_conv2d(f_t, msg_w, msg_b)))


class GatedBlock:
    """Two-task gated message passing in both directions (A <- B and B <- A)."""

    def __init__(self, channels: int, rng=None, prefix: str = "gated"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.prefix = prefix
        self.params = {}
        for side in ("a", "b"):
            specs = [
                (f"{prefix}.{side}.gate.w", (channels, channels, 3, 3), channels * 9),
                (f"{prefix}.{side}.gate.b", (channels,), None),
                (f"{prefix}.{side}.msg.w", (channels, 1, 3, 3), 9),
                (f"{prefix}.{side}.msg.b", (channels,), None),
            ]
            for name, shape, fan_in in specs:
                data = np.zeros(shape) if fan_in is None else uniform_fanin(rng, shape, fan_in)
                self.params[name] = Parameter(data, name, "ccam")

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __call__(self, a_f: Tensor, b_f: Tensor, w: Weights | None = None):
        w = self.params if w is None else w
        p = self.prefix

        def side(s, own, other):
            return gated_distillation(own, other, w[f"{p}.{s}.gate.w"], w[f"{p}.{s}.gate.b"],
                                      w[f"{p}.{s}.msg.w"], w[f"{p}.{s}.msg.b"])

        return side("a", a_f, b_f), side("b", b_f, a_f), None
