"""Differentiable layers on top of :mod:`ccamtl.tensor`.

Convolutions are 3x3 cross-correlations with stride 1 and zero padding 1, so
spatial size is preserved.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InputError, ShapeError
from .tensor import Tensor, _as_tensor, _result, add, matmul

IGNORE_INDEX = 255


def _check_nchw(x: Tensor, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be N x C x H x W, got {x.shape}")


def _im2col(x_nhwc: np.ndarray, dtype) -> np.ndarray:
    """Zero-padded 3x3 patches of an N x H x W x C array as (N*H*W) x (9*C), columns (ky, kx, c)."""
    n, h, w, c = x_nhwc.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=dtype)
    xp[:, 1:-1, 1:-1, :] = x_nhwc
    s = xp.strides
    # read-only strided view; reshape copies it into a contiguous matrix
    view = np.lib.stride_tricks.as_strided(xp, (n, h, w, 3, 3, c), (s[0], s[1], s[2], s[1], s[2], s[3]),
                                           writeable=False)
    return view.reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 same-size cross-correlation. ``weight`` is OutC x InC x 3 x 3."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_nchw(x)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv weight must be OutC x InC x 3 x 3, got {weight.shape}")
    n, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape[1] != c:
        raise ShapeError(f"conv weight expects {weight.shape[1]} input channels, got {c}")
    cols = _im2col(x.data.transpose(0, 2, 3, 1), np.result_type(x.data, weight.data))
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(9 * c, o)
    out = cols @ wmat
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv bias must have shape ({o},), got {bias.shape}")
        out += bias.data
    out = out.reshape(n, h, w, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, o)
        gw = gx = None
        if weight.requires_grad:
            gw = (cols.T @ gm).reshape(3, 3, c, o).transpose(3, 2, 0, 1)
        if x.requires_grad:
            # input gradient = same-size correlation of g with the flipped, transposed kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(9 * o, c)
            gcols = _im2col(gm.reshape(n, h, w, o), g.dtype)
            gx = (gcols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 cross-correlation; ``weight`` is C x 1 x 3 x 3."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_nchw(x)
    n, c, h, w = x.shape
    if weight.shape != (c, 1, 3, 3):
        raise ShapeError(f"depthwise weight must be {(c, 1, 3, 3)}, got {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    k = weight.data[:, 0]
    out = np.zeros((n, c, h, w), dtype=np.result_type(x.data, weight.data))
    for ky in range(3):
        for kx in range(3):
            out += k[None, :, ky, kx, None, None] * xp[:, :, ky:ky + h, kx:kx + w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c,):
            raise ShapeError(f"depthwise bias must have shape ({c},), got {bias.shape}")
        out += bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gk = np.zeros_like(weight.data)
        for ky in range(3):
            for kx in range(3):
                win = xp[:, :, ky:ky + h, kx:kx + w]
                gk[:, 0, ky, kx] = np.einsum("nchw,nchw->c", g, win)
                gxp[:, :, ky:ky + h, kx:kx + w] += k[None, :, ky, kx, None, None] * g
        gx = gxp[:, :, 1:-1, 1:-1]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes: N x C x H x W -> N x C."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4 dims, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _result(out, (x,), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    d = x.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2]) * 0.25

    def backward(g):
        return (_repeat2(g * 0.25),)

    return _result(out, (x,), backward)


def _repeat2(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    return np.broadcast_to(a[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    _check_nchw(x)
    n, c, h, w = x.shape
    out = _repeat2(x.data)

    def backward(g):
        return (g[:, :, 0::2, 0::2] + g[:, :, 1::2, 0::2] + g[:, :, 0::2, 1::2] + g[:, :, 1::2, 1::2],)

    return _result(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape D x E."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError("fully_connected expects 2-D input and weight")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


def _softmax(d: np.ndarray, axis: int) -> np.ndarray:
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 (channels) of an N x C x H x W tensor."""
    _check_nchw(x)
    out = _softmax(x.data, 1)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward)


def check_labels(labels: np.ndarray, n_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"labels must be integers, got {labels.dtype}")
    bad = ((labels < 0) | (labels >= n_classes)) & (labels != ignore_index)
    if bad.any():
        raise InputError(f"labels outside [0, {n_classes}) and not ignore_index: "
                         f"{np.unique(labels[bad])[:5].tolist()}")
    return labels


def cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored pixels of ``-log softmax(logits)[label]``.

    Returns a zero scalar when every pixel is ignored.
    """
    _check_nchw(logits, "logits")
    n, c, h, w = logits.shape
    labels = check_labels(labels, c, ignore_index)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        return _result(np.zeros((), dtype=logits.dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),))
    safe = np.where(valid, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = (logsum - picked) * valid
    out = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def backward(g):
        p = _softmax(logits.data, 1)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (g / count),)

    return _result(out, (logits,), backward)


def uniform_fanin(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    """Zero-mean uniform init with variance ``gain / fan_in``."""
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)
