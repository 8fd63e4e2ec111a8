"""Input checks shared by the estimator, the CLI and the metrics."""

from __future__ import annotations

import numpy as np

from .exceptions import InputError, ShapeError
from .nn import IGNORE_INDEX


def check_images(X, allow_single: bool = False) -> np.ndarray:
    """Return images as float32 N x H x W x 3 with values in [0, 1]."""
    X = np.asarray(X)
    if allow_single and X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"images must be N x H x W x 3, got {X.shape}")
    if np.issubdtype(X.dtype, np.integer):
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise InputError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    return X


def check_label_maps(y, n_classes: int, shape=None, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError(f"label maps must be integer, got {y.dtype}")
    if shape is not None and y.shape != tuple(shape):
        raise ShapeError(f"label maps have shape {y.shape}, expected {tuple(shape)}")
    bad = ((y < 0) | (y >= n_classes)) & (y != ignore_index)
    if bad.any():
        raise InputError(f"label ids outside [0, {n_classes}) other than {ignore_index}")
    return y.astype(np.int64)


def check_depths(depth, shape=None) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float32)
    if shape is not None and depth.shape != tuple(shape):
        raise ShapeError(f"depth maps have shape {depth.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(depth)) or (depth <= 0).any():
        raise InputError("depth must be finite and positive")
    return depth
