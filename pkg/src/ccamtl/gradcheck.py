"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .exceptions import NonFiniteError
from .tensor import Tape, Tensor, high_precision


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float) -> np.ndarray:
    """(f(p + eps) - f(p - eps)) / 2 eps for every entry of ``p``."""
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = float(f().data)
        flat[k] = orig - eps
        lo = float(f().data)
        flat[k] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite objective while probing entry {k}")
        gflat[k] = (hi - lo) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise error, normalised by the larger of the two gradient scales."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6,
              names: Iterable[str] | None = None) -> dict[str, float]:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must read the parameters' ``.data`` each time it is called. The check
    runs in float64; parameter dtypes are restored afterwards. Returns the
    maximum relative error per parameter.
    """
    params = list(params)
    if names is None:
        names = [getattr(p, "name", f"param{i}") for i, p in enumerate(params)]
    names = list(names)
    saved = [(p.data.dtype, p.grad) for p in params]
    report = {}
    try:
        with high_precision():
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            with Tape() as tape:
                out = f()
            if not np.isfinite(out.data).all():
                raise NonFiniteError("objective is not finite")
            tape.backward(out)
            for name, p in zip(names, params):
                analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
                report[name] = relative_error(analytic, numeric_grad(f, p, eps))
    finally:
        for p, (dtype, grad) in zip(params, saved):
            p.data = p.data.astype(dtype)
            p.grad = grad
    return report
