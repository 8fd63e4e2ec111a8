"""Orthogonal regularization ``lambda * ||W^T W - I||_sigma``.

The spectral norm is found by power iteration. Its gradient uses the converged
top singular pair ``(u, v)`` held constant: ``d sigma / dB = u v^T``, which the
tape realises by evaluating ``u^T B v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .exceptions import ParameterError
from .tensor import Tape, Tensor, _as_tensor, high_precision, matmul, reshape, scale, sub, swap_last, transpose

DEFAULT_SCHEDULE = ((0, 1e-4), (10_000, 1e-5), (20_000, 1e-6), (30_000, 1e-7))
DEFAULT_ROLES = ("shared-encoder", "depth-decoder", "segmentation-decoder")


@dataclass
class OrthoConfig:
    schedule: tuple = DEFAULT_SCHEDULE
    roles: tuple = DEFAULT_ROLES
    iters: int = 20
    tol: float = 1e-6
    enabled: bool = True

    def __post_init__(self):
        self.schedule = tuple((int(s), float(lam)) for s, lam in self.schedule)
        self.roles = tuple(self.roles)
        if not self.schedule:
            raise ParameterError("empty lambda schedule")
        steps = [s for s, _ in self.schedule]
        lams = [lam for _, lam in self.schedule]
        if steps[0] != 0:
            raise ParameterError("schedule must start at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ParameterError("schedule thresholds must be strictly increasing")
        if any(lam <= 0 for lam in lams):
            raise ParameterError("schedule lambdas must be positive")
        if any(b > a for a, b in zip(lams, lams[1:])):
            raise ParameterError("schedule lambdas must be non-increasing")

    @classmethod
    def from_strings(cls, schedule: str | None = None, lambda0: float | None = None,
                     roles: str | None = None, **kw) -> "OrthoConfig":
        """Build from config-file values (``"0:1e-4,10000:1e-5"``, ``"a,b"``)."""
        sched = DEFAULT_SCHEDULE
        if schedule:
            sched = tuple(
                (int(part.split(":")[0]), float(part.split(":")[1]))
                for part in schedule.split(",") if part.strip()
            )
        if lambda0 is not None:
            factor = float(lambda0) / sched[0][1]
            sched = tuple((s, lam * factor) for s, lam in sched)
        role_t = DEFAULT_ROLES if roles is None else tuple(
            r.strip() for r in roles.split(",") if r.strip())
        return cls(schedule=sched, roles=role_t, **kw)


def current_lambda(config: OrthoConfig, step: int) -> float:
    """Weight of the last schedule entry whose threshold is <= ``step``."""
    if step < 0:
        raise ParameterError("step must be non-negative")
    lam = config.schedule[0][1]
    for threshold, value in config.schedule:
        if step >= threshold:
            lam = value
    return lam


def reshape_for_ortho(weight) -> np.ndarray | Tensor:
    """Matrix view of a weight with at least as many rows as columns.

    Conv kernels O x I x k x k become (I*k*k) x O; 2-D weights are kept and
    transposed only if they are wider than tall. Works on arrays and Tensors.
    """
    is_tensor = isinstance(weight, Tensor)
    shape = weight.shape
    if int(np.prod(shape)) <= 1 or len(shape) < 2:
        raise ParameterError(f"weight of shape {shape} is not a matrix or kernel")
    if len(shape) == 4:
        o = shape[0]
        if is_tensor:
            mat = transpose(reshape(weight, (o, -1)), (1, 0))
        else:
            mat = np.asarray(weight).reshape(o, -1).T
    elif len(shape) == 2:
        mat = weight
    else:
        raise ParameterError(f"unsupported weight rank {len(shape)}")
    if mat.shape[0] < mat.shape[1]:
        mat = transpose(mat, (1, 0)) if is_tensor else mat.T
    return mat


def top_singular_pair(a: np.ndarray, iters: int = 20, tol: float = 1e-6, v0=None):
    """Power iteration on ``A^T A``. Returns ``(sigma, u, v)``.

    Starts from the normalised all-ones vector unless ``v0`` is given. A zero
    matrix yields sigma 0 and zero vectors.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[1]
    v = np.ones(n) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    nv = np.linalg.norm(v)
    if nv == 0:
        v = np.ones(n)
        nv = np.linalg.norm(v)
    v /= nv
    sigma = 0.0
    for _ in range(max(1, iters)):
        av = a @ v
        w = a.T @ av
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, np.zeros(a.shape[0]), np.zeros(n)
        v = w / nw
        new_sigma = float(np.linalg.norm(a @ v))
        if abs(new_sigma - sigma) < tol:
            sigma = new_sigma
            break
        sigma = new_sigma
    if sigma == 0.0:
        return 0.0, np.zeros(a.shape[0]), np.zeros(n)
    u = (a @ v) / sigma
    return sigma, u, v


def spectral_norm(a, iters: int = 500, tol: float = 1e-12) -> float:
    """Largest singular value of ``a`` (cold start, so the defaults iterate longer)."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise ParameterError("spectral_norm needs a finite matrix")
    return top_singular_pair(a, iters, tol)[0]


def ortho_penalty(w: Tensor, iters: int = 20, tol: float = 1e-6, v0=None,
                  return_vector: bool = False):
    """Differentiable ``||W^T W - I||_sigma`` for a matrix Tensor ``w``."""
    w = _as_tensor(w)
    gram = matmul(swap_last(w), w)
    k = w.shape[1]
    b = sub(gram, np.eye(k, dtype=w.dtype))
    _, u, v = top_singular_pair(b.data, iters, tol, v0)
    u_row = u.reshape(1, k).astype(w.dtype)
    v_col = v.reshape(k, 1).astype(w.dtype)
    out = reshape(matmul(matmul(u_row, b), v_col), ())
    return (out, v) if return_vector else out


class OrthoRegularizer:
    """Sums the penalty over role-matched weights with warm-started power iteration."""

    def __init__(self, config: OrthoConfig | None = None):
        self.config = OrthoConfig() if config is None else config
        self._vectors: dict[str, np.ndarray] = {}

    def targets(self, params: Iterable) -> list:
        out = []
        for p in params:
            if getattr(p, "role", None) not in self.config.roles:
                continue
            if p.ndim not in (2, 4) or p.data.size <= 1:
                continue
            out.append(p)
        return out

    def raw_penalty(self, params: Iterable) -> Tensor | None:
        """Unweighted sum of penalties; None when nothing is targeted."""
        total = None
        for p in self.targets(params):
            key = getattr(p, "name", str(id(p)))
            mat = reshape_for_ortho(p)
            pen, v = ortho_penalty(mat, self.config.iters, self.config.tol,
                                   v0=self._vectors.get(key), return_vector=True)
            if np.linalg.norm(v) > 0:
                self._vectors[key] = v
            total = pen if total is None else total + pen
        return total

    def __call__(self, params: Iterable, step: int) -> Tensor:
        return total_ortho_loss(params, self.config, step, self)


def total_ortho_loss(params: Iterable, config: OrthoConfig, step: int,
                     regularizer: OrthoRegularizer | None = None) -> Tensor:
    """``current_lambda(step) * sum of penalties`` over weights whose role is targeted."""
    reg = OrthoRegularizer(config) if regularizer is None else regularizer
    if not config.enabled:
        return Tensor(0.0)
    raw = reg.raw_penalty(params)
    if raw is None:
        return Tensor(0.0)
    return scale(raw, current_lambda(config, step))


def descend_penalty(w, steps: int = 500, lr: float = 0.1, step_rule: str = "polyak",
                    target: float = 1e-3, iters: int = 200, tol: float = 1e-12):
    """Gradient descent on ``ortho_penalty`` alone, in float64.

    ``step_rule="fixed"`` uses ``lr`` every step. ``"polyak"`` caps it at
    ``penalty / ||grad||^2``; the penalty is a norm whose gradient does not
    shrink near the optimum, so a fixed step keeps overshooting there.
    Stops once the penalty drops below ``target``. Returns ``(matrix, history)``.
    """
    if step_rule not in ("polyak", "fixed"):
        raise ParameterError(f"unknown step rule {step_rule!r}")
    history = []
    with high_precision():
        mat = Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)
        v = None
        for _ in range(steps + 1):
            mat.grad = None
            with Tape() as tape:
                pen, v = ortho_penalty(mat, iters, tol, v0=v, return_vector=True)
            value = float(pen.data)
            history.append(value)
            if value < target or len(history) > steps:
                break
            tape.backward(pen)
            g = mat.grad
            step = lr
            if step_rule == "polyak":
                gg = float(np.sum(g * g))
                step = min(lr, value / gg) if gg > 0 else lr
            mat.data = mat.data - step * g
    return mat.data, history
