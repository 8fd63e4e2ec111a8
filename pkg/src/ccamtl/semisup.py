"""Mean teacher, pseudo-labels and the two-term semi-supervised loss."""

from __future__ import annotations

import logging
from typing import Iterable, Mapping

import numpy as np

from .exceptions import StateError
from .nn import IGNORE_INDEX, cross_entropy
from .tensor import Tensor, add

log = logging.getLogger(__name__)


class TeacherState:
    """Exponential moving average of a named set of student parameters."""

    def __init__(self, params: Mapping[str, np.ndarray] | Iterable, alpha: float = 0.99):
        if not 0.0 <= alpha <= 1.0:
            raise StateError(f"alpha must lie in [0, 1], got {alpha}")
        self.alpha = float(alpha)
        self.params = {name: np.array(value, copy=True) for name, value in _named_arrays(params)}

    def __repr__(self):
        return f"TeacherState({len(self.params)} tensors, alpha={self.alpha})"

    def tensors(self) -> dict[str, Tensor]:
        """Gradient-free tensor views for a teacher forward pass."""
        return {name: Tensor._wrap(arr) for name, arr in self.params.items()}


def _named_arrays(params):
    if isinstance(params, Mapping):
        for name, value in params.items():
            yield name, value.data if isinstance(value, Tensor) else np.asarray(value)
    else:
        for p in params:
            yield p.name, p.data


def ema_update(teacher: TeacherState, student) -> TeacherState:
    """In place ``theta_T <- alpha * theta_T + (1 - alpha) * theta_student``."""
    student = dict(_named_arrays(student))
    if set(student) != set(teacher.params):
        missing = set(teacher.params) ^ set(student)
        raise StateError(f"teacher/student parameter names differ: {sorted(missing)[:5]}")
    a = teacher.alpha
    for name, theta in teacher.params.items():
        s = student[name]
        if s.shape != theta.shape:
            raise StateError(f"shape mismatch for {name}: {theta.shape} vs {s.shape}")
        if a == 1.0:
            continue
        if a == 0.0:
            theta[...] = s
        else:
            theta *= a
            theta += (1.0 - a) * s
    return teacher


def pseudo_label(logits) -> np.ndarray:
    """Per-pixel argmax over classes (axis 1); ties go to the lowest class id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.int64)


def ssl_loss(logits_l: Tensor, labels_l, logits_u: Tensor | None = None, labels_u=None,
             ignore_index: int = IGNORE_INDEX) -> Tensor:
    """``CE(student(I_L), S_L) + CE(student(I_U), S_U)``.

    The unlabeled term is skipped when ``logits_u`` is None or has no samples.
    A term whose pixels are all ignored contributes zero.
    """
    terms = [("labeled", logits_l, labels_l)]
    if logits_u is not None and logits_u.shape[0] > 0:
        terms.append(("unlabeled", logits_u, labels_u))
    total = None
    for name, logits, labels in terms:
        if not np.any(np.asarray(labels) != ignore_index):
            log.warning("every pixel of the %s term is ignored; it contributes 0", name)
        ce = cross_entropy(logits, labels, ignore_index)
        total = ce if total is None else add(total, ce)
    return total
