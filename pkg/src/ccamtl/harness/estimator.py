"""Joint segmentation + depth estimator with a scikit-learn style interface."""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..augment import Sample, coloraug, random_affinemix
from ..exceptions import DivergenceError, NoMovableObject
from ..metrics import ConfusionMatrix, depth_metrics, inter_channel_correlation
from ..nn import IGNORE_INDEX
from ..regularize import OrthoConfig, OrthoRegularizer, total_ortho_loss
from ..semisup import TeacherState, ema_update, pseudo_label, ssl_loss
from ..tensor import Tape, Tensor, log, mean, sub, tabs
from ..validation import check_depths, check_images, check_label_maps
from .model import DEPTH, ENCODER, SEG, SHARE, ToyModel

log_ = logging.getLogger(__name__)


def toy_depth_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute error in log depth; ``pred`` is N x 1 x H x W."""
    gt = np.asarray(gt)
    if gt.ndim == 3:
        gt = gt[:, None]
    if pred.shape != gt.shape:
        raise ValueError(f"depth prediction {pred.shape} and target {gt.shape} differ")
    return mean(tabs(sub(log(pred), np.log(gt).astype(pred.dtype))))


class MultiTaskSegDepth(BaseEstimator):
    """Shared-encoder network predicting labels and depth, trained jointly.

    ``fit`` takes images ``X`` (N x H x W x 3), label maps ``y`` and depth maps.
    Samples whose label map is entirely ``255`` count as unlabeled: they feed
    the depth loss and, with ``ssl``, the mean-teacher term.

    Parameters
    ----------
    mode : {"none", "gated", "ccam"}
        Cross-task link between the deepest decoder features.
    steps, lr, lr_decay_step : SGD schedule; ``lr`` drops by 10x at
        ``lr_decay_step`` (default: half of ``steps``).
    batch_size : labeled images per step; unlabeled images per step are
        ``batch_size * unlabeled_ratio``.
    ssl, ssl_alpha : enable the mean-teacher term and its EMA coefficient.
    affinemix, coloraug : augmentations for the unlabeled term and the
        depth input respectively.
    ortho, ortho_lambda0, ortho_schedule, ortho_roles : orthogonal
        regularization settings (see :class:`ccamtl.regularize.OrthoConfig`).
    """

    def __init__(self, mode="ccam", n_classes=5, channels=16, reduction=4, steps=2000, lr=0.05,
                 lr_decay_step=None, batch_size=2, grad_clip=5.0, ssl=True, ssl_alpha=0.99,
                 unlabeled_ratio=1, affinemix=True, coloraug=False, movable=(3, 4),
                 ortho=True, ortho_lambda0=None, ortho_schedule=None, ortho_roles=None,
                 random_state=0):
        self.mode = mode
        self.n_classes = n_classes
        self.channels = channels
        self.reduction = reduction
        self.steps = steps
        self.lr = lr
        self.lr_decay_step = lr_decay_step
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.ssl = ssl
        self.ssl_alpha = ssl_alpha
        self.unlabeled_ratio = unlabeled_ratio
        self.affinemix = affinemix
        self.coloraug = coloraug
        self.movable = movable
        self.ortho = ortho
        self.ortho_lambda0 = ortho_lambda0
        self.ortho_schedule = ortho_schedule
        self.ortho_roles = ortho_roles
        self.random_state = random_state

    # -- setup -------------------------------------------------------------

    def _ortho_config(self) -> OrthoConfig:
        return OrthoConfig.from_strings(self.ortho_schedule, self.ortho_lambda0,
                                        self.ortho_roles, enabled=self.ortho)

    def _init_state(self):
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        self.model_ = ToyModel(self.n_classes, self.mode, self.channels, self.reduction,
                               rng=np.random.default_rng(seeds[0]))
        self._batch_rng = np.random.default_rng(seeds[1])
        self._aug_rng = np.random.default_rng(seeds[2])
        names = self.model_.names([ENCODER, SEG, SHARE])
        self.teacher_ = TeacherState({n: self.model_.params[n] for n in names}, self.ssl_alpha)
        self.ortho_config_ = self._ortho_config()
        self.regularizer_ = OrthoRegularizer(self.ortho_config_)
        self.n_iter_ = 0
        self.current_miou_ = 0.0
        self.last_loss_ = float("nan")

    def teacher_weights(self) -> dict[str, Tensor]:
        return self.teacher_.tensors()

    def frozen_depth_weights(self) -> dict[str, Tensor]:
        return {n: self.model_.params[n].detach() for n in self.model_.names([DEPTH])}

    # -- training ------------------------------------------------------------

    def fit(self, X, y, depth, callback: Callable | None = None):
        """Train for ``steps`` SGD steps.

        ``callback(estimator, step)`` runs before the first step (``step=0``)
        and after every step; returning nothing is fine.
        """
        X = check_images(X)
        n, h, w = X.shape[:3]
        y = check_label_maps(y, self.n_classes, (n, h, w))
        depth = check_depths(depth, (n, h, w))
        self._init_state()
        labeled = np.flatnonzero((y != IGNORE_INDEX).any(axis=(1, 2)))
        unlabeled = np.flatnonzero(~(y != IGNORE_INDEX).any(axis=(1, 2)))
        if labeled.size == 0:
            raise ValueError("fit needs at least one labeled sample")
        decay = self.lr_decay_step if self.lr_decay_step is not None else self.steps // 2
        if callback is not None:
            callback(self, 0)
        for step in range(self.steps):
            lr = self.lr * (0.1 if step >= decay else 1.0)
            self.last_loss_ = self._train_step(X, y, depth, labeled, unlabeled, step, lr)
            self.n_iter_ = step + 1
            if callback is not None:
                callback(self, step + 1)
        return self

    def unlabeled_logits(self, images) -> Tensor:
        """Student seg logits on (augmented) unlabeled images.

        Depth-decoder weights enter as constants, so losses built on these
        logits never update them.
        """
        logits, _ = self.model_.forward(images, self.frozen_depth_weights(), heads=("seg",))
        return logits

    def _train_step(self, X, y, depth, labeled, unlabeled, step, lr) -> float:
        rng = self._batch_rng
        li = rng.choice(labeled, self.batch_size)
        use_ssl = self.ssl and unlabeled.size > 0
        ui = rng.choice(unlabeled, self.batch_size * self.unlabeled_ratio) if use_ssl else \
            np.empty(0, dtype=np.int64)
        idx = np.concatenate([li, ui])
        x1 = X[idx]
        y1 = np.concatenate([y[li], np.full((ui.size,) + y.shape[1:], IGNORE_INDEX)])
        d1 = depth[idx]
        if self.coloraug and self.current_miou_ >= 0.6:
            pred = pseudo_label(self._teacher_logits(x1))
            x1 = np.stack([coloraug(img, p, self.movable, self._aug_rng, self.current_miou_)
                           for img, p in zip(x1, pred)])
        if use_ssl:
            s_u = pseudo_label(self._teacher_logits(X[ui]))
        params = self.model_.parameters()
        for p in params:
            p.grad = None
        with Tape() as tape:
            seg1, dep1 = self.model_.forward(x1)
            loss_depth = toy_depth_loss(dep1, d1)
            if use_ssl:
                x_u, s_u = self._augment_unlabeled(X[ui], dep1.data[len(li):, 0], s_u)
                logits_u = self.unlabeled_logits(x_u)
                loss_seg = ssl_loss(seg1, y1, logits_u, s_u)
            else:
                loss_seg = ssl_loss(seg1, y1)
            loss = loss_seg + loss_depth
            if self.ortho:
                loss = loss + total_ortho_loss(params, self.ortho_config_, step, self.regularizer_)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        tape.backward(loss)
        self._sgd(params, lr)
        if self.ssl:
            ema_update(self.teacher_, {n: self.model_.params[n] for n in self.teacher_.params})
        return value

    def _augment_unlabeled(self, images, pred_depth, labels):
        if not self.affinemix:
            return images, labels
        out_x, out_y = [], []
        for img, d, lab in zip(images, pred_depth, labels):
            sample = Sample(img, d, lab)
            try:
                sample, _ = random_affinemix(sample, self.movable, self._aug_rng)
            except NoMovableObject:
                pass
            out_x.append(sample.image)
            out_y.append(sample.label)
        return np.stack(out_x), np.stack(out_y).astype(np.int64)

    def _sgd(self, params, lr):
        grads = [p.grad for p in params if p.grad is not None]
        factor = 1.0
        if self.grad_clip is not None and grads:
            norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
            if norm > self.grad_clip:
                factor = self.grad_clip / norm
        for p in params:
            if p.grad is not None:
                p.data -= (lr * factor * p.grad).astype(p.data.dtype)
                p.grad = None

    # -- inference -----------------------------------------------------------

    def _teacher_logits(self, images) -> np.ndarray:
        logits, _ = self.model_.forward(images, self.teacher_weights(), heads=("seg",))
        return logits.data

    def _batches(self, X, size=8):
        for i in range(0, len(X), size):
            yield X[i:i + size]

    def predict_logits(self, X, teacher: bool = False) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, allow_single=True)
        weights = self.teacher_weights() if teacher else None
        outs = [self.model_.forward(b, weights, heads=("seg",))[0].data for b in self._batches(X)]
        return np.concatenate(outs)

    def predict(self, X, teacher: bool = False) -> np.ndarray:
        """Per-pixel class ids, N x H x W."""
        return pseudo_label(self.predict_logits(X, teacher))

    def predict_depth(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, allow_single=True)
        outs = [self.model_.forward(b, heads=("depth",))[1].data[:, 0] for b in self._batches(X)]
        return np.concatenate(outs)

    def score(self, X, y) -> float:
        """Mean IoU of the student's predictions."""
        pred = self.predict(X)
        cm = ConfusionMatrix(self.n_classes).update(pred, np.asarray(y))
        return cm.miou()

    def evaluate(self, X, y, depth) -> dict:
        """mIoU, per-class IoU, depth metrics, decoder inter-channel correlation."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        y = check_label_maps(y, self.n_classes, X.shape[:3])
        depth = check_depths(depth, X.shape[:3])
        cm = ConfusionMatrix(self.n_classes)
        preds, icc = [], {"seg": [], "depth": []}
        for i in range(0, len(X), 8):
            feats = {}
            seg, dep = self.model_.forward(X[i:i + 8], features=feats)
            cm.update(pseudo_label(seg), y[i:i + 8])
            preds.append(dep.data[:, 0])
            for task in icc:
                icc[task].append([inter_channel_correlation(f) for f in feats[task]])
        dm = depth_metrics(np.concatenate(preds), depth)
        raw = self.regularizer_.raw_penalty(self.model_.parameters())
        out = {"miou": cm.miou(), "ious": cm.iou(), **dm.as_dict(),
               "icc_seg": float(np.mean(icc["seg"])), "icc_depth": float(np.mean(icc["depth"])),
               "ortho_penalty": 0.0 if raw is None else float(raw.data)}
        self.current_miou_ = out["miou"]
        return out

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "model_")
        out = {n: p.data for n, p in self.model_.params.items()}
        out.update({f"teacher.{n}": a for n, a in self.teacher_.params.items()})
        return out

    def load_state_dict(self, state: dict) -> "MultiTaskSegDepth":
        self._init_state()
        for n, p in self.model_.params.items():
            if n not in state:
                raise KeyError(f"checkpoint lacks {n}")
            if state[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data = np.array(state[n], dtype=p.data.dtype)
        for n in self.teacher_.params:
            key = f"teacher.{n}"
            self.teacher_.params[n] = np.array(state.get(key, self.model_.params[n].data))
        return self
