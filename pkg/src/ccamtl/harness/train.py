"""Config-driven training run on synthetic scenes: metrics CSV plus checkpoint."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .. import nbt
from ..nn import IGNORE_INDEX
from .config import RunConfig
from .estimator import MultiTaskSegDepth
from .scenes import SceneSpec, generate_dataset

log = logging.getLogger(__name__)

DEPTH_COLUMNS = ("absrel", "sqrel", "rmse", "a1", "a2", "a3")


def csv_columns(n_classes: int) -> list[str]:
    return (["step", "miou"] + [f"iou_{k}" for k in range(n_classes)] + list(DEPTH_COLUMNS)
            + ["icc_seg", "icc_depth", "ortho_penalty", "loss"])


def build_data(config: RunConfig):
    """Train/val scenes for a config; label maps of unlabeled train scenes are all 255.

    Train and val draw from disjoint seed streams, and which train scenes keep
    their labels is fixed by the seed as well.
    """
    spec = SceneSpec(config.height, config.width, movable=config.movable,
                     n_objects=config.n_objects)
    train_seq, val_seq, split_seq = np.random.SeedSequence(config.seed).spawn(3)
    x, y, d = generate_dataset(spec, config.n_train, seed=train_seq)
    xv, yv, dv = generate_dataset(spec, config.n_val, seed=val_seq)
    n_lab = max(1, int(round(config.labeled_fraction * config.n_train)))
    order = np.random.default_rng(split_seq).permutation(config.n_train)
    y = y.astype(np.int64)
    y[order[n_lab:]] = IGNORE_INDEX
    return (x, y, d), (xv, yv, dv)


def make_estimator(config: RunConfig) -> MultiTaskSegDepth:
    return MultiTaskSegDepth(
        mode=config.mode, channels=config.channels, reduction=config.reduction,
        steps=config.steps, lr=config.lr, lr_decay_step=config.lr_decay_step,
        batch_size=config.batch_size, grad_clip=config.grad_clip, ssl=config.ssl_enabled,
        ssl_alpha=config.ssl_alpha, unlabeled_ratio=config.ssl_unlabeled_ratio,
        affinemix=config.affinemix_enabled, coloraug=config.coloraug_enabled,
        movable=config.movable, ortho=config.ortho_enabled, ortho_lambda0=config.ortho_lambda0,
        ortho_schedule=config.ortho_schedule, ortho_roles=config.ortho_roles,
        random_state=config.seed)


def _row(step: int, ev: dict, loss: float) -> list[str]:
    vals = [step, ev["miou"], *ev["ious"], *(ev[k] for k in DEPTH_COLUMNS),
            ev["icc_seg"], ev["icc_depth"], ev["ortho_penalty"], loss]
    return [str(v) if isinstance(v, (int, np.integer)) else repr(float(v)) for v in vals]


def train(config: RunConfig, out: str | Path | None = None) -> list[dict]:
    """Train, evaluating on the val scenes at step 0, every ``eval_every`` steps and at the end.

    Writes ``metrics.csv``, ``config.txt`` and ``model.ckpt`` (student and
    ``teacher.*`` weights) into the output directory and returns the
    evaluation records.
    """
    out = Path(config.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    (train_x, train_y, train_d), (val_x, val_y, val_d) = build_data(config)
    est = make_estimator(config)
    records = []

    def record(e: MultiTaskSegDepth, step: int):
        if step != 0 and step % config.eval_every and step != config.steps:
            return
        ev = e.evaluate(val_x, val_y, val_d)
        ev["step"] = step
        ev["loss"] = e.last_loss_ if step else float("nan")
        records.append(ev)
        log.info("step %d miou %.4f absrel %.4f", step, ev["miou"], ev["absrel"])

    est.fit(train_x, train_y, train_d, callback=record)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_columns(est.n_classes))
        for ev in records:
            writer.writerow(_row(ev["step"], ev, ev["loss"]))
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    nbt.save_checkpoint(out / "model.ckpt", est.state_dict())
    return records


def load_estimator(config: RunConfig, checkpoint) -> MultiTaskSegDepth:
    return make_estimator(config).load_state_dict(nbt.load_checkpoint(checkpoint))
