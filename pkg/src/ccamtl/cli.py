"""Command-line entry point: ``ccamtl <subcommand> ...``.

Exit codes: 0 success, 1 bad input or usage, 2 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import nbt, pnm
from .augment import SCALE_RANGE, AffineMixParams, affinemix, sample_affinemix_params
from .exceptions import CcamError, InputError, NoMovableObject, ParameterError
from .gradsuite import TOLERANCE, run_suite
from .harness.config import load_config
from .harness.scenes import MOVABLE, SceneSpec, generate_scene
from .harness.train import build_data, csv_columns, load_estimator, train
from .metrics import ConfusionMatrix, depth_metrics, inter_channel_correlation

log = logging.getLogger("ccamtl")
PARAMS_NAME = "params.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, _, value = text.partition("=")
    return key.strip(), value.strip()


# -- gen-scenes ---------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    spec = SceneSpec(args.height, args.width, movable=MOVABLE, n_objects=tuple(args.objects))
    out = Path(args.out)
    children = np.random.SeedSequence(args.seed).spawn(args.n)
    for k, child in enumerate(children):
        sample = generate_scene(spec, np.random.default_rng(child))
        pnm.write_triplet(out / f"scene_{k:04d}", sample, args.depth_scale)
    print(f"wrote {args.n} scenes to {out}")
    return 0


# -- augment ------------------------------------------------------------------

def _triplet_seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def cmd_augment(args) -> int:
    src = Path(args.inp)
    triplets = pnm.find_triplets(src)
    single = triplets == [src]
    seeds = _triplet_seeds(args.seed, len(triplets))
    for path, seed in zip(triplets, seeds):
        sample, depth_scale = pnm.read_triplet(path)
        dest = Path(args.out) if single else Path(args.out) / path.name
        text = None
        if args.replay:
            rp = Path(args.replay)
            rp = rp if rp.is_file() else (rp / PARAMS_NAME if single else rp / path.name / PARAMS_NAME)
            try:
                text = rp.read_text(encoding="utf-8")
            except OSError as e:
                raise InputError(f"cannot read replay parameters: {e}") from None
        if text is not None and "skipped=" in text:
            out_sample, params_text = sample, text
        else:
            try:
                if text is not None:
                    params = AffineMixParams.from_text(text)
                else:
                    params = _draw_params(sample, args, seed)
                out_sample = affinemix(sample, params)
                params_text = params.to_text()
            except NoMovableObject:
                out_sample, params_text = sample, f"seed={seed}\nskipped=no-movable-object\n"
        pnm.write_triplet(dest, out_sample, depth_scale)
        (dest / PARAMS_NAME).write_text(params_text, encoding="utf-8")
    print(f"augmented {len(triplets)} triplet(s) into {args.out}")
    return 0


def _draw_params(sample, args, seed: int) -> AffineMixParams:
    rng = np.random.default_rng(seed)
    params = sample_affinemix_params(sample, args.movable, rng, seed=seed)
    if args.scale is not None:
        params.scale = float(args.scale)
    return params


# -- train / eval / diagnose --------------------------------------------------

def _config_from_args(args):
    overrides = dict(args.set or [])
    for key in ("steps", "mode", "seed", "out"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    records = train(config)
    last = records[-1]
    print(f"step {last['step']} miou {last['miou']:.4f} absrel {last['absrel']:.4f} -> {config.out}")
    return 0


def _load_run(run_dir):
    run = Path(run_dir)
    if not (run / "config.txt").exists() or not (run / "model.ckpt").exists():
        raise InputError(f"{run} lacks config.txt or model.ckpt")
    config = load_config(run / "config.txt")
    return config, load_estimator(config, run / "model.ckpt")


def _eval_data(config, data_dir):
    if data_dir is None:
        return build_data(config)[1]
    samples = [pnm.read_triplet(p)[0] for p in pnm.find_triplets(data_dir)]
    return (np.stack([s.image for s in samples]), np.stack([s.label for s in samples]),
            np.stack([s.depth for s in samples]))


def cmd_eval(args) -> int:
    config, est = _load_run(args.run)
    x, y, d = _eval_data(config, args.data)
    ev = est.evaluate(x, y, d)
    cols = csv_columns(est.n_classes)[1:-1]
    values = [ev["miou"], *ev["ious"], *(ev[k] for k in cols[1 + est.n_classes:])]
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(cols)
    writer.writerow([repr(float(v)) for v in values])
    return 0


def cmd_diagnose(args) -> int:
    config, est = _load_run(args.run)
    x, _, _ = _eval_data(config, args.data)
    feats = {}
    est.model_.forward(x[:args.n], features=feats)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for task in ("seg", "depth"):
        for k, layer in enumerate(feats[task], 1):
            print(f"icc {task} layer{k} {inter_channel_correlation(layer)!r}")
    if "affinity" in feats:
        m = feats["affinity"].data
        print(f"affinity {m.shape[0]}x{m.shape[1]} min {m.min():.4f} max {m.max():.4f}")
        if out:
            nbt.save(out / "affinity.nbt", m)
    else:
        print(f"affinity none (mode={config.mode})")
    return 0


# -- gradcheck / metrics ------------------------------------------------------

def cmd_gradcheck(args) -> int:
    report = run_suite(args.seed, args.eps)
    worst = max(report.values())
    for name, err in report.items():
        print(f"{name} {err:.3e}")
    print(f"max_rel_err {worst:.3e}")
    if worst >= TOLERANCE:
        log.error("gradient check failed: %.3e >= %.0e", worst, TOLERANCE)
        return 2
    return 0


def cmd_metrics(args) -> int:
    pred_dirs = pnm.find_triplets(args.pred) if args.pred_triplets else _label_dirs(args.pred)
    gt_dirs = pnm.find_triplets(args.gt) if args.pred_triplets else _label_dirs(args.gt)
    if [p.name for p in pred_dirs] != [g.name for g in gt_dirs]:
        raise InputError("prediction and ground-truth directories do not pair up by name")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cm = ConfusionMatrix(args.n_classes)
    preds, gts = [], []
    for p, g in zip(pred_dirs, gt_dirs):
        if (p / pnm.LABEL_NAME).exists():
            cm.update(pnm.read_label(p / pnm.LABEL_NAME), pnm.read_label(g / pnm.LABEL_NAME))
        if (p / pnm.DEPTH_NAME).exists():
            preds.append(pnm.read_depth(p / pnm.DEPTH_NAME)[0])
            gts.append(pnm.read_depth(g / pnm.DEPTH_NAME)[0])
    if cm.total:
        with open(out / "segmentation.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "iou"])
            for k, v in enumerate(cm.iou()):
                w.writerow([k, repr(float(v))])
            w.writerow(["miou", repr(cm.miou())])
        print(f"miou {cm.miou():.4f}")
    if preds:
        gt = np.stack(gts)
        dm = depth_metrics(np.stack(preds), gt, gt > 0)
        with open(out / "depth.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            vals = dm.as_dict()
            w.writerow(list(vals))
            w.writerow([repr(float(v)) for v in vals.values()])
        print(f"absrel {dm.absrel:.4f}")
    if not cm.total and not preds:
        raise InputError("no label.pgm or depth.pgm pairs found")
    return 0


def _label_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    if (root / pnm.LABEL_NAME).exists() or (root / pnm.DEPTH_NAME).exists():
        return [root]
    return sorted(p for p in root.iterdir()
                  if p.is_dir() and ((p / pnm.LABEL_NAME).exists() or (p / pnm.DEPTH_NAME).exists()))


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccamtl", description="Cross-task attention and augmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-scenes", help="write synthetic image/depth/label triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--objects", type=_int_list, default=(2, 6), help="min,max surfaces")
    p.add_argument("--depth-scale", type=float, default=pnm.DEFAULT_DEPTH_SCALE)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("augment", help="AffineMix a triplet or a directory of triplets")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, help=f"fixed depth scale (default: uniform in {SCALE_RANGE})")
    p.add_argument("--movable", type=_int_list, default=MOVABLE)
    p.add_argument("--replay", help="params.txt file, or a directory of earlier augment output")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train on synthetic scenes")
    p.add_argument("--config")
    p.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("none", "gated", "ccam"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a trained run"),
                              ("diagnose", cmd_diagnose, "feature correlation and affinity dump")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run", required=True, help="directory written by train")
        p.add_argument("--data", help="triplet directory (default: the run's validation scenes)")
        p.add_argument("--seed", type=int, default=0)
        if name == "diagnose":
            p.add_argument("--out", help="directory for affinity.nbt")
            p.add_argument("--n", type=int, default=8, help="images to pass through")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("metrics", help="segmentation and depth metrics for prediction/gt pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-classes", type=int, default=5)
    p.add_argument("--pred-triplets", action="store_true", help="require full triplets")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        return args.func(args)
    except (InputError, ParameterError, NoMovableObject, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CcamError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
