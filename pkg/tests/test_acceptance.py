"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line (also repeated in the
pytest terminal summary). Criteria 6-8 train the toy model many times and take
roughly half an hour on one core; set ``CCAMTL_SKIP_TRAINING=1`` to skip them.
"""

import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from ccamtl import pnm
from ccamtl.augment import (AffineMixParams, affine_warp, affinemix, compute_offsets,
                            select_movable_object)
from ccamtl.ccam import CcamBlock, GatedBlock
from ccamtl.cli import main
from ccamtl.exceptions import NoMovableObject
from ccamtl.gradsuite import TOLERANCE, run_suite
from ccamtl.harness.config import RunConfig
from ccamtl.harness.model import ToyModel
from ccamtl.harness.scenes import MOVABLE, SceneSpec, generate_scene
from ccamtl.harness.train import train
from ccamtl.metrics import ConfusionMatrix, depth_metrics, inter_channel_correlation
from ccamtl.regularize import (OrthoConfig, current_lambda, descend_penalty, ortho_penalty,
                               spectral_norm)
from ccamtl.tensor import Tensor, high_precision
from test_augment import composite_oracle, flat_sample, params_for
from test_metrics import depth_oracle, icc_oracle, iou_oracle
from test_regularize import jacobi_eigenvalues

RESULTS = []
SKIP_TRAINING = os.environ.get("CCAMTL_SKIP_TRAINING") == "1"
needs_training = pytest.mark.skipif(SKIP_TRAINING, reason="CCAMTL_SKIP_TRAINING=1")


@contextmanager
def criterion(n, title):
    notes = []
    try:
        yield notes
    except BaseException:
        line = f"criterion {n} FAIL  {title}  {'; '.join(notes)}".rstrip()
        RESULTS.append((n, line))
        print(line)
        raise
    line = f"criterion {n} PASS  {title}  {'; '.join(notes)}".rstrip()
    RESULTS.append((n, line))
    print(line)


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite, 20 seeds, rel err < 1e-4, < 60 s") as notes:
        start = time.perf_counter()
        worst = {}
        for seed in range(20):
            for name, err in run_suite(seed).items():
                worst[name] = max(worst.get(name, 0.0), err)
        elapsed = time.perf_counter() - start
        name = max(worst, key=worst.get)
        notes.append(f"{len(worst)} cases, worst {worst[name]:.2e} ({name}), {elapsed:.1f} s")
        assert "ccam_forward" in worst
        assert worst[name] < TOLERANCE
        assert elapsed < 60


def _changed_channels(block, a, b, channel):
    base, _, _ = block(Tensor(a), Tensor(b))
    b2 = b.copy()
    b2[:, channel] += 1.0
    moved, _, _ = block(Tensor(a), Tensor(b2))
    return np.flatnonzero(np.abs(moved.data - base.data).max(axis=(0, 2, 3)) > 1e-6)


def test_criterion_2_ccam_structure():
    with criterion(2, "CCAM structure: C x C affinity in (0,1), perturbation, size-free") as notes:
        rng = np.random.default_rng(0)
        with high_precision():
            for c in (2, 6, 16):
                block = CcamBlock(c, 2, rng)
                a, b = rng.normal(size=(2, c, 7, 5)), rng.normal(size=(2, c, 7, 5))
                _, _, m = block(Tensor(a), Tensor(b))
                assert m.shape == (c, c)
                assert ((m.data > 0) & (m.data < 1)).all()
            a, b = rng.normal(size=(2, 6, 5, 5)), rng.normal(size=(2, 6, 5, 5))
            gated_hits = [len(_changed_channels(GatedBlock(6, rng), a, b, k)) for k in range(6)]
            ccam_hits = [len(_changed_channels(CcamBlock(6, 2, rng), a, b, k)) for k in range(6)]
        notes.append(f"gated touches {set(gated_hits)} channel(s), ccam {set(ccam_hits)}")
        assert gated_hits == [1] * 6
        assert ccam_hits == [6] * 6
        model = ToyModel(mode="ccam", channels=8, reduction=2)
        count = model.block_parameter_count()
        for size in (16, 32, 64):
            feats = {}
            model.forward(rng.random((1, size, size, 3)), features=feats)
            assert feats["affinity"].shape == (8, 8)
        assert ToyModel(mode="ccam", channels=8, reduction=2).block_parameter_count() == count


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_3_affinemix(tmp_path):
    with criterion(3, "AffineMix: identity, occlusion oracle, closure, area, replay") as notes:
        scenes = tmp_path / "scenes"
        assert main(["gen-scenes", "--out", str(scenes), "--n", "4", "--seed", "1"]) == 0
        assert main(["augment", "--in", str(scenes), "--out", str(tmp_path / "s1"),
                     "--scale", "1"]) == 0
        for d in pnm.find_triplets(scenes):
            for name in (pnm.IMAGE_NAME, pnm.DEPTH_NAME, pnm.LABEL_NAME):
                assert (d / name).read_bytes() == (tmp_path / "s1" / d.name / name).read_bytes()

        spec = SceneSpec(32, 32)
        checked = 0
        for child in np.random.SeedSequence(7).spawn(100):
            rng = np.random.default_rng(child)
            scene = generate_scene(spec, rng)
            try:
                obj = select_movable_object(scene, MOVABLE, rng)
            except NoMovableObject:
                continue
            p = AffineMixParams(float(rng.uniform(0.5, 1.5)), obj.class_id, obj.component,
                                obj.anchor)
            out = affinemix(scene, p)
            image, depth, label = composite_oracle(scene, p, obj.mask)
            np.testing.assert_array_equal(out.label, label)
            np.testing.assert_allclose(out.depth, depth, rtol=1e-6)
            np.testing.assert_allclose(out.image, image, atol=1e-6)
            assert set(np.unique(out.label)) <= set(np.unique(scene.label))
            checked += 1
        notes.append(f"oracle agrees on {checked}/100 scenes with a movable object")

        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(20):
            s_val = float(rng.uniform(0.5, 1.5))
            size = int(rng.integers(20, 27))
            y0 = int(rng.integers(30, 66 - size))
            s = flat_sample(h=96, w=96, depth=30.0, box=(y0, y0 + size, 36, 36 + size),
                            obj_depth=5.0)
            p = params_for(s, s_val)
            comp = affine_warp(s.label == 3, 1 / s_val, compute_offsets(s_val, *p.anchor), "mask")
            worst = max(worst, abs(comp.sum() * s_val ** 2 / size ** 2 - 1))
        notes.append(f"area error <= {worst:.3f}")
        assert worst < 0.15

        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["augment", "--in", str(scenes), "--out", str(first), "--seed", "5"]) == 0
        assert main(["augment", "--in", str(scenes), "--out", str(second),
                     "--replay", str(first)]) == 0
        assert _tree_bytes(first) == _tree_bytes(second)


def test_criterion_4_regularizer():
    with criterion(4, "regularizer: Jacobi oracle, orthonormal -> 0, schedule, descent") as notes:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(50):
            m, n = rng.integers(1, 9, size=2)
            a = rng.normal(size=(m, n))
            oracle = np.sqrt(max(jacobi_eigenvalues(a.T @ a).max(), 0.0))
            worst = max(worst, abs(spectral_norm(a) - oracle))
        notes.append(f"spectral norm err {worst:.1e}")
        assert worst < 1e-6
        with high_precision():
            for k in range(10):
                q, _ = np.linalg.qr(rng.normal(size=(8, 1 + k % 8)))
                assert ortho_penalty(Tensor(q), 200, 1e-12).item() < 1e-6
        cfg = OrthoConfig()
        assert [current_lambda(cfg, s) for s in (0, 10_000, 20_000, 30_000)] == \
            [1e-4, 1e-5, 1e-6, 1e-7]
        steps_needed = []
        for seed in range(10):
            w0 = np.random.default_rng(seed).normal(size=(4, 4)) * 0.5
            _, hist = descend_penalty(w0, steps=500, lr=0.1, step_rule="polyak")
            assert hist[-1] < 1e-3
            steps_needed.append(len(hist) - 1)
        _, fixed = descend_penalty(np.random.default_rng(0).normal(size=(4, 4)) * 0.5,
                                   steps=500, lr=0.1, step_rule="fixed")
        notes.append(f"capped-step descent hits 1e-3 in <= {max(steps_needed)} steps "
                     f"(plain fixed lr 0.1 ends at {fixed[-1]:.2e})")


def test_criterion_5_metrics():
    with criterion(5, "metrics match brute-force oracles; a1 <= a2 <= a3") as notes:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            pred = rng.integers(0, 4, (2, 6, 7))
            gt = rng.integers(0, 4, (2, 6, 7))
            gt[rng.random(gt.shape) < 0.1] = 255
            ious = np.asarray(ConfusionMatrix(4).update(pred, gt).iou())
            oracle = iou_oracle(pred, gt, 4)
            np.testing.assert_array_equal(np.isnan(ious), np.isnan(oracle))
            worst = max(worst, float(np.nanmax(np.abs(ious - oracle))))
            p, g = rng.uniform(0.5, 20, (2, 5, 6)), rng.uniform(0.5, 20, (2, 5, 6))
            got = list(depth_metrics(p, g).as_dict().values())
            worst = max(worst, max(abs(a - b) for a, b in zip(got, depth_oracle(p, g))))
            x = rng.normal(size=(2, 4, 3, 5))
            worst = max(worst, abs(inter_channel_correlation(x) - icc_oracle(x)))
        notes.append(f"worst deviation {worst:.1e}")
        assert worst < 1e-6
        for _ in range(1000):
            dm = depth_metrics(rng.uniform(0.1, 50, (4, 4)), rng.uniform(0.1, 50, (4, 4)))
            assert dm.a1 <= dm.a2 <= dm.a3


# -- training-based criteria -------------------------------------------------

_RUNS = {}


def _run(tmp_root, mode="ccam", seed=0, **overrides):
    """(final record, seconds, step-0 record) of a default-config run, cached across tests."""
    updates = {"mode": mode, "seed": str(seed), "eval_every": "2000",
               **{k.replace("__", "."): str(v) for k, v in overrides.items()}}
    key = tuple(sorted(updates.items()))
    if key not in _RUNS:
        cfg = RunConfig().with_updates(updates)
        start = time.perf_counter()
        records = train(cfg, tmp_root / f"run{len(_RUNS)}")
        _RUNS[key] = (records[-1], time.perf_counter() - start, records[0])
    return _RUNS[key]


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@needs_training
def test_criterion_6_mode_ordering(run_root):
    with criterion(6, "mIoU ccam >= gated > none over 5 seeds, < 15 min") as notes:
        means, total = {}, 0.0
        for mode in ("none", "gated", "ccam"):
            scores = []
            for seed in range(5):
                rec, elapsed, _ = _run(run_root, mode, seed)
                scores.append(rec["miou"])
                total += elapsed
            means[mode] = float(np.mean(scores))
        notes.append(", ".join(f"{m} {v:.4f}" for m, v in means.items()) + f"; {total / 60:.1f} min")
        assert means["ccam"] >= means["gated"] > means["none"]
        assert total < 15 * 60


@needs_training
def test_ccam_training_improves_every_seed(run_root):
    for seed in range(5):
        final, _, initial = _run(run_root, "ccam", seed)
        assert final["miou"] > initial["miou"]


# The default lambda (1e-4) barely moves the weights in 2000 steps. 1e-2 was picked
# as the smallest of {1e-4, 1e-2, 1e-1} lowering the statistic on seeds 10-12,
# which are disjoint from the seeds checked here.
ORTHO_LAMBDA0 = 1e-2


@needs_training
def test_criterion_7_ortho_lowers_icc(run_root):
    with criterion(7, "decoder inter-channel correlation lower with OR, 3 seeds") as notes:
        notes.append(f"lambda0 {ORTHO_LAMBDA0:g}")

        def icc(rec):
            return (rec["icc_seg"] + rec["icc_depth"]) / 2

        on, off, default = [], [], []
        for seed in range(3):
            on.append(icc(_run(run_root, "ccam", seed, ortho__lambda0=ORTHO_LAMBDA0)[0]))
            off.append(icc(_run(run_root, "ccam", seed, ortho__enabled="false")[0]))
            default.append(icc(_run(run_root, "ccam", seed)[0]))
        notes.append(f"with OR {np.mean(on):.1f}, without {np.mean(off):.1f} "
                     f"(default lambda0 1e-4: {np.mean(default):.1f})")
        assert np.mean(on) < np.mean(off)


@needs_training
def test_criterion_8_affinemix_helps(run_root):
    with criterion(8, "AffineMix mIoU >= no augmentation at 1/8 labels, 5 seeds") as notes:
        with_aug, without = [], []
        for seed in range(5):
            with_aug.append(_run(run_root, "ccam", seed)[0]["miou"])
            without.append(_run(run_root, "ccam", seed, ssl__affinemix__enabled="false")[0]["miou"])
        notes.append(f"AffineMix {np.mean(with_aug):.4f}, none {np.mean(without):.4f}")
        assert np.mean(with_aug) >= np.mean(without)


def test_criterion_9_determinism(tmp_path):
    with criterion(9, "two identical train invocations give identical CSV and checkpoint") as notes:
        args = ["train", "--steps", "200", "--seed", "3", "--set", "eval_every=100"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        outputs = ("metrics.csv", "model.ckpt", "model.ckpt.index")
        for name in outputs:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        notes.append(f"{', '.join(outputs)} byte-identical after 200 steps")
