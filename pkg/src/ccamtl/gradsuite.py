"""Finite-difference checks over every differentiable op and the composed CCAM block.

Each case builds random float64 inputs, reduces the op's output to a scalar
with fixed random weights and hands it to :func:`ccamtl.gradcheck.gradcheck`.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from . import nn
from . import tensor as T
from .ccam import CcamBlock, GatedBlock, PsiHead, cross_affinity_matrix, mix_features, spatial_attention
from .gradcheck import gradcheck
from .harness.estimator import toy_depth_loss
from .regularize import ortho_penalty, reshape_for_ortho
from .semisup import ssl_loss
from .tensor import Tensor, high_precision

TOLERANCE = 1e-4


class Case(NamedTuple):
    name: str
    objective: Callable[[], Tensor]
    params: list


def _leaf(rng, *shape, positive=False, away_from_zero=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.exp(0.5 * data)
    if away_from_zero:
        # keep |x| >= 0.1 so kinks (relu, abs) stay outside the probe width
        data = np.sign(data) * (np.abs(data) + 0.1)
    return Tensor(data, requires_grad=True)


def _weighted(rng, fn):
    """Scalar ``sum(fn() * R)`` with ``R`` drawn once on first call."""
    cache = {}

    def objective():
        out = fn()
        if "r" not in cache:
            cache["r"] = rng.normal(size=out.shape)
        return T.tsum(T.mul(out, cache["r"]))

    return objective


def build_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    cases = []

    def add_case(name, fn, *params):
        cases.append(Case(name, _weighted(rng, fn), list(params)))

    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    add_case("add", lambda: T.add(a, b), a, b)
    add_case("sub", lambda: T.sub(a, b), a, b)
    add_case("mul", lambda: T.mul(a, b), a, b)
    bb = _leaf(rng, 4)
    add_case("add_broadcast", lambda: T.add(a, bb), a, bb)
    add_case("scale", lambda: T.scale(a, 1.7), a)
    add_case("exp", lambda: T.exp(a), a)
    pos = _leaf(rng, 3, 4, positive=True)
    add_case("log", lambda: T.log(pos), pos)
    kinked = _leaf(rng, 3, 4, away_from_zero=True)
    add_case("abs", lambda: T.tabs(kinked), kinked)
    add_case("relu", lambda: T.relu(kinked), kinked)
    add_case("square", lambda: T.square(a), a)
    add_case("sigmoid", lambda: T.sigmoid(a), a)
    add_case("sum_axis", lambda: T.tsum(a, axis=1, keepdims=True), a)
    add_case("mean_axes", lambda: T.mean(a, axis=(0, 1)), a)
    add_case("reshape", lambda: T.reshape(a, (2, 6)), a)
    c3 = _leaf(rng, 2, 3, 4)
    add_case("transpose", lambda: T.transpose(c3, (2, 0, 1)), c3)
    add_case("swap_last", lambda: T.swap_last(c3), c3)
    add_case("getitem", lambda: T.getitem(c3, (slice(None), 1, slice(1, 3))), c3)
    add_case("stack", lambda: T.stack([a, b], axis=1), a, b)
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    add_case("matmul", lambda: T.matmul(m1, m2), m1, m2)

    x = _leaf(rng, 2, 3, 5, 4)
    w, bias = _leaf(rng, 2, 3, 3, 3), _leaf(rng, 2)
    add_case("conv2d", lambda: nn.conv2d(x, w, bias), x, w, bias)
    dw, db = _leaf(rng, 3, 1, 3, 3), _leaf(rng, 3)
    add_case("depthwise_conv2d", lambda: nn.depthwise_conv2d(x, dw, db), x, dw, db)
    add_case("global_avg_pool", lambda: nn.global_avg_pool(x), x)
    x_even = _leaf(rng, 2, 2, 4, 6)
    add_case("avg_pool2", lambda: nn.avg_pool2(x_even), x_even)
    add_case("upsample2", lambda: nn.upsample2(x_even), x_even)
    fx, fw, fb = _leaf(rng, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    add_case("fully_connected", lambda: nn.fully_connected(fx, fw, fb), fx, fw, fb)
    add_case("softmax_channels", lambda: nn.softmax_channels(x), x)
    labels = rng.integers(0, 3, size=(2, 5, 4))
    labels[0, 0, :2] = nn.IGNORE_INDEX
    cases.append(Case("cross_entropy", lambda: nn.cross_entropy(x, labels), [x]))
    xu = _leaf(rng, 2, 3, 5, 4)
    labels_u = rng.integers(0, 3, size=(2, 5, 4))
    cases.append(Case("ssl_loss", lambda: ssl_loss(x, labels, xu, labels_u), [x, xu]))

    pred = _leaf(rng, 2, 1, 3, 3, positive=True)
    # keep every log-ratio at least 0.1 away from the |.| kink
    offset = np.sign(rng.normal(size=pred.shape)) * rng.uniform(0.1, 0.5, size=pred.shape)
    gt = pred.data * np.exp(offset)
    cases.append(Case("toy_depth_loss", lambda: toy_depth_loss(pred, gt), [pred]))

    ow = _leaf(rng, 5, 3)
    cases.append(Case("ortho_penalty",
                      lambda: ortho_penalty(ow, iters=1000, tol=1e-15), [ow]))
    cw = _leaf(rng, 2, 3, 3, 3)
    cases.append(Case("ortho_penalty_conv",
                      lambda: ortho_penalty(reshape_for_ortho(cw), iters=1000, tol=1e-15), [cw]))

    ch = 4
    fa, fb_ = _leaf(rng, 2, ch, 3, 3), _leaf(rng, 2, ch, 3, 3)
    sw, sb = _leaf(rng, ch, ch, 3, 3), _leaf(rng, ch)
    add_case("spatial_attention", lambda: spatial_attention(fa, sw, sb), fa, sw, sb)
    psi = PsiHead(ch, 2, rng, prefix="psi")
    for p in psi.params.values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    pooled = _leaf(rng, 3, ch)
    add_case("psi_head", lambda: psi(pooled), pooled, *psi.params.values())
    add_case("cross_affinity_matrix", lambda: cross_affinity_matrix(fa, fb_, psi),
             fa, fb_, *psi.params.values())
    mm = _leaf(rng, ch, ch)
    add_case("mix_features", lambda: T.add(*mix_features(fa, fb_, mm)), fa, fb_, mm)

    block = CcamBlock(ch, 2, rng, prefix="ccam")
    for p in block.params.values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)

    def ccam_out():
        a_out, b_out, _ = block(fa, fb_)
        return T.add(a_out, b_out)

    add_case("ccam_forward", ccam_out, fa, fb_, *block.params.values())

    gated = GatedBlock(ch, rng, prefix="gated")
    for p in gated.params.values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)

    def gated_out():
        a_out, b_out, _ = gated(fa, fb_)
        return T.add(a_out, b_out)

    add_case("gated_distillation", gated_out, fa, fb_, *gated.params.values())
    return cases


def run_suite(seed: int, eps: float = 1e-6, only: set | None = None) -> dict[str, float]:
    """Max relative gradient error per case (over all of the case's inputs)."""
    report = {}
    with high_precision():
        for case in build_cases(seed):
            if only is not None and case.name not in only:
                continue
            errs = gradcheck(case.objective, case.params, eps)
            report[case.name] = max(errs.values())
    return report
