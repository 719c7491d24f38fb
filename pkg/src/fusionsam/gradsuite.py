"""Finite-difference verification of every differentiable op and each
composite block. Each check compares backward() against central
differences on a small fixed-seed instance and must stay within 1e-4
relative error (tighter for the primitive ops)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lstg, numerics as nm
from .fmp import FusionModule
from .numerics import GradReport, Tensor, grad_check
from .segmentation import SegmentationHead


@dataclass
class CheckResult:
    name: str
    report: GradReport
    tol: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel_err <= self.tol


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return nm.tsum(nm.mul(t, nm.tensor(w)))


def _op_checks(rng) -> list[CheckResult]:
    out = []

    def check(name, f, x, tol=1e-6, eps=1e-5):
        out.append(CheckResult(name, grad_check(f, x, eps), tol))

    x23 = nm.tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w23 = rng.standard_normal((2, 3))
    check("add", lambda t: _weighted_sum(nm.add(t, nm.tensor(w23)), w23), x23)
    check("sub", lambda t: _weighted_sum(nm.sub(t, nm.tensor(w23)), w23), x23)
    check("mul", lambda t: _weighted_sum(nm.mul(t, nm.tensor(w23)), w23), x23)
    check("scale", lambda t: _weighted_sum(nm.scale(t, -1.7), w23), x23)
    check("square", lambda t: _weighted_sum(nm.square(t), w23), x23)

    mat_a = nm.tensor(rng.standard_normal((3, 4)), requires_grad=True)
    mat_w = rng.standard_normal((4, 2))
    mask32 = rng.standard_normal((3, 2))
    check("matmul.lhs", lambda t: _weighted_sum(nm.matmul(t, nm.tensor(mat_w)), mask32), mat_a)
    mat_b = nm.tensor(rng.standard_normal((4, 2)), requires_grad=True)
    a_const = rng.standard_normal((3, 4))
    check("matmul.rhs", lambda t: _weighted_sum(nm.matmul(nm.tensor(a_const), t), mask32), mat_b)

    # keep relu probes away from the kink
    relu_base = rng.standard_normal(12)
    relu_base[np.abs(relu_base) < 0.2] += 0.5
    xr = nm.tensor(relu_base, requires_grad=True)
    w12 = rng.standard_normal(12)
    check("relu", lambda t: _weighted_sum(nm.relu(t), w12), xr)
    xs = nm.tensor(rng.standard_normal(12), requires_grad=True)
    check("gelu", lambda t: _weighted_sum(nm.gelu(t), w12), xs)
    check("sigmoid", lambda t: _weighted_sum(nm.sigmoid(t), w12), xs)
    check("logsigmoid", lambda t: _weighted_sum(nm.logsigmoid(t), w12), xs)
    check("exp", lambda t: _weighted_sum(nm.texp(t), w12), xs)
    xpos = nm.tensor(rng.uniform(0.5, 2.0, 12), requires_grad=True)
    check("log", lambda t: _weighted_sum(nm.tlog(t), w12), xpos)

    x35 = nm.tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w35 = rng.standard_normal((3, 5))
    check("softmax", lambda t: _weighted_sum(nm.softmax(t, 1), w35), x35)
    check("log_softmax", lambda t: _weighted_sum(nm.log_softmax(t, 1), w35), x35)
    check("sum", lambda t: nm.tsum(nm.mul(t, nm.tensor(w35))), x35)
    check("mean", lambda t: nm.scale(nm.tmean(nm.square(t)), 3.0), x35)
    check("sum.axis", lambda t: _weighted_sum(nm.tsum(nm.square(t), 0), w35[0]), x35)

    gamma = nm.tensor(rng.standard_normal(5), requires_grad=True)
    beta = nm.tensor(rng.standard_normal(5), requires_grad=True)
    check(
        "layer_norm.x",
        lambda t: _weighted_sum(nm.layer_norm(t, gamma, beta, 1e-5), w35),
        x35,
        tol=1e-5,
    )
    check(
        "layer_norm.gamma",
        lambda t: _weighted_sum(nm.layer_norm(x35.detach(), t, beta, 1e-5), w35),
        gamma,
        tol=1e-5,
    )
    check(
        "layer_norm.beta",
        lambda t: _weighted_sum(nm.layer_norm(x35.detach(), gamma, t, 1e-5), w35),
        beta,
        tol=1e-5,
    )

    xc = nm.tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    wc = nm.tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5, requires_grad=True)
    bc = nm.tensor(rng.standard_normal(3), requires_grad=True)
    mc = rng.standard_normal((1, 3, 3, 3))

    def conv_through(which):
        def f(t):
            args = {"x": xc, "w": wc, "b": bc}
            args[which] = t
            return _weighted_sum(nm.conv2d(args["x"], args["w"], args["b"], 2, 1), mc)

        return f

    check("conv2d.x", conv_through("x"), xc, tol=1e-5)
    check("conv2d.w", conv_through("w"), wc, tol=1e-5)
    check("conv2d.b", conv_through("b"), bc, tol=1e-5)

    xt = nm.tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    wt = nm.tensor(rng.standard_normal((2, 3, 2, 2)) * 0.5, requires_grad=True)
    bt = nm.tensor(rng.standard_normal(3), requires_grad=True)
    mt = rng.standard_normal((1, 3, 6, 6))

    def deconv_through(which):
        def f(t):
            args = {"x": xt, "w": wt, "b": bt}
            args[which] = t
            return _weighted_sum(nm.conv2d_transpose(args["x"], args["w"], args["b"], 2, 0), mt)

        return f

    check("conv2d_transpose.x", deconv_through("x"), xt, tol=1e-5)
    check("conv2d_transpose.w", deconv_through("w"), wt, tol=1e-5)
    check("conv2d_transpose.b", deconv_through("b"), bt, tol=1e-5)

    xp = nm.tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    mp = rng.standard_normal((1, 2, 2, 2))
    check("avg_pool2d", lambda t: _weighted_sum(nm.avg_pool2d(t, 2), mp), xp)

    table = nm.tensor(rng.standard_normal((5, 3)), requires_grad=True)
    idx = np.array([0, 4, 4, 2])
    mg = rng.standard_normal((4, 3))
    check("gather_rows", lambda t: _weighted_sum(nm.gather_rows(t, idx), mg), table)

    xb = nm.tensor(rng.standard_normal((4, 3)))
    bb = nm.tensor(rng.standard_normal(3), requires_grad=True)
    mb = rng.standard_normal((4, 3))
    check("bias_add", lambda t: _weighted_sum(nm.bias_add(xb, t), mb), bb)

    x234 = nm.tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    mshape = rng.standard_normal((4, 3, 2))

    def shape_pipeline(t):
        y = nm.transpose(t, (2, 1, 0))
        y = nm.reshape(nm.mul(y, nm.tensor(mshape)), (6, 4))
        y = nm.concat([y, nm.scale(y, 0.5)], axis=0)
        return nm.tmean(nm.slice_axis(y, 0, 1, 11))

    check("reshape/transpose/concat/slice", shape_pipeline, x234)
    return out


def _block_checks(rng) -> list[CheckResult]:
    out = []

    # encoder -> decoder composite (the smooth part of the tokenizer path)
    enc = lstg.VqEncoder(np.random.default_rng(101), c_in=1, dc=4, scale=4)
    dec = lstg.VqDecoder(np.random.default_rng(102), dc=4, c_out=1, scale=4)
    img = nm.tensor(rng.standard_normal((8, 8, 1)), requires_grad=True)
    m_img = rng.standard_normal((8, 8, 1))
    out.append(
        CheckResult(
            "block.lstg_encoder_decoder",
            grad_check(
                lambda t: _weighted_sum(lstg.decode(lstg.encode(t, enc), dec), m_img), img
            ),
            1e-4,
        )
    )

    # full fusion block on a 2x2 grid (8 tokens across both modalities)
    fusion = FusionModule(np.random.default_rng(103), dc=4, c_f=3, scale=4)
    t1 = nm.tensor(rng.standard_normal((2, 2, 4)), requires_grad=True)
    t2 = rng.standard_normal((2, 2, 4))
    m_map = rng.standard_normal((8, 8, 3))
    out.append(
        CheckResult(
            "block.fmp",
            grad_check(
                lambda t: _weighted_sum(fusion(t, nm.tensor(t2)).map, m_map), t1
            ),
            1e-4,
        )
    )

    # mask decoder on a 2x2 embedding grid
    head = SegmentationHead(np.random.default_rng(104), num_classes=2, c_f=3, d_tok=8, patch=4)
    emb = nm.tensor(rng.standard_normal((2, 2, 8)), requires_grad=True)
    m_log = rng.standard_normal((2, 8, 8))
    out.append(
        CheckResult(
            "block.mask_decoder",
            grad_check(lambda t: _weighted_sum(head.mask_decode(t, None), m_log), emb),
            1e-4,
        )
    )

    # frozen image encoder still propagates input gradients
    m_emb = rng.standard_normal((2, 2, 8))
    fmap = nm.tensor(rng.uniform(0, 1, (8, 8, 3)), requires_grad=True)
    out.append(
        CheckResult(
            "block.image_encoder",
            grad_check(lambda t: _weighted_sum(head.image_encode(t), m_emb), fmap),
            1e-4,
        )
    )

    # discriminator objective wrt discriminator parameters
    disc = lstg.PatchDiscriminator(np.random.default_rng(105), c_in=1)
    real = nm.tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
    fake = nm.tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
    z = nm.tensor(rng.standard_normal((2, 2, 2)))

    def adv_d_through(t):
        saved = disc.head.w
        disc.head.w = t
        parts = lstg.lstg_loss([real], [fake], [z], [z], [disc], None, lstg.LossWeights())
        disc.head.w = saved
        return parts.adv_d

    out.append(CheckResult("block.discriminator", grad_check(adv_d_through, disc.head.w), 1e-4))
    return out


def run_all(seed: int = 1234) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return _op_checks(rng) + _block_checks(rng)
