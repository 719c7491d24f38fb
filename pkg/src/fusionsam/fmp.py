"""Fusion mask prompting.

Two quantized latent grids are fused by an inter-domain cross-attention
pair (each stream queries the other, with a residual on the projected
query), pointwise-projected to an initial fused representation, refined
by a complementary cross-attention stream, and finally upsampled by a
transposed conv into an image-resolution fusion mask.

All channel-mixing projections on token sequences are pointwise (1x1),
which keeps the whole block equivariant under joint token permutations;
no positional encoding is injected here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .nn import ConvTranspose2d, LayerNorm, Linear, Mlp, Module, param
from .numerics import Tensor


@dataclass
class FusionMask:
    """Image-shaped fused representation plus the latent grid it came from."""

    map: Tensor      # (H, W, C_f), values in (0, 1)
    latent: Tensor   # (h, w, dc)


def _flatten_grid(grid: Tensor) -> Tensor:
    h, w, d = grid.shape
    return nm.reshape(grid, (h * w, d))


class DirectedAttention(Module):
    """softmax(Q K^T / sqrt(d_k)) V with LN and a residual on Q.

    Q comes from the query stream, K and V from the context stream; the
    projection weights are owned by the caller so modality streams can
    share them the way the fusion equations prescribe.
    """

    def __init__(self, d_k: int):
        self.norm = LayerNorm(d_k)
        self.scale_factor = 1.0 / np.sqrt(d_k)
        self.last_attn: np.ndarray | None = None

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
            raise DimensionError(
                f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
            )
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (1, 0))), self.scale_factor)
        attn = nm.softmax(scores, axis=1)
        self.last_attn = attn.data
        return nm.add(self.norm(nm.matmul(attn, v)), q)


class InterDomainFusion(Module):
    """Bidirectional cross-attention over two token streams.

    Each modality owns one set of Q/K/V projections; stream one attends
    with its queries over stream two's keys/values and vice versa. The
    two fused streams are concatenated channel-wise and mixed by a
    pointwise projection.
    """

    def __init__(self, rng: np.random.Generator, dc: int, d_k: int, use_ffn: bool = False):
        s = 1.0 / np.sqrt(dc)
        self.wq1 = param(rng, (dc, d_k), s)
        self.wk1 = param(rng, (dc, d_k), s)
        self.wv1 = param(rng, (dc, d_k), s)
        self.wq2 = param(rng, (dc, d_k), s)
        self.wk2 = param(rng, (dc, d_k), s)
        self.wv2 = param(rng, (dc, d_k), s)
        self.attn1 = DirectedAttention(d_k)
        self.attn2 = DirectedAttention(d_k)
        self.proj = Linear(rng, 2 * d_k, dc)
        self.ffn = Mlp(rng, dc, 2 * dc) if use_ffn else None

    def __call__(self, t1: Tensor, t2: Tensor) -> Tensor:
        if t1.shape != t2.shape:
            raise DimensionError(f"token streams differ: {t1.shape} vs {t2.shape}")
        q1, k1, v1 = nm.matmul(t1, self.wq1), nm.matmul(t1, self.wk1), nm.matmul(t1, self.wv1)
        q2, k2, v2 = nm.matmul(t2, self.wq2), nm.matmul(t2, self.wk2), nm.matmul(t2, self.wv2)
        s1 = self.attn1(q1, k2, v2)
        s2 = self.attn2(q2, k1, v1)
        fused = self.proj(nm.concat([s1, s2], axis=1))
        if self.ffn is not None:
            fused = nm.add(fused, self.ffn(fused))
        return fused

    def attention_maps(self) -> list[np.ndarray]:
        return [m for m in (self.attn1.last_attn, self.attn2.last_attn) if m is not None]


class ComplementaryFusion(Module):
    """Second fusion stage: a dedicated cross-attention over the two
    modality streams produces a complementary stream; the initial fused
    representation queries it and keeps a residual to itself."""

    def __init__(self, rng: np.random.Generator, dc: int, d_k: int, use_ffn: bool = False):
        if d_k != dc:
            raise ConfigError(
                f"complementary fusion requires d_k == dc for its residual, got {d_k} != {dc}"
            )
        s = 1.0 / np.sqrt(dc)
        self.stream = InterDomainFusion(rng, dc, d_k, use_ffn)
        self.wq_f = param(rng, (dc, d_k), s)
        self.wk_0 = param(rng, (dc, d_k), s)
        self.wv_0 = param(rng, (dc, d_k), s)
        self.attn = DirectedAttention(d_k)

    def __call__(self, t1: Tensor, t2: Tensor, z_c: Tensor) -> Tensor:
        z0 = self.stream(t1, t2)
        qf = nm.matmul(z_c, self.wq_f)
        k0 = nm.matmul(z0, self.wk_0)
        v0 = nm.matmul(z0, self.wv_0)
        scores = nm.scale(nm.matmul(qf, nm.transpose(k0, (1, 0))), self.attn.scale_factor)
        attn = nm.softmax(scores, axis=1)
        self.attn.last_attn = attn.data
        return nm.add(self.attn.norm(nm.matmul(attn, v0)), z_c)

    def attention_maps(self) -> list[np.ndarray]:
        maps = self.stream.attention_maps()
        if self.attn.last_attn is not None:
            maps.append(self.attn.last_attn)
        return maps


class FusionMaskHead(Module):
    """Transposed-conv projection of the fused grid up to image resolution.

    A sigmoid keeps the mask in (0, 1) so it exports losslessly within
    8-bit precision and feeds the image encoder with bounded values.
    """

    def __init__(self, rng: np.random.Generator, dc: int, c_f: int, scale: int):
        self.scale = scale
        self.up = ConvTranspose2d(rng, dc, c_f, k=scale, stride=scale, pad=0)

    def __call__(self, z_f_grid: Tensor) -> Tensor:
        h, w, d = z_f_grid.shape
        x = nm.transpose(nm.reshape(z_f_grid, (1, h, w, d)), (0, 3, 1, 2))
        up = nm.sigmoid(self.up(x))
        return nm.reshape(nm.transpose(up, (0, 2, 3, 1)), (h * self.scale, w * self.scale, up.shape[1]))


class FusionModule(Module):
    """Full fusion stage. mode "attention" runs the two cross-attention
    units; mode "concat" channel-concatenates the token streams and mixes
    them pointwise (the attention-free ablation)."""

    def __init__(
        self,
        rng: np.random.Generator,
        dc: int,
        c_f: int = 3,
        scale: int = 4,
        d_k: int | None = None,
        mode: str = "attention",
        use_ffn: bool = False,
    ):
        if mode not in ("attention", "concat"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        d_k = dc if d_k is None else d_k
        if mode == "attention":
            self.inter = InterDomainFusion(rng, dc, d_k, use_ffn)
            self.complementary = ComplementaryFusion(rng, dc, d_k, use_ffn)
        else:
            self.concat_proj = Linear(rng, 2 * dc, dc)
        self.head = FusionMaskHead(rng, dc, c_f, scale)

    def cross_domain_fuse(self, i1q: Tensor, i2q: Tensor) -> Tensor:
        """Eq. 10/11 stage on flattened (n, dc) token matrices."""
        return self.inter(i1q, i2q)

    def complementary_fuse(self, i1q: Tensor, i2q: Tensor, z_c: Tensor) -> Tensor:
        return self.complementary(i1q, i2q, z_c)

    def fusion_mask(self, z_f_grid: Tensor) -> FusionMask:
        return FusionMask(map=self.head(z_f_grid), latent=z_f_grid)

    def __call__(self, i1q_grid: Tensor, i2q_grid: Tensor) -> FusionMask:
        if i1q_grid.shape != i2q_grid.shape:
            raise DimensionError(
                f"latent grids differ: {i1q_grid.shape} vs {i2q_grid.shape}"
            )
        h, w, d = i1q_grid.shape
        t1 = _flatten_grid(i1q_grid)
        t2 = _flatten_grid(i2q_grid)
        if self.mode == "attention":
            z_c = self.cross_domain_fuse(t1, t2)
            z_f = self.complementary_fuse(t1, t2, z_c)
        else:
            z_f = self.concat_proj(nm.concat([t1, t2], axis=1))
        return self.fusion_mask(nm.reshape(z_f, (h, w, d)))

    def attention_maps(self) -> list[np.ndarray]:
        if self.mode != "attention":
            return []
        return self.inter.attention_maps() + self.complementary.attention_maps()
