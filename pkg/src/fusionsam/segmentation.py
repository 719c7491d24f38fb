"""Prompt-guided mask decoding on top of the fusion mask.

The fusion mask is embedded by a small frozen ViT (random init, never
trained, gradients still flow through it to the fusion stage), prompts
are sampled from label regions at the fusion mask's strongest
activations and encoded as sinusoidal-position plus learned-class
tokens, and a two-way attention decoder turns per-class output tokens
into a per-pixel logit map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .nn import ConvTranspose2d, LayerNorm, Linear, Mlp, Module, param
from .numerics import Tensor


# -- prompts -------------------------------------------------------------------


@dataclass
class PromptSet:
    """k labelled point prompts plus one box, in pixel coordinates."""

    points: list[tuple[int, int, int]]        # (row, col, class_id)
    box: tuple[int, int, int, int]            # (row_min, col_min, row_max, col_max)
    fallback: bool = False                    # True when no foreground existed


def sample_prompts(
    fusion_map: np.ndarray, labels: np.ndarray, k: int, seed: int = 0
) -> PromptSet:
    """Pick k points round-robin over the classes present in the labels.

    Within a class region, points go to the pixels with the highest
    fusion activation (channel mean), ties resolved row-major. The box
    is the tight bound of all foreground pixels. Without any foreground
    the image-center point and the full-image box are returned, flagged.
    Deterministic for fixed inputs; the seed is accepted for interface
    stability but the placement rule needs no randomness.
    """
    if k < 1:
        raise ContractError(f"need at least one point prompt, got k={k}")
    if fusion_map.shape[:2] != labels.shape:
        raise DimensionError(
            f"fusion map {fusion_map.shape[:2]} and labels {labels.shape} disagree"
        )
    h, w = labels.shape
    activation = fusion_map.mean(axis=2) if fusion_map.ndim == 3 else fusion_map
    classes = [int(c) for c in np.unique(labels) if c > 0]
    if not classes:
        return PromptSet(
            points=[(h // 2, w // 2, 0)], box=(0, 0, h - 1, w - 1), fallback=True
        )

    ranked: dict[int, np.ndarray] = {}
    for c in classes:
        rows, cols = np.nonzero(labels == c)
        order = np.lexsort((cols, rows, -activation[rows, cols]))
        ranked[c] = np.stack([rows[order], cols[order]], axis=1)

    points: list[tuple[int, int, int]] = []
    round_idx = 0
    while len(points) < k:
        for c in classes:
            if len(points) >= k:
                break
            pool = ranked[c]
            r, col = pool[round_idx % len(pool)]
            points.append((int(r), int(col), c))
        round_idx += 1

    fg_rows, fg_cols = np.nonzero(labels > 0)
    box = (int(fg_rows.min()), int(fg_cols.min()), int(fg_rows.max()), int(fg_cols.max()))
    return PromptSet(points=points, box=box, fallback=False)


def _sinusoidal_position(row: float, col: float, h: int, w: int, dim: int) -> np.ndarray:
    """Fixed encoding of normalized pixel-center coordinates."""
    q = dim // 4
    r = (row + 0.5) / h
    c = (col + 0.5) / w
    freqs = np.pi * 2.0 ** np.arange(q)
    out = np.empty(dim, dtype=np.float64)
    out[0::4] = np.sin(freqs * r)
    out[1::4] = np.cos(freqs * r)
    out[2::4] = np.sin(freqs * c)
    out[3::4] = np.cos(freqs * c)
    return out


class PromptEncoder(Module):
    """Point and box prompts to (k + 2, d_tok) token matrix."""

    def __init__(self, rng: np.random.Generator, num_classes: int, d_tok: int):
        if d_tok % 4:
            raise ConfigError(f"token width must be divisible by 4, got {d_tok}")
        self.d_tok = d_tok
        self.class_emb = param(rng, (num_classes, d_tok), 0.5)
        self.corner_emb = param(rng, (2, d_tok), 0.5)

    def __call__(self, prompts: PromptSet, image_hw: tuple[int, int]) -> Tensor:
        h, w = image_hw
        num_classes = self.class_emb.shape[0]
        pos_rows = []
        class_ids = []
        for r, c, cls in prompts.points:
            if not (0 <= r < h and 0 <= c < w):
                raise ContractError(f"point ({r}, {c}) outside image {h}x{w}")
            if not (0 <= cls < num_classes):
                raise ContractError(f"point class {cls} out of range")
            pos_rows.append(_sinusoidal_position(r, c, h, w, self.d_tok))
            class_ids.append(cls)
        r0, c0, r1, c1 = prompts.box
        if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
            raise ContractError(f"box {prompts.box} outside image {h}x{w}")
        point_pos = nm.tensor(np.stack(pos_rows))
        point_tokens = nm.add(point_pos, nm.gather_rows(self.class_emb, np.array(class_ids)))
        corner_pos = nm.tensor(
            np.stack(
                [
                    _sinusoidal_position(r0, c0, h, w, self.d_tok),
                    _sinusoidal_position(r1, c1, h, w, self.d_tok),
                ]
            )
        )
        corner_tokens = nm.add(corner_pos, nm.gather_rows(self.corner_emb, np.array([0, 1])))
        return nm.concat([point_tokens, corner_tokens], axis=0)


# -- frozen image encoder ---------------------------------------------------------


class _SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.scale_factor = 1.0 / np.sqrt(dim)
        self.last_attn: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (1, 0))), self.scale_factor)
        attn = nm.softmax(scores, axis=1)
        self.last_attn = attn.data
        return self.wo(nm.matmul(attn, v))


class _TransformerBlock(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.ln1 = LayerNorm(dim)
        self.attn = _SelfAttention(rng, dim)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, 2 * dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = nm.add(x, self.attn(self.ln1(x)))
        return nm.add(x, self.mlp(self.ln2(x)))


class ImageEncoder(Module):
    """Small ViT over the fusion mask. Parameters are frozen at
    construction and excluded from every optimizer; gradients still pass
    through to the fusion stage."""

    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        d_tok: int,
        patch: int = 4,
        depth: int = 2,
    ):
        if d_tok % 4:
            raise ConfigError(f"token width must be divisible by 4, got {d_tok}")
        self.patch = patch
        self.d_tok = d_tok
        self.embed = Linear(rng, patch * patch * c_in, d_tok)
        self.blocks = [_TransformerBlock(rng, d_tok) for _ in range(depth)]
        self.final_ln = LayerNorm(d_tok)
        self.freeze()
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    def _positions(self, gh: int, gw: int) -> np.ndarray:
        key = (gh, gw)
        if key not in self._pos_cache:
            self._pos_cache[key] = np.stack(
                [
                    _sinusoidal_position(i, j, gh, gw, self.d_tok)
                    for i in range(gh)
                    for j in range(gw)
                ]
            )
        return self._pos_cache[key]

    def __call__(self, fusion_map: Tensor) -> Tensor:
        h, w, c = fusion_map.shape
        p = self.patch
        if h % p or w % p:
            raise DimensionError(f"map {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = nm.reshape(fusion_map, (gh, p, gw, p, c))
        patches = nm.transpose(patches, (0, 2, 1, 3, 4))
        tokens = self.embed(nm.reshape(patches, (gh * gw, p * p * c)))
        tokens = nm.add(tokens, nm.tensor(self._positions(gh, gw)))
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.final_ln(tokens)
        return nm.reshape(tokens, (gh, gw, self.d_tok))


# -- mask decoder ------------------------------------------------------------------


class _CrossAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int):
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.scale_factor = 1.0 / np.sqrt(dim)
        self.last_attn: np.ndarray | None = None

    def __call__(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        q, k, v = self.wq(q_src), self.wk(kv_src), self.wv(kv_src)
        scores = nm.scale(nm.matmul(q, nm.transpose(k, (1, 0))), self.scale_factor)
        attn = nm.softmax(scores, axis=1)
        self.last_attn = attn.data
        return self.wo(nm.matmul(attn, v))


class _TwoWayLayer(Module):
    """tokens query the image, tokens self-attend, the image queries the
    tokens back; each sublayer is residual + LayerNorm."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.t2i = _CrossAttention(rng, dim)
        self.ln1 = LayerNorm(dim)
        self.self_attn = _CrossAttention(rng, dim)
        self.ln2 = LayerNorm(dim)
        self.i2t = _CrossAttention(rng, dim)
        self.ln3 = LayerNorm(dim)

    def __call__(self, tokens: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        tokens = self.ln1(nm.add(tokens, self.t2i(tokens, image)))
        tokens = self.ln2(nm.add(tokens, self.self_attn(tokens, tokens)))
        image = self.ln3(nm.add(image, self.i2t(image, tokens)))
        return tokens, image

    def attention_maps(self) -> list[np.ndarray]:
        return [
            m
            for m in (self.t2i.last_attn, self.self_attn.last_attn, self.i2t.last_attn)
            if m is not None
        ]


class MaskDecoder(Module):
    """Two two-way attention layers over (output tokens + prompt tokens)
    and the embedding grid, a x4 transposed-conv upsampler, and a small
    MLP head projecting each class token onto pixel embeddings."""

    def __init__(self, rng: np.random.Generator, num_classes: int, d_tok: int):
        if num_classes < 2:
            raise ConfigError(f"need at least two classes, got {num_classes}")
        if d_tok % 4:
            raise ConfigError(f"token width must be divisible by 4, got {d_tok}")
        self.num_classes = num_classes
        self.fot = param(rng, (num_classes, d_tok), 0.5)
        self.layers = [_TwoWayLayer(rng, d_tok) for _ in range(2)]
        self.up1 = ConvTranspose2d(rng, d_tok, d_tok // 2, k=2, stride=2, pad=0)
        self.up2 = ConvTranspose2d(rng, d_tok // 2, d_tok // 4, k=2, stride=2, pad=0)
        self.head = Mlp(rng, d_tok, d_tok, d_tok // 4)

    def __call__(self, embedding: Tensor, prompt_tokens: Tensor | None) -> Tensor:
        gh, gw, d = embedding.shape
        if d != self.fot.shape[1]:
            raise DimensionError(
                f"embedding width {d} does not match token width {self.fot.shape[1]}"
            )
        if prompt_tokens is not None and prompt_tokens.shape[1] != d:
            raise DimensionError(
                f"prompt token width {prompt_tokens.shape[1]} does not match {d}"
            )
        tokens = (
            nm.concat([self.fot, prompt_tokens], axis=0)
            if prompt_tokens is not None
            else self.fot
        )
        image = nm.reshape(embedding, (gh * gw, d))
        for layer in self.layers:
            tokens, image = layer(tokens, image)

        grid = nm.transpose(nm.reshape(image, (1, gh, gw, d)), (0, 3, 1, 2))
        pix = self.up2(nm.gelu(self.up1(grid)))          # (1, d/4, 4gh, 4gw)
        _, dq, hh, ww = pix.shape
        pix_flat = nm.reshape(pix, (dq, hh * ww))

        class_tokens = nm.slice_axis(tokens, 0, 0, self.num_classes)
        class_vecs = self.head(class_tokens)              # (num_classes, d/4)
        logits = nm.matmul(class_vecs, pix_flat)
        return nm.reshape(logits, (self.num_classes, hh, ww))

    def attention_maps(self) -> list[np.ndarray]:
        maps: list[np.ndarray] = []
        for layer in self.layers:
            maps.extend(layer.attention_maps())
        return maps


# -- argmax segmentation --------------------------------------------------------------


@dataclass
class SegmentationMask:
    classes: np.ndarray          # (H, W) int64
    logits: Tensor               # (num_classes, H, W)


def segment(logits: Tensor) -> SegmentationMask:
    """Per-pixel argmax; the lowest class index wins ties."""
    if np.isnan(logits.data).any():
        raise NumericError("segmentation logits contain NaN")
    classes = np.argmax(logits.data, axis=0).astype(np.int64)
    return SegmentationMask(classes=classes, logits=logits)


# -- assembled head --------------------------------------------------------------------


class SegmentationHead(Module):
    """Frozen image encoder + prompt encoder + mask decoder."""

    def __init__(
        self,
        rng: np.random.Generator,
        num_classes: int,
        c_f: int = 3,
        d_tok: int = 64,
        patch: int = 4,
        depth: int = 2,
        num_points: int = 10,
    ):
        self.encoder = ImageEncoder(rng, c_f, d_tok, patch, depth)
        self.prompts = PromptEncoder(rng, num_classes, d_tok)
        self.decoder = MaskDecoder(rng, num_classes, d_tok)
        self.num_points = num_points

    def image_encode(self, fusion_map: Tensor) -> Tensor:
        return self.encoder(fusion_map)

    def prompt_encode(self, prompts: PromptSet, image_hw: tuple[int, int]) -> Tensor:
        return self.prompts(prompts, image_hw)

    def mask_decode(self, embedding: Tensor, prompt_tokens: Tensor | None) -> Tensor:
        return self.decoder(embedding, prompt_tokens)

    def __call__(self, fusion_map: Tensor, prompts: PromptSet | None) -> Tensor:
        embedding = self.image_encode(fusion_map)
        tokens = (
            self.prompt_encode(prompts, fusion_map.shape[:2]) if prompts is not None else None
        )
        return self.mask_decode(embedding, tokens)

    def attention_maps(self) -> list[np.ndarray]:
        return self.decoder.attention_maps()
