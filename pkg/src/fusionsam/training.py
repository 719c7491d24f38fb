"""Joint optimization of the fusion and segmentation stages.

One generator step (reconstruction + commitment + perceptual +
adversarial + cross-entropy) alternates with one discriminator step.
The image encoder stays frozen throughout; everything else, including
the codebook, trains under Adam with decoupled weight decay. Runs are
deterministic for a fixed seed, and checkpoints capture parameters,
optimizer state, config, and RNG state in one named-tensor table.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nm
from .checkpoint import FORMAT_VERSION, Checkpoint
from .data import PairedSample
from .errors import ConfigError, ContractError, DataError, NumericError
from .fmp import FusionMask, FusionModule
from .lstg import LatentTokenizer, LossWeights, LstgLossParts, lstg_loss, quantize, straight_through
from .nn import Linear, Module
from .numerics import Tensor
from .segmentation import SegmentationHead, SegmentationMask, sample_prompts, segment

VARIANTS = ("full", "no_lstg", "no_fmp_concat")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 4
    epochs: int = 100
    max_steps: int = 0            # 0 means run all epochs
    seed: int = 0
    alpha_perc: float = 0.1
    beta_adv: float = 0.05
    gamma_commit: float = 1.0
    beta_commit: float = 0.25
    lambda_seg: float = 1.0
    variant: str = "full"
    num_classes: int = 4
    dc: int = 64
    codebook_size: int = 256
    d_tok: int = 64
    scale: int = 4
    patch: int = 4
    num_points: int = 10
    include_background: bool = False
    shared_codebook: bool = True
    use_ffn: bool = False
    aux_prompt_free: bool = True  # also trains the prompt-free decoding pass
    hflip: bool = False           # random horizontal flip during training
    val_every: int = 1            # epochs between validations, 0 disables

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.alpha_perc, self.beta_adv, self.gamma_commit, self.beta_commit) < 0:
            raise ConfigError("loss weights must be nonnegative")
        return self

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            perc=self.alpha_perc,
            adv=self.beta_adv,
            commit=self.gamma_commit,
            commit_beta=self.beta_commit,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kwargs = {}
        hints = {f.name: f.type for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(value, hints[key])
        return cls(**kwargs).validate()


def _parse_value(value: str, hint: str):
    hint = str(hint)
    if "bool" in hint:
        if value in ("True", "true", "1"):
            return True
        if value in ("False", "false", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if "int" in hint:
        return int(value)
    if "float" in hint:
        return float(value)
    return value


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float
) -> None:
    """Bias-corrected Adam with decoupled weight decay applied before the
    moment update. Every param must carry a populated gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient at adam_step")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.weight_decay)

    def state_table(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array(self.state.step, dtype=np.int64)}
        for name in self.params:
            if name in self.state.m:
                out[f"{prefix}.m.{name}"] = self.state.m[name]
                out[f"{prefix}.v.{name}"] = self.state.v[name]
        return out

    def load_state_table(self, prefix: str, table: dict[str, np.ndarray]) -> None:
        key = f"{prefix}.step"
        if key in table:
            self.state.step = int(table[key].reshape(())[()])
        for name in self.params:
            mkey = f"{prefix}.m.{name}"
            if mkey in table:
                self.state.m[name] = table[mkey].astype(np.float64).copy()
                self.state.v[name] = table[f"{prefix}.v.{name}"].astype(np.float64).copy()


# -- model assembly -----------------------------------------------------------------


def _grid_from_batch(batch: Tensor, i: int) -> Tensor:
    """(B, C, h, w) batch -> (h, w, C) grid for sample i."""
    _, c, h, w = batch.shape
    s = nm.slice_axis(batch, 0, i, i + 1)
    return nm.reshape(nm.transpose(s, (0, 2, 3, 1)), (h, w, c))


def _batch_from_grids(grids: list[Tensor]) -> Tensor:
    parts = []
    for g in grids:
        h, w, c = g.shape
        parts.append(nm.transpose(nm.reshape(g, (1, h, w, c)), (0, 3, 1, 2)))
    return nm.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def _stack_images(samples: list[PairedSample], which: str) -> Tensor:
    arrs = [getattr(s, which).data for s in samples]
    return nm.tensor(np.stack(arrs).transpose(0, 3, 1, 2))


class Pipeline(Module):
    """Variant-selectable end-to-end model.

    full:          VQ tokenizer -> attention fusion -> seg head
    no_fmp_concat: VQ tokenizer -> channel-concat fusion -> seg head
    no_lstg:       fixed average-pool + pointwise projection -> attention
                   fusion -> seg head (no reconstruction path at all)
    """

    def __init__(self, rng: np.random.Generator, cfg: TrainConfig, c_vis: int = 3, c_ir: int = 1):
        cfg.validate()
        self.cfg = cfg
        self.c_vis = c_vis
        self.c_ir = c_ir
        if cfg.variant != "no_lstg":
            self.lstg = LatentTokenizer(
                rng,
                c_vis=c_vis,
                c_ir=c_ir,
                dc=cfg.dc,
                codebook_size=cfg.codebook_size,
                scale=cfg.scale,
                shared_codebook=cfg.shared_codebook,
            )
        else:
            self.pool_vis = Linear(rng, c_vis, cfg.dc)
            self.pool_ir = Linear(rng, c_ir, cfg.dc)
        fusion_mode = "concat" if cfg.variant == "no_fmp_concat" else "attention"
        self.fmp = FusionModule(
            rng, dc=cfg.dc, c_f=3, scale=cfg.scale, mode=fusion_mode, use_ffn=cfg.use_ffn
        )
        self.seg = SegmentationHead(
            rng,
            num_classes=cfg.num_classes,
            c_f=3,
            d_tok=cfg.d_tok,
            patch=cfg.patch,
            depth=2,
            num_points=cfg.num_points,
        )

    # parameter partitions ------------------------------------------------------

    def generator_params(self) -> dict[str, Tensor]:
        out = {}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith(("lstg.disc_vis.", "lstg.disc_ir.")):
                continue
            out[name] = p
        return out

    def discriminator_params(self) -> dict[str, Tensor]:
        return {
            name: p
            for name, p in self.named_parameters()
            if p.requires_grad and name.startswith(("lstg.disc_vis.", "lstg.disc_ir."))
        }

    # forward pieces -------------------------------------------------------------

    def _latent_batches(self, samples: list[PairedSample], update_usage: bool):
        """Returns straight-through latent batches plus the raw pieces the
        losses need: (st_vis, st_ir, z_vis, z_ir, q_vis, q_ir)."""
        vis = _stack_images(samples, "vis")
        ir = _stack_images(samples, "ir")
        if self.cfg.variant == "no_lstg":
            pooled_v = nm.avg_pool2d(vis, self.cfg.scale)
            pooled_i = nm.avg_pool2d(ir, self.cfg.scale)
            b, _, h, w = pooled_v.shape
            flat_v = nm.reshape(nm.transpose(pooled_v, (0, 2, 3, 1)), (b * h * w, self.c_vis))
            flat_i = nm.reshape(nm.transpose(pooled_i, (0, 2, 3, 1)), (b * h * w, self.c_ir))
            lat_v = nm.transpose(nm.reshape(self.pool_vis(flat_v), (b, h, w, self.cfg.dc)), (0, 3, 1, 2))
            lat_i = nm.transpose(nm.reshape(self.pool_ir(flat_i), (b, h, w, self.cfg.dc)), (0, 3, 1, 2))
            return lat_v, lat_i, None, None, None, None
        z_vis = self.lstg.enc_vis(vis)
        z_ir = self.lstg.enc_ir(ir)
        q_vis_grids, q_ir_grids = [], []
        for i in range(len(samples)):
            zv = _grid_from_batch(z_vis, i)
            zi = _grid_from_batch(z_ir, i)
            q_vis_grids.append(quantize(zv, self.lstg.book_for("vis"), update_usage).quantized)
            q_ir_grids.append(quantize(zi, self.lstg.book_for("ir"), update_usage).quantized)
        q_vis = _batch_from_grids(q_vis_grids)
        q_ir = _batch_from_grids(q_ir_grids)
        st_vis = straight_through(z_vis, q_vis)
        st_ir = straight_through(z_ir, q_ir)
        return st_vis, st_ir, z_vis, z_ir, q_vis, q_ir

    def fuse_batch(self, samples: list[PairedSample], update_usage: bool = False):
        """Fusion masks for a batch plus the tensors the losses consume."""
        st_vis, st_ir, z_vis, z_ir, q_vis, q_ir = self._latent_batches(samples, update_usage)
        masks = []
        for i in range(len(samples)):
            masks.append(self.fmp(_grid_from_batch(st_vis, i), _grid_from_batch(st_ir, i)))
        return masks, (st_vis, st_ir, z_vis, z_ir, q_vis, q_ir)

    def fuse(self, sample: PairedSample) -> FusionMask:
        masks, _ = self.fuse_batch([sample])
        return masks[0]

    def seg_logits(
        self,
        mask: FusionMask,
        labels: np.ndarray | None,
        prompt_mode: str,
        embedding: Tensor | None = None,
    ) -> Tensor:
        """One decoding pass. prompt_mode: "gt" samples prompts from the given
        labels, "free" decodes from output tokens alone, "self" runs a
        prompt-free pass and re-prompts from its own argmax. The frozen
        encoder's embedding may be passed in to share it across passes."""
        fmap = mask.map
        if embedding is None:
            embedding = self.seg.image_encode(fmap)
        hw = fmap.shape[:2]
        if prompt_mode == "free":
            return self.seg.mask_decode(embedding, None)
        if prompt_mode == "gt":
            prompts = sample_prompts(fmap.data, labels, self.cfg.num_points, self.cfg.seed)
            return self.seg.mask_decode(embedding, self.seg.prompt_encode(prompts, hw))
        if prompt_mode == "self":
            first = self.seg.mask_decode(embedding, None)
            pseudo = segment(first).classes
            prompts = sample_prompts(fmap.data, pseudo, self.cfg.num_points, self.cfg.seed)
            return self.seg.mask_decode(embedding, self.seg.prompt_encode(prompts, hw))
        raise ConfigError(f"unknown prompt mode {prompt_mode!r}")

    def infer(self, sample: PairedSample, prompt_mode: str = "self") -> SegmentationMask:
        mask = self.fuse(sample)
        return segment(self.seg_logits(mask, None, prompt_mode))

    def attention_maps(self) -> list[np.ndarray]:
        return self.fmp.attention_maps() + self.seg.attention_maps()


# -- losses -----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of a (C, H, W) logit map."""
    c = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"label id outside [0, {c}): {labels.min()}..{labels.max()}")
    logp = nm.log_softmax(logits, axis=0)
    onehot = np.zeros(logits.shape)
    rows, cols = np.indices(labels.shape)
    onehot[labels, rows, cols] = 1.0
    picked = nm.tsum(nm.mul(logp, nm.tensor(onehot)))
    return nm.scale(nm.neg(picked), 1.0 / labels.size)


def joint_loss(
    fusion_parts: LstgLossParts, seg_logits: Tensor, gt_labels: np.ndarray, lambda_seg: float = 1.0
) -> Tensor:
    """Fusion generator total plus weighted segmentation cross-entropy."""
    return nm.add(fusion_parts.total_g, nm.scale(cross_entropy(seg_logits, gt_labels), lambda_seg))


def _zero_parts() -> LstgLossParts:
    z = nm.zeros(())
    return LstgLossParts(rec=z, commit=z, perc=z, adv_g=z, adv_d=z, total_g=z)


# -- evaluation ---------------------------------------------------------------------


class IouAccumulator:
    """Confusion-matrix mIoU, aggregated over samples."""

    def __init__(self, num_classes: int, include_background: bool = False):
        self.num_classes = num_classes
        self.include_background = include_background
        self.confusion = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, predicted: np.ndarray, labels: np.ndarray) -> None:
        if predicted.shape != labels.shape:
            raise DataError(f"prediction {predicted.shape} vs labels {labels.shape}")
        if labels.max() >= self.num_classes or predicted.max() >= self.num_classes:
            raise ConfigError(
                f"class id >= num_classes ({self.num_classes}) in evaluation input"
            )
        joint = self.num_classes * labels.reshape(-1) + predicted.reshape(-1)
        counts = np.bincount(joint, minlength=self.num_classes**2)
        self.confusion += counts.reshape(self.num_classes, self.num_classes)

    def per_class_iou(self) -> np.ndarray:
        inter = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(axis=0) + self.confusion.sum(axis=1) - np.diag(self.confusion)
        out = np.full(self.num_classes, np.nan)
        nz = union > 0
        out[nz] = inter[nz] / union[nz]
        return out

    def miou(self) -> float:
        iou = self.per_class_iou()
        if not self.include_background:
            iou = iou[1:]
        valid = ~np.isnan(iou)
        if not valid.any():
            return float("nan")
        return float(iou[valid].mean())


def evaluate(
    infer,
    dataset: list[PairedSample],
    num_classes: int,
    include_background: bool = False,
) -> tuple[np.ndarray, float]:
    """Run ``infer(sample) -> (H, W) class grid`` over a split and return
    (per-class IoU with NaN for absent classes, mIoU)."""
    acc = IouAccumulator(num_classes, include_background)
    for sample in dataset:
        acc.add(infer(sample), sample.labels)
    return acc.per_class_iou(), acc.miou()


# -- RNG state packing ----------------------------------------------------------------


def _pack_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    mask = (1 << 64) - 1
    return np.array(
        [s & mask, (s >> 64) & mask, inc & mask, (inc >> 64) & mask,
         int(st["has_uint32"]), int(st["uinteger"])],
        dtype=np.uint64,
    )


def _unpack_rng(packed: np.ndarray) -> np.random.Generator:
    vals = [int(x) for x in packed]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": vals[0] | (vals[1] << 64), "inc": vals[2] | (vals[3] << 64)},
        "has_uint32": vals[4],
        "uinteger": vals[5],
    }
    return rng


# -- trainer -----------------------------------------------------------------------


METRIC_COLUMNS = [
    "epoch", "step", "rec", "commit", "perc", "adv_g", "adv_d",
    "total_g", "seg_ce", "total", "val_miou",
]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint
    metrics: list[dict]
    steps_run: int


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        dataset: list[PairedSample],
        val_dataset: list[PairedSample] | None = None,
    ):
        if not dataset:
            raise DataError("training dataset is empty")
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.val_dataset = val_dataset
        self.rng = np.random.default_rng(cfg.seed)
        self.model = Pipeline(self.rng, cfg, c_vis=3, c_ir=1)
        self.gen_opt = Adam(self.model.generator_params(), cfg.lr, cfg.weight_decay)
        disc_params = self.model.discriminator_params()
        self.disc_opt = Adam(disc_params, cfg.lr, cfg.weight_decay) if disc_params else None
        self._latent_pool: np.ndarray | None = None

    # state capture --------------------------------------------------------------

    def state_table(self) -> dict[str, np.ndarray]:
        table: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters():
            table[name] = p.data
        if self.cfg.variant != "no_lstg":
            table["lstg.codebook.usage"] = self.model.lstg.codebook.usage
            if self.model.lstg.codebook_ir is not None:
                table["lstg.codebook_ir.usage"] = self.model.lstg.codebook_ir.usage
        table.update(self.gen_opt.state_table("optim.gen"))
        if self.disc_opt is not None:
            table.update(self.disc_opt.state_table("optim.disc"))
        table["meta.config"] = np.frombuffer(
            self.cfg.to_text().encode("utf-8"), dtype=np.uint8
        ).copy()
        table["meta.rng"] = _pack_rng(self.rng)
        return table

    def checkpoint(self) -> Checkpoint:
        # copy so later training steps do not mutate the captured state
        return Checkpoint(
            version=FORMAT_VERSION,
            table={k: v.copy() for k, v in self.state_table().items()},
        )

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        params = dict(self.model.named_parameters())
        for name, p in params.items():
            if name not in ckpt.table:
                raise DataError(f"checkpoint is missing parameter {name!r}")
            if tuple(ckpt.table[name].shape) != p.shape:
                raise ConfigError(
                    f"checkpoint entry {name!r} has shape {ckpt.table[name].shape}, "
                    f"model expects {p.shape}"
                )
            p.data = ckpt.table[name].astype(np.float64).copy()
        if self.cfg.variant != "no_lstg" and "lstg.codebook.usage" in ckpt.table:
            self.model.lstg.codebook.usage = ckpt.table["lstg.codebook.usage"].copy()
            if self.model.lstg.codebook_ir is not None and "lstg.codebook_ir.usage" in ckpt.table:
                self.model.lstg.codebook_ir.usage = ckpt.table["lstg.codebook_ir.usage"].copy()
        # optimizers hold references into the model; rebind after data swap
        self.gen_opt.params = self.model.generator_params()
        self.gen_opt.load_state_table("optim.gen", ckpt.table)
        if self.disc_opt is not None:
            self.disc_opt.params = self.model.discriminator_params()
            self.disc_opt.load_state_table("optim.disc", ckpt.table)
        if "meta.rng" in ckpt.table:
            self.rng = _unpack_rng(ckpt.table["meta.rng"])

    # one optimization step --------------------------------------------------------

    def _maybe_flip(self, samples: list[PairedSample]) -> list[PairedSample]:
        if not self.cfg.hflip:
            return samples
        out = []
        for s in samples:
            if self.rng.random() < 0.5:
                out.append(
                    PairedSample(
                        vis=nm.tensor(s.vis.data[:, ::-1].copy()),
                        ir=nm.tensor(s.ir.data[:, ::-1].copy()),
                        labels=np.ascontiguousarray(s.labels[:, ::-1]),
                        id=s.id,
                    )
                )
            else:
                out.append(s)
        return out

    def _step(self, samples: list[PairedSample]) -> dict:
        cfg = self.cfg
        samples = self._maybe_flip(samples)
        masks, pieces = self.model.fuse_batch(samples, update_usage=True)
        st_vis, st_ir, z_vis, z_ir, q_vis, q_ir = pieces

        if cfg.variant == "no_lstg":
            parts = _zero_parts()
        else:
            vis_b = _stack_images(samples, "vis")
            ir_b = _stack_images(samples, "ir")
            recon_vis = self.model.lstg.dec_vis(st_vis)
            recon_ir = self.model.lstg.dec_ir(st_ir)
            parts = lstg_loss(
                [vis_b, ir_b],
                [recon_vis, recon_ir],
                [z_vis, z_ir],
                [q_vis, q_ir],
                [self.model.lstg.disc_vis, self.model.lstg.disc_ir],
                [self.model.lstg.phi_vis, self.model.lstg.phi_ir],
                cfg.loss_weights(),
            )
            self._latent_pool = z_vis.data.transpose(0, 2, 3, 1).reshape(-1, cfg.dc)

        ce_terms = []
        for mask, sample in zip(masks, samples):
            embedding = self.model.seg.image_encode(mask.map)
            logits = self.model.seg_logits(mask, sample.labels, "gt", embedding)
            ce = cross_entropy(logits, sample.labels)
            if cfg.aux_prompt_free:
                free = cross_entropy(
                    self.model.seg_logits(mask, None, "free", embedding), sample.labels
                )
                ce = nm.scale(nm.add(ce, free), 0.5)
            ce_terms.append(ce)
        seg_ce = nm.scale(ce_terms[0] if len(ce_terms) == 1 else _sum_tensors(ce_terms), 1.0 / len(ce_terms))

        # per-sample-averaged fusion objective plus the segmentation term
        total = nm.add(nm.scale(parts.total_g, 1.0 / len(samples)), nm.scale(seg_ce, cfg.lambda_seg))
        scalars = parts.scalars()
        scalars["seg_ce"] = seg_ce.item()
        scalars["total"] = total.item()
        if not np.isfinite(scalars["total"]):
            raise NumericError(f"non-finite training loss: {scalars['total']}")

        self.gen_opt.zero_grad()
        if self.disc_opt is not None:
            self.disc_opt.zero_grad()
        total.backward()
        self.gen_opt.step()

        if self.disc_opt is not None:
            if not np.isfinite(scalars["adv_d"]):
                raise NumericError(f"non-finite discriminator loss: {scalars['adv_d']}")
            self.disc_opt.zero_grad()
            nm.neg(parts.adv_d).backward()
            self.disc_opt.step()
        return scalars

    def _validate(self) -> float:
        if not self.val_dataset:
            return float("nan")
        _, miou = evaluate(
            lambda s: self.model.infer(s, "self").classes,
            self.val_dataset,
            self.cfg.num_classes,
            self.cfg.include_background,
        )
        return miou

    def train(self, metrics_path: str | None = None) -> TrainResult:
        cfg = self.cfg
        metrics: list[dict] = []
        step = 0
        best_miou = -1.0
        last_good = self.checkpoint()
        best = last_good
        writer = _MetricsWriter(metrics_path) if metrics_path else None
        try:
            for epoch in range(cfg.epochs):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                order = self.rng.permutation(len(self.dataset))
                epoch_rows = []
                for start in range(0, len(order), cfg.batch_size):
                    if cfg.max_steps and step >= cfg.max_steps:
                        break
                    batch = [self.dataset[i] for i in order[start : start + cfg.batch_size]]
                    try:
                        scalars = self._step(batch)
                    except NumericError:
                        last_good.table["meta.aborted"] = np.frombuffer(
                            b"nan-abort", dtype=np.uint8
                        ).copy()
                        raise TrainingDiverged(last_good) from None
                    step += 1
                    scalars["epoch"] = epoch
                    scalars["step"] = step
                    epoch_rows.append(scalars)
                if cfg.variant != "no_lstg" and self._latent_pool is not None:
                    for book in filter(None, (self.model.lstg.codebook, self.model.lstg.codebook_ir)):
                        book.reseed_dead_entries(self.rng, self._latent_pool)
                        book.reset_epoch_usage()
                if not epoch_rows:
                    continue
                row = {k: float(np.mean([r[k] for r in epoch_rows])) for k in epoch_rows[0]}
                row["epoch"] = epoch
                row["step"] = step
                run_val = cfg.val_every and (epoch % cfg.val_every == cfg.val_every - 1)
                row["val_miou"] = self._validate() if run_val else float("nan")
                metrics.append(row)
                if writer:
                    writer.write(row)
                if run_val and not math.isnan(row["val_miou"]) and row["val_miou"] > best_miou:
                    best_miou = row["val_miou"]
                    best = self.checkpoint()
                last_good = self.checkpoint()
        finally:
            if writer:
                writer.close()
        final = self.checkpoint()
        if best_miou < 0:
            best = final
        return TrainResult(checkpoint=final, best_checkpoint=best, metrics=metrics, steps_run=step)


class TrainingDiverged(NumericError):
    """Raised when the loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, last_good: Checkpoint):
        super().__init__("training diverged (non-finite loss); last good checkpoint attached")
        self.last_good = last_good


def _sum_tensors(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = nm.add(out, t)
    return out


class _MetricsWriter:
    def __init__(self, path: str):
        exists = os.path.exists(path)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.fh = open(path, "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        if not exists:
            self.writer.writeheader()

    def write(self, row: dict) -> None:
        self.writer.writerow(row)
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# -- checkpoint-driven construction ----------------------------------------------------


def trainer_from_checkpoint(
    ckpt: Checkpoint,
    dataset: list[PairedSample],
    val_dataset: list[PairedSample] | None = None,
    cfg_override: TrainConfig | None = None,
) -> Trainer:
    if "meta.config" not in ckpt.table:
        raise DataError("checkpoint has no embedded config")
    cfg = cfg_override or TrainConfig.from_text(bytes(ckpt.table["meta.config"]).decode("utf-8"))
    trainer = Trainer(cfg, dataset, val_dataset)
    trainer.load_checkpoint(ckpt)
    return trainer
