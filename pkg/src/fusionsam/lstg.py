"""Latent-space token generation.

Each modality is encoded by a strided conv stack into an h x w grid of
latent vectors, snapped to the nearest codebook entry (Euclidean,
lowest index on ties), and decoded back for reconstruction. The
training objective combines reconstruction, commitment, a frozen-net
perceptual term, and a patch-discriminator adversarial term. Gradients
cross the quantization step with a straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvTranspose2d, Module
from .numerics import Tensor, _make


class Codebook(Module):
    """Learned table of latent vectors plus cumulative usage counters."""

    def __init__(self, rng: np.random.Generator, num_entries: int, dim: int):
        if num_entries < 2:
            raise ConfigError(f"codebook needs at least 2 entries, got {num_entries}")
        self.entries = nm.tensor(rng.standard_normal((num_entries, dim)) * 0.5, requires_grad=True)
        self.usage = np.zeros(num_entries, dtype=np.int64)
        self.epoch_usage = np.zeros(num_entries, dtype=np.int64)

    @property
    def num_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def reset_epoch_usage(self) -> None:
        self.epoch_usage[:] = 0

    def reseed_dead_entries(
        self, rng: np.random.Generator, latents: np.ndarray, max_reseed: int | None = None
    ) -> int:
        """Move entries unused this epoch onto random recent encoder outputs.

        latents: (n, dim) pool of pre-quantization vectors. Returns the
        number of entries reseeded (capped to keep the churn bounded).
        """
        dead = np.flatnonzero(self.epoch_usage == 0)
        if dead.size == 0 or latents.size == 0:
            return 0
        cap = max_reseed if max_reseed is not None else max(1, self.num_entries // 8)
        dead = dead[:cap]
        picks = rng.integers(0, latents.shape[0], size=dead.size)
        self.entries.data[dead] = latents[picks]
        return int(dead.size)


@dataclass
class LatentTokens:
    """Quantization result for one latent grid."""

    indices: np.ndarray          # (h, w) int64, each < K
    quantized: Tensor            # (h, w, dc); rows gathered from the codebook
    pre_quant: Tensor            # (h, w, dc) encoder output


def quantize(z: Tensor, codebook: Codebook, update_usage: bool = False) -> LatentTokens:
    """Snap each grid position to its nearest codebook entry.

    Distances are exact squared Euclidean on the stored values; argmin
    takes the first (lowest-index) entry on ties. The returned quantized
    tensor carries gradients to the codebook entries via the gather.
    """
    if z.ndim != 3:
        raise DimensionError(f"quantize expects an (h, w, dc) grid, got {z.shape}")
    if z.shape[-1] != codebook.dim:
        raise DimensionError(
            f"latent width {z.shape[-1]} does not match codebook width {codebook.dim}"
        )
    h, w, dc = z.shape
    flat = z.data.reshape(h * w, dc)
    diff = flat[:, None, :] - codebook.entries.data[None, :, :]
    dists = np.sum(diff * diff, axis=2)
    idx = np.argmin(dists, axis=1)
    if update_usage:
        np.add.at(codebook.usage, idx, 1)
        np.add.at(codebook.epoch_usage, idx, 1)
    gathered = nm.gather_rows(codebook.entries, idx)
    quantized = nm.reshape(gathered, (h, w, dc))
    return LatentTokens(indices=idx.reshape(h, w), quantized=quantized, pre_quant=z)


def straight_through(z: Tensor, zq: Tensor) -> Tensor:
    """Forward the quantized values, send the backward gradient to z.

    The quantized operand receives no gradient through this path, so
    codebook learning stays confined to the commitment objective.
    """
    if z.shape != zq.shape:
        raise DimensionError(f"straight_through: shapes {z.shape} and {zq.shape} differ")
    out = _make(zq.data, (z,), None)

    def backward():
        z._accumulate(out.grad)

    out._backward_fn = backward if out.requires_grad else None
    return out


class VqEncoder(Module):
    """Conv stack downsampling by the scaling factor (a power of two)."""

    def __init__(self, rng: np.random.Generator, c_in: int, dc: int, scale: int = 4):
        stages = _stages_for_scale(scale)
        self.scale = scale
        widths = [24, 32, 48][:stages] + [48] * max(0, stages - 3)
        self.pre = Conv2d(rng, c_in, widths[0], k=3, stride=1, pad=1)
        self.downs = [
            Conv2d(rng, widths[i], widths[min(i + 1, len(widths) - 1)], k=4, stride=2, pad=1)
            for i in range(stages)
        ]
        self.post = Conv2d(rng, widths[min(stages, len(widths) - 1)], dc, k=3, stride=1, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % self.scale or x.shape[3] % self.scale:
            raise DimensionError(
                f"input spatial dims {x.shape[2]}x{x.shape[3]} not divisible by scale {self.scale}"
            )
        y = nm.relu(self.pre(x))
        for conv in self.downs:
            y = nm.relu(conv(y))
        return self.post(y)


class VqDecoder(Module):
    """Transposed-conv stack mirroring VqEncoder back to image resolution."""

    def __init__(self, rng: np.random.Generator, dc: int, c_out: int, scale: int = 4):
        stages = _stages_for_scale(scale)
        widths = [48, 32, 24] + [24] * max(0, stages - 3)
        self.pre = Conv2d(rng, dc, widths[0], k=3, stride=1, pad=1)
        self.ups = [
            ConvTranspose2d(rng, widths[i], widths[min(i + 1, len(widths) - 1)], k=4, stride=2, pad=1)
            for i in range(stages)
        ]
        self.post = Conv2d(rng, widths[min(stages, len(widths) - 1)], c_out, k=3, stride=1, pad=1)

    def __call__(self, tokens: Tensor) -> Tensor:
        y = nm.relu(self.pre(tokens))
        for deconv in self.ups:
            y = nm.relu(deconv(y))
        return self.post(y)


def _stages_for_scale(scale: int) -> int:
    stages = int(round(np.log2(scale)))
    if 2 ** stages != scale or stages < 1:
        raise ConfigError(f"scaling factor must be a power of two >= 2, got {scale}")
    return stages


def encode(image_hwc: Tensor, encoder: VqEncoder) -> Tensor:
    """Single-image convenience wrapper: (H, W, C) -> (h, w, dc)."""
    x = nm.transpose(nm.reshape(image_hwc, (1,) + image_hwc.shape), (0, 3, 1, 2))
    z = encoder(x)
    return nm.reshape(nm.transpose(z, (0, 2, 3, 1)), z.shape[2:4] + (z.shape[1],))


def decode(tokens_hwc: Tensor, decoder: VqDecoder) -> Tensor:
    """Single-grid convenience wrapper: (h, w, dc) -> (H, W, C)."""
    x = nm.transpose(nm.reshape(tokens_hwc, (1,) + tokens_hwc.shape), (0, 3, 1, 2))
    img = decoder(x)
    return nm.reshape(nm.transpose(img, (0, 2, 3, 1)), img.shape[2:4] + (img.shape[1],))


class PatchDiscriminator(Module):
    """Three stride-2 convs, so the logit grid is the input grid / 8."""

    def __init__(self, rng: np.random.Generator, c_in: int):
        self.c1 = Conv2d(rng, c_in, 16, k=4, stride=2, pad=1)
        self.c2 = Conv2d(rng, 16, 24, k=4, stride=2, pad=1)
        self.c3 = Conv2d(rng, 24, 32, k=4, stride=2, pad=1)
        self.head = Conv2d(rng, 32, 1, k=3, stride=1, pad=1)

    def __call__(self, image: Tensor) -> Tensor:
        y = nm.relu(self.c1(image))
        y = nm.relu(self.c2(y))
        y = nm.relu(self.c3(y))
        return self.head(y)


class FeatureNet(Module):
    """Fixed, seed-initialized conv stack used by the perceptual term.

    Frozen at construction: it only has to be a stable nonlinear feature
    map, not a trained network.
    """

    def __init__(self, rng: np.random.Generator, c_in: int):
        self.c1 = Conv2d(rng, c_in, 12, k=3, stride=1, pad=1)
        self.c2 = Conv2d(rng, 12, 16, k=4, stride=2, pad=1)
        self.c3 = Conv2d(rng, 16, 16, k=4, stride=2, pad=1)
        self.freeze()

    def __call__(self, image: Tensor) -> Tensor:
        y = nm.relu(self.c1(image))
        y = nm.relu(self.c2(y))
        return self.c3(y)


@dataclass
class LossWeights:
    perc: float = 0.1        # alpha
    adv: float = 0.05        # adversarial weight in the generator total
    commit: float = 1.0      # gamma
    commit_beta: float = 0.25  # beta inside the commitment term

    def validate(self) -> "LossWeights":
        if min(self.perc, self.adv, self.commit, self.commit_beta) < 0:
            raise ConfigError("loss weights must be nonnegative")
        return self


@dataclass
class LstgLossParts:
    rec: Tensor
    commit: Tensor
    perc: Tensor
    adv_g: Tensor
    adv_d: Tensor
    total_g: Tensor

    def scalars(self) -> dict:
        return {
            "rec": self.rec.item(),
            "commit": self.commit.item(),
            "perc": self.perc.item(),
            "adv_g": self.adv_g.item(),
            "adv_d": self.adv_d.item(),
            "total_g": self.total_g.item(),
        }


def _sq_sum(t: Tensor) -> Tensor:
    return nm.tsum(nm.square(t))


def lstg_loss(
    images: list[Tensor],
    recons: list[Tensor],
    pre_quants: list[Tensor],
    quantizeds: list[Tensor],
    discs: list[PatchDiscriminator] | None,
    phis: list[FeatureNet] | None,
    weights: LossWeights,
) -> LstgLossParts:
    """Four-part objective over both modalities.

    rec and perc are squared-error sums; commit pulls the codebook toward
    stopped encoder outputs and (scaled by commit_beta) the encoder toward
    stopped codebook rows; the adversarial pair uses patch logits with the
    sigmoid folded into stable log-sigmoid evaluations. The generator-side
    total is rec + perc_w * perc + adv_w * adv_g + commit_w * commit.
    """
    weights.validate()
    rec = nm.zeros(())
    commit = nm.zeros(())
    perc = nm.zeros(())
    adv_g = nm.zeros(())
    adv_d = nm.zeros(())
    for i, (img, recon) in enumerate(zip(images, recons)):
        if img.shape != recon.shape:
            raise DimensionError(
                f"reconstruction shape {recon.shape} does not match image {img.shape}"
            )
        rec = rec + _sq_sum(nm.sub(img, recon))
        z = pre_quants[i]
        q = quantizeds[i]
        commit = commit + _sq_sum(nm.sub(z.detach(), q)) + nm.scale(
            _sq_sum(nm.sub(q.detach(), z)), weights.commit_beta
        )
        if phis is not None:
            phi = phis[i]
            perc = perc + _sq_sum(nm.sub(phi(img), phi(recon)))
        if discs is not None:
            disc = discs[i]
            # generator maximizes log D(fake); discriminator ascends
            # log D(real) + log(1 - D(fake)) on detached fakes
            fake_logits = disc(recon)
            adv_g = adv_g + nm.neg(nm.tsum(nm.logsigmoid(fake_logits)))
            real_term = nm.tsum(nm.logsigmoid(disc(img.detach())))
            fake_term = nm.tsum(nm.logsigmoid(nm.neg(disc(recon.detach()))))
            adv_d = adv_d + real_term + fake_term
    total_g = (
        rec
        + nm.scale(perc, weights.perc)
        + nm.scale(adv_g, weights.adv)
        + nm.scale(commit, weights.commit)
    )
    return LstgLossParts(rec=rec, commit=commit, perc=perc, adv_g=adv_g, adv_d=adv_d, total_g=total_g)


class LatentTokenizer(Module):
    """Both modalities' encoders, decoders, and the (shared) codebook."""

    def __init__(
        self,
        rng: np.random.Generator,
        c_vis: int,
        c_ir: int,
        dc: int,
        codebook_size: int,
        scale: int = 4,
        shared_codebook: bool = True,
    ):
        self.enc_vis = VqEncoder(rng, c_vis, dc, scale)
        self.enc_ir = VqEncoder(rng, c_ir, dc, scale)
        self.dec_vis = VqDecoder(rng, dc, c_vis, scale)
        self.dec_ir = VqDecoder(rng, dc, c_ir, scale)
        self.codebook = Codebook(rng, codebook_size, dc)
        self.codebook_ir = None if shared_codebook else Codebook(rng, codebook_size, dc)
        self.disc_vis = PatchDiscriminator(rng, c_vis)
        self.disc_ir = PatchDiscriminator(rng, c_ir)
        self.phi_vis = FeatureNet(rng, c_vis)
        self.phi_ir = FeatureNet(rng, c_ir)

    def book_for(self, modality: str) -> Codebook:
        if modality == "ir" and self.codebook_ir is not None:
            return self.codebook_ir
        return self.codebook

    def discriminator_params(self):
        out = {}
        for name, p in self.disc_vis.named_parameters("disc_vis."):
            out[name] = p
        for name, p in self.disc_ir.named_parameters("disc_ir."):
            out[name] = p
        return out
