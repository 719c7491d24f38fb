"""Dataset layout, synthetic paired-modality scenes, and image I/O.

On-disk contract: ``root/{train,val,test}/{vis,ir,labels}/<id>.png`` with
vis as RGB8, ir as Gray8, and labels as indexed 8-bit PNG using the fixed
palette below. Pixel values load as floats in [0, 1]; label PNGs store
raw class ids.

The synthetic generator draws rectangles and ellipses whose visibility
is deliberately complementary across modalities: one class appears only
in the visible channel, one only in the infrared channel, and one is a
visible twin of the first class distinguishable only by a small infrared
core marker, so fusing both modalities (and propagating the marker
across the shape) is required to label it correctly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import numerics as nm
from .errors import ConfigError, DataError
from .numerics import Tensor

SPLITS = ("train", "val", "test")

# Fixed label palette: 10 hand-picked distinct colors, then a deterministic
# spread for the remaining indices. Entry 0 (background) is black.
_BASE_COLORS = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (250, 190, 190),
]


def palette() -> np.ndarray:
    """The documented 256-entry RGB palette used by every label PNG."""
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        if i < len(_BASE_COLORS):
            table[i] = _BASE_COLORS[i]
        else:
            table[i] = ((i * 37) % 256, (i * 91) % 256, (i * 53) % 256)
    return table


@dataclass
class PairedSample:
    """Aligned visible/infrared pair with a per-pixel class grid."""

    vis: Tensor        # (H, W, 3) in [0, 1]
    ir: Tensor         # (H, W, 1) in [0, 1]
    labels: np.ndarray  # (H, W) int64
    id: str


@dataclass
class SynthConfig:
    image_size: int = 32
    num_classes: int = 4
    shapes_per_image: int = 3
    train_count: int = 8
    val_count: int = 4
    test_count: int = 4
    vis_contrast: float = 0.45   # color offset of visible-channel classes
    ir_contrast: float = 0.6     # intensity offset of infrared-strong classes
    noise: float = 0.02          # per-pixel Gaussian sigma on both modalities
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > 256:
            raise ConfigError("num_classes exceeds the 8-bit label palette")
        return self


# -- PNG primitives -------------------------------------------------------------


def _save_png(path: str, array: np.ndarray, mode: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if mode == "P":
        img = Image.fromarray(array.astype(np.uint8), mode="P")
        img.putpalette(palette().reshape(-1).tolist())
    else:
        img = Image.fromarray(array.astype(np.uint8), mode=mode)
    img.save(path, format="PNG")


def _load_image(path: str, expect: str, sample_id: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise DataError(f"sample {sample_id!r}: missing file {path}") from None
    except OSError as exc:
        raise DataError(f"sample {sample_id!r}: unreadable file {path}: {exc}") from None
    if expect == "labels":
        if img.mode not in ("P", "L"):
            raise DataError(
                f"sample {sample_id!r}: labels must be indexed or gray PNG, got mode {img.mode}"
            )
        return np.asarray(img, dtype=np.int64)
    if expect == "vis":
        if img.mode != "RGB":
            raise DataError(f"sample {sample_id!r}: vis must be RGB PNG, got mode {img.mode}")
        return np.asarray(img, dtype=np.float64) / 255.0
    if img.mode != "L":
        raise DataError(f"sample {sample_id!r}: ir must be Gray8 PNG, got mode {img.mode}")
    return (np.asarray(img, dtype=np.float64) / 255.0)[:, :, None]


# -- loading ----------------------------------------------------------------------


def load_class_map(path: str) -> dict[int, int]:
    """Optional id remapping, one "src dst" pair per line."""
    mapping: dict[int, int] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'src dst', got {raw!r}")
            mapping[int(parts[0])] = int(parts[1])
    return mapping


def load_dataset(
    root: str, split: str, class_map: dict[int, int] | None = None
) -> list[PairedSample]:
    """Read one split, sorted by filename. Every id must exist in all three
    subdirectories with matching spatial dimensions."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}, expected one of {SPLITS}")
    base = os.path.join(root, split)
    vis_dir = os.path.join(base, "vis")
    if not os.path.isdir(vis_dir):
        raise DataError(f"missing directory {vis_dir}")
    samples = []
    for fname in sorted(os.listdir(vis_dir)):
        if not fname.endswith(".png"):
            continue
        sample_id = fname[:-4]
        vis = _load_image(os.path.join(base, "vis", fname), "vis", sample_id)
        ir = _load_image(os.path.join(base, "ir", fname), "ir", sample_id)
        labels = _load_image(os.path.join(base, "labels", fname), "labels", sample_id)
        if class_map:
            remapped = labels.copy()
            for src, dst in class_map.items():
                remapped[labels == src] = dst
            labels = remapped
        if vis.shape[:2] != ir.shape[:2] or vis.shape[:2] != labels.shape:
            raise DataError(
                f"sample {sample_id!r}: dims disagree "
                f"(vis {vis.shape[:2]}, ir {ir.shape[:2]}, labels {labels.shape})"
            )
        samples.append(
            PairedSample(vis=nm.tensor(vis), ir=nm.tensor(ir), labels=labels, id=sample_id)
        )
    if not samples:
        raise DataError(f"no samples found under {vis_dir}")
    return samples


# -- synthetic scenes ----------------------------------------------------------------

# Class roles for the default 4-class setup (see module docstring):
#   1: visible-only color shape
#   2: infrared-only bright shape (visible contrast exactly zero, below noise)
#   3: visible twin of class 1 carrying a small infrared core marker
_CORE = 2  # marker half-size in pixels


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    kind = rng.integers(0, 2)
    extent = int(rng.integers(max(6, size // 5), max(8, size // 2)))
    r0 = int(rng.integers(0, size - extent))
    c0 = int(rng.integers(0, size - extent))
    mask = np.zeros((size, size), dtype=bool)
    if kind == 0:
        h = extent
        w = int(rng.integers(max(6, size // 5), max(8, size // 2)))
        w = min(w, size - c0)
        mask[r0 : r0 + h, c0 : c0 + w] = True
    else:
        ry = extent / 2.0
        rx = int(rng.integers(max(6, size // 5), max(8, size // 2))) / 2.0
        cy, cx = r0 + ry, c0 + rx
        yy, xx = np.mgrid[0:size, 0:size]
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def _render_sample(rng: np.random.Generator, cfg: SynthConfig):
    size = cfg.image_size
    labels = np.zeros((size, size), dtype=np.int64)
    ir_extra = np.zeros((size, size))

    vis_bg = 0.35 + 0.1 * np.linspace(0, 1, size)[None, :] * np.ones((size, 1))
    vis_base = np.repeat(vis_bg[:, :, None], 3, axis=2)
    vis = vis_base.copy()
    ir = np.full((size, size), 0.25)

    twin_color = np.array([0.35, 0.45, 0.55]) + np.array([cfg.vis_contrast, 0.1, -0.1])
    extra_classes = [c for c in range(2, cfg.num_classes) if c != 3] or [2]

    # at most one shape from the ambiguous pair {1, 3} per image, so the
    # infrared core is a global, unambiguous cue for the whole shape
    ambiguous_class = int(rng.choice([1, 3]))
    class_plan = [ambiguous_class] + [
        int(extra_classes[int(rng.integers(0, len(extra_classes)))])
        for _ in range(cfg.shapes_per_image - 1)
    ]
    order = rng.permutation(len(class_plan))

    for pos in order:
        cls = class_plan[pos]
        mask = _shape_mask(rng, size)
        if not mask.any():
            continue
        labels[mask] = cls
        ir_extra[mask] = 0.0
        if cls in (1, 3):
            vis[mask] = np.clip(twin_color, 0, 1)
            ir[mask] = 0.25
            if cls == 3:
                rows, cols = np.nonzero(mask)
                cy, cx = int(rows.mean()), int(cols.mean())
                r0, r1 = max(cy - _CORE, 0), min(cy + _CORE, size)
                c0, c1 = max(cx - _CORE, 0), min(cx + _CORE, size)
                core = np.zeros_like(mask)
                core[r0:r1, c0:c1] = True
                core &= mask
                ir_extra[core] = 0.95 - 0.25
        else:
            # infrared-strong classes occlude whatever was below but show
            # only the visible background appearance (zero vis contrast)
            step = (cls - 2) % 3
            vis[mask] = vis_base[mask]
            ir[mask] = 0.25 + cfg.ir_contrast + 0.05 * step
    ir = ir + ir_extra

    vis = np.clip(vis + rng.normal(0, cfg.noise, vis.shape), 0, 1)
    ir = np.clip(ir + rng.normal(0, cfg.noise, ir.shape), 0, 1)
    return vis, ir, labels


def gen_synthetic(cfg: SynthConfig, root: str) -> dict[str, int]:
    """Write a full synthetic dataset tree; byte-identical for equal configs."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    counts = {"train": cfg.train_count, "val": cfg.val_count, "test": cfg.test_count}
    for split in SPLITS:
        for idx in range(counts[split]):
            vis, ir, labels = _render_sample(rng, cfg)
            sample_id = f"{idx:04d}"
            _save_png(
                os.path.join(root, split, "vis", sample_id + ".png"),
                np.round(vis * 255.0),
                "RGB",
            )
            _save_png(
                os.path.join(root, split, "ir", sample_id + ".png"),
                np.round(ir * 255.0),
                "L",
            )
            _save_png(os.path.join(root, split, "labels", sample_id + ".png"), labels, "P")
    return counts


# -- mask and image export --------------------------------------------------------------


def export_mask(classes: np.ndarray, path: str) -> None:
    """Write a class grid as an indexed 8-bit PNG with the fixed palette."""
    if classes.min() < 0 or classes.max() > 255:
        raise DataError(f"class ids outside the 8-bit palette: {classes.min()}..{classes.max()}")
    _save_png(path, classes, "P")


def load_mask(path: str) -> np.ndarray:
    img = Image.open(path)
    img.load()
    if img.mode not in ("P", "L"):
        raise DataError(f"mask {path} is not an indexed PNG (mode {img.mode})")
    return np.asarray(img, dtype=np.int64)


def export_fusion_map(map_hwc: np.ndarray, path: str) -> None:
    """Write a fusion map (values in [0, 1]) as RGB8 or Gray8."""
    arr = np.clip(map_hwc, 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 3:
        _save_png(path, np.round(arr * 255.0), "RGB")
    elif arr.ndim == 3 and arr.shape[2] == 1:
        _save_png(path, np.round(arr[:, :, 0] * 255.0), "L")
    else:
        raise DataError(f"unsupported fusion map shape {arr.shape}")


def load_fusion_map(path: str) -> np.ndarray:
    img = Image.open(path)
    img.load()
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr
