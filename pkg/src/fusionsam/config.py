"""Run configuration: documented defaults, a line-based key=value file,
and flag overrides, in that precedence order (flags win)."""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import SynthConfig
from .errors import ConfigError
from .training import TrainConfig, VARIANTS

# key -> (default, type, help)
DEFAULTS: dict[str, tuple] = {
    # optimization
    "lr": (1e-4, float, "learning rate"),
    "weight_decay": (1e-3, float, "decoupled weight decay"),
    "batch_size": (4, int, "samples per step"),
    "epochs": (100, int, "passes over the training split"),
    "max_steps": (0, int, "hard step cap, 0 = no cap"),
    "seed": (0, int, "run seed (init, batch order, synthetic data)"),
    "lambda_seg": (1.0, float, "segmentation loss weight"),
    "alpha_perc": (0.1, float, "perceptual loss weight"),
    "beta_adv": (0.05, float, "adversarial loss weight (generator side)"),
    "gamma_commit": (1.0, float, "commitment loss weight"),
    "beta_commit": (0.25, float, "encoder-side factor inside the commitment loss"),
    "val_every": (1, int, "epochs between validations, 0 disables"),
    # architecture
    "variant": ("full", str, "pipeline variant: full | no_lstg | no_fmp_concat"),
    "num_classes": (4, int, "semantic classes incl. background"),
    "dc": (64, int, "latent channel width"),
    "codebook_size": (256, int, "codebook entries"),
    "d_tok": (64, int, "token width of the segmentation head"),
    "scale": (4, int, "latent downsampling factor"),
    "patch": (4, int, "image-encoder patch size"),
    "num_points": (10, int, "point prompts per image"),
    "shared_codebook": (True, bool, "one codebook for both modalities"),
    "use_ffn": (False, bool, "add a feed-forward block after fusion attention"),
    "aux_prompt_free": (True, bool, "also train the prompt-free decoding pass"),
    "hflip": (False, bool, "random horizontal flip during training"),
    # evaluation / inference
    "include_background": (False, bool, "include class 0 in mIoU"),
    "prompt_mode": ("self", str, "inference prompting: self | free"),
    "split": ("test", str, "dataset split for eval/fuse/infer"),
    # synthetic data
    "image_size": (32, int, "synthetic image size"),
    "shapes_per_image": (3, int, "shapes drawn per synthetic image"),
    "train_count": (8, int, "synthetic training images"),
    "val_count": (4, int, "synthetic validation images"),
    "test_count": (4, int, "synthetic test images"),
    "vis_contrast": (0.45, float, "visible-channel class contrast"),
    "ir_contrast": (0.6, float, "infrared-channel class contrast"),
    "noise": (0.02, float, "per-pixel noise sigma"),
    # paths
    "data_root": ("data", str, "dataset root directory"),
    "out": ("out", str, "output directory"),
    "checkpoint": ("", str, "checkpoint path for eval/fuse/infer/resume"),
}

_TRAIN_KEYS = {
    "lr", "weight_decay", "batch_size", "epochs", "max_steps", "seed",
    "alpha_perc", "beta_adv", "gamma_commit", "beta_commit", "lambda_seg",
    "variant", "num_classes", "dc", "codebook_size", "d_tok", "scale",
    "patch", "num_points", "include_background", "shared_codebook",
    "use_ffn", "aux_prompt_free", "hflip", "val_every",
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        values = object.__getattribute__(self, "values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS}).validate()

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            image_size=self.values["image_size"],
            num_classes=self.values["num_classes"],
            shapes_per_image=self.values["shapes_per_image"],
            train_count=self.values["train_count"],
            val_count=self.values["val_count"],
            test_count=self.values["test_count"],
            vis_contrast=self.values["vis_contrast"],
            ir_contrast=self.values["ir_contrast"],
            noise=self.values["noise"],
            seed=self.values["seed"],
        ).validate()

    def validate(self) -> "RunConfig":
        if self.values["variant"] not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {VARIANTS}, got {self.values['variant']!r}"
            )
        if self.values["prompt_mode"] not in ("self", "free"):
            raise ConfigError(f"prompt_mode must be self or free, got {self.values['prompt_mode']!r}")
        return self


def _coerce(key: str, raw: str):
    _, typ, _ = DEFAULTS[key]
    if typ is bool:
        if raw in ("True", "true", "1", "yes"):
            return True
        if raw in ("False", "false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value.strip())
    return out


def load_run_config(config_path: str | None, overrides: dict) -> RunConfig:
    """defaults < config file < overrides."""
    values = {k: v[0] for k, v in DEFAULTS.items()}
    if config_path:
        values.update(parse_config_file(config_path))
    for key, value in overrides.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(values).validate()
