"""Command-line entry point.

Subcommands: synth, train, eval, fuse, infer, gradcheck. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
FUSIONSAM_THREADS caps numerical-library threads (default 1, which also
gives bit-reproducible runs); it must be applied before numpy loads, so
all heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_cap() -> None:
    threads = os.environ.get("FUSIONSAM_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusionsam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--data-root", dest="data_root", help="dataset root directory")
        p.add_argument("--checkpoint", help="checkpoint path")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--variant", choices=["full", "no_lstg", "no_fmp_concat"])
        p.add_argument(
            "--include-background",
            dest="include_background",
            action="store_const",
            const=True,
            default=None,
            help="include class 0 in mIoU",
        )
        p.add_argument("--csv", action="store_true", help="machine-parsable output")
        p.add_argument(
            "--opt",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any documented config key (repeatable)",
        )

    for name, help_text in [
        ("synth", "generate a synthetic dataset"),
        ("train", "train a model and write checkpoints + metrics"),
        ("eval", "print the per-class IoU table and mIoU for a checkpoint"),
        ("fuse", "export fusion masks as PNG"),
        ("infer", "export segmentation masks as indexed PNG"),
        ("gradcheck", "run the finite-difference gradient suite"),
    ]:
        common(sub.add_parser(name, help=help_text))
    return parser


def _overrides_from_args(args) -> dict:
    overrides = {}
    for pair in args.opt:
        key, sep, value = pair.partition("=")
        if not sep:
            raise _UsageError(f"--opt expects KEY=VALUE, got {pair!r}")
        overrides[key.strip()] = value.strip()
    for key in ("data_root", "checkpoint", "out", "seed", "variant", "include_background"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return overrides


def _load_cfg(args):
    from .config import load_run_config

    return load_run_config(args.config, _overrides_from_args(args))


def _cmd_synth(args) -> int:
    from .data import gen_synthetic

    cfg = _load_cfg(args)
    counts = gen_synthetic(cfg.synth_config(), cfg.data_root)
    print(f"wrote synthetic dataset to {cfg.data_root}: {counts}")
    return 0


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .training import Trainer

    cfg = _load_cfg(args)
    train_cfg = cfg.train_config()
    train_set = load_dataset(cfg.data_root, "train")
    val_set = None
    if train_cfg.val_every:
        try:
            val_set = load_dataset(cfg.data_root, "val")
        except Exception:
            val_set = None
    os.makedirs(cfg.out, exist_ok=True)
    trainer = Trainer(train_cfg, train_set, val_set)
    from .training import TrainingDiverged

    try:
        result = trainer.train(metrics_path=os.path.join(cfg.out, "metrics.csv"))
    except TrainingDiverged as exc:
        path = os.path.join(cfg.out, "last_good.fsam")
        exc.last_good.save(path)
        print(f"aborted on non-finite loss; last good checkpoint: {path}", file=sys.stderr)
        raise
    last_path = os.path.join(cfg.out, "checkpoint.fsam")
    best_path = os.path.join(cfg.out, "best.fsam")
    result.checkpoint.save(last_path)
    result.best_checkpoint.save(best_path)
    final = result.metrics[-1] if result.metrics else {}
    print(
        f"variant={train_cfg.variant} steps={result.steps_run} "
        f"total={final.get('total', float('nan')):.4f} "
        f"val_miou={final.get('val_miou', float('nan')):.4f}"
    )
    print(f"wrote {last_path} and {best_path}")
    return 0


def _restore(cfg):
    from .checkpoint import Checkpoint
    from .data import load_dataset
    from .errors import ConfigError
    from .training import trainer_from_checkpoint

    if not cfg.checkpoint:
        raise ConfigError("this subcommand needs --checkpoint")
    ckpt = Checkpoint.load(cfg.checkpoint)
    dataset = load_dataset(cfg.data_root, cfg.split)
    trainer = trainer_from_checkpoint(ckpt, dataset)
    return trainer.model, dataset


def _cmd_eval(args) -> int:
    import numpy as np

    cfg = _load_cfg(args)
    model, dataset = _restore(cfg)
    from .training import evaluate

    per_class, miou = evaluate(
        lambda s: model.infer(s, cfg.prompt_mode).classes,
        dataset,
        model.cfg.num_classes,
        cfg.include_background,
    )
    names = ["unlabeled"] + [f"class_{i}" for i in range(1, model.cfg.num_classes)]
    cells = ["-" if np.isnan(v) else f"{100.0 * v:.1f}" for v in per_class]
    if args.csv:
        print(",".join(names + ["miou"]))
        print(",".join(cells + [f"{100.0 * miou:.1f}"]))
    else:
        width = max(len(n) for n in names + ["miou(%)"]) + 2
        print("".join(n.ljust(width) for n in names + ["miou(%)"]))
        print("".join(c.ljust(width) for c in cells + [f"{100.0 * miou:.1f}"]))
    return 0


def _cmd_fuse(args) -> int:
    cfg = _load_cfg(args)
    model, dataset = _restore(cfg)
    from .data import export_fusion_map

    os.makedirs(cfg.out, exist_ok=True)
    for sample in dataset:
        mask = model.fuse(sample)
        export_fusion_map(mask.map.data, os.path.join(cfg.out, f"{sample.id}_fused.png"))
    print(f"wrote {len(dataset)} fusion masks to {cfg.out}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    model, dataset = _restore(cfg)
    from .data import export_mask

    os.makedirs(cfg.out, exist_ok=True)
    for sample in dataset:
        mask = model.infer(sample, cfg.prompt_mode)
        export_mask(mask.classes, os.path.join(cfg.out, f"{sample.id}_mask.png"))
    print(f"wrote {len(dataset)} segmentation masks to {cfg.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .errors import NumericError
    from .gradsuite import run_all

    failures = 0
    for result in run_all():
        status = "PASS" if result.passed else "FAIL"
        print(
            f"{status} {result.name}: max_rel_err={result.report.max_rel_err:.3e} "
            f"(tol {result.tol:.0e})"
        )
        failures += not result.passed
    if failures:
        raise NumericError(f"{failures} gradient checks failed")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "fuse": _cmd_fuse,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
}


def run(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    from .errors import ConfigError, ContractError, DataError, DimensionError, NumericError

    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, DimensionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
