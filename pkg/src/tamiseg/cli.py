"""Command-line entry point wiring the pipeline into reproducible workflows.

Every subcommand resolves its settings as: built-in defaults, then config
file (`--config`, flat `key = value` lines), then explicit flags. A
`run.json` provenance record (resolved config, seed, versions) is written
into the output directory of every run. Seeds fall back to the
TAMISEG_SEED environment variable.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import __version__
from .evaluation import evaluate_model, render_overlay, run_ablation, write_metrics_csv
from .synth_data import (DatasetError, PerturbConfig, SynthConfig, generate_dataset,
                         load_dataset, write_dataset)
from .training import (CheckpointError, TrainConfig, TrainingError, finetune,
                       load_checkpoint, load_segmenter, pretrain)


def _parse_config_file(path: str) -> dict:
    values = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key = value): {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; returns the resolved mapping."""
    file_values = _parse_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = dict(defaults)
    for key, default in defaults.items():
        if key in file_values:
            resolved[key] = _coerce(file_values[key], default)
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _default_seed() -> int:
    return int(os.environ.get("TAMISEG_SEED", "0"))


def _write_run_record(out_dir, command: str, resolved: dict) -> None:
    import torch
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "resolved_config": resolved,
        "versions": {
            "tamiseg": __version__,
            "python": sys.version.split()[0],
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default: TAMISEG_SEED env var, else 0)")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="enforce bit-reproducible mode")
    p.add_argument("--out", required=True, help="output directory")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--arch", choices=("tiny", "full"), default=None)
    p.add_argument("--lr", type=float, default=None, dest="learning_rate")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, dest="max_steps",
                   help="optional hard cap on optimizer steps")
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--eps-dice", type=float, default=None, dest="eps_dice")
    p.add_argument("--val-fraction", type=float, default=None, dest="val_fraction",
                   help="fraction of samples held out for the early-stop monitor")


def cmd_synth_data(args) -> int:
    defaults = {"n": 16, "size": 64, "seed": _default_seed()}
    resolved = _resolve(args, defaults)
    cfg = SynthConfig(height=resolved["size"], width=resolved["size"])
    samples = generate_dataset(resolved["n"], resolved["seed"], cfg)
    write_dataset(samples, args.out)
    resolved["synth_config"] = cfg.to_dict()
    _write_run_record(args.out, "synth-data", resolved)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _train_config(resolved: dict, phase: str) -> TrainConfig:
    keys = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = {k: v for k, v in resolved.items() if k in keys}
    return TrainConfig(phase=phase, perturb=PerturbConfig(), **kwargs)


_PRETRAIN_DEFAULTS = dict(arch="tiny", learning_rate=1e-4, batch_size=8, max_epochs=300,
                          patience=100, max_steps=None, theta=0.5, eps_dice=1.0,
                          consistency=True, val_fraction=0.1, deterministic=False)

_FINETUNE_DEFAULTS = dict(arch="tiny", learning_rate=1e-5, batch_size=4, max_epochs=100,
                          patience=100, max_steps=None, theta=0.5, lam=0.1, eps_dice=1.0,
                          teacher="hash:0", text_encoder="hash:0", freeze_encoder=False,
                          use_cma=True, use_sed=True, use_sad=True, val_fraction=0.1,
                          deterministic=False)


def cmd_pretrain(args) -> int:
    defaults = dict(_PRETRAIN_DEFAULTS, seed=_default_seed())
    resolved = _resolve(args, defaults)
    samples = load_dataset(args.data)
    cfg = _train_config(resolved, "pretrain")
    cfg.out_dir = args.out
    result = pretrain(cfg, samples)
    resolved["data"] = args.data
    _write_run_record(args.out, "pretrain", resolved)
    print(f"best val mask loss {result.best_metric:.4f} at epoch {result.best_epoch}; "
          f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_finetune(args) -> int:
    defaults = dict(_FINETUNE_DEFAULTS, seed=_default_seed())
    resolved = _resolve(args, defaults)
    samples = load_dataset(args.data)
    init = load_checkpoint(args.init) if args.init else None
    cfg = _train_config(resolved, "finetune")
    cfg.out_dir = args.out
    result = finetune(cfg, samples, init)
    resolved["data"] = args.data
    resolved["init"] = args.init
    _write_run_record(args.out, "finetune", resolved)
    print(f"best val dice {result.best_metric:.2f} at epoch {result.best_epoch}; "
          f"checkpoint: {result.checkpoint_path}")
    return 0


def _load_for_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, _, text_enc = load_segmenter(ckpt)
    samples = load_dataset(args.data)
    theta = ckpt.extra.get("config", {}).get("theta", 0.5)
    return model, text_enc, samples, theta


def cmd_eval(args) -> int:
    model, text_enc, samples, theta = _load_for_eval(args)
    report = evaluate_model(model, samples, text_enc, theta=theta, variant="eval",
                            seed=_default_seed())
    write_metrics_csv([report], args.out)
    _write_run_record(args.out, "eval",
                      {"checkpoint": args.checkpoint, "data": args.data, "theta": theta})
    print(f"mean dice {report.mean_dice:.2f}  mean miou {report.mean_miou:.2f} "
          f"over {report.count} samples")
    return 0


def cmd_predict(args) -> int:
    from .evaluation import predict_masks
    model, text_enc, samples, theta = _load_for_eval(args)
    preds = predict_masks(model, samples, text_enc, theta=theta)
    out = Path(args.out) / "masks"
    out.mkdir(parents=True, exist_ok=True)
    for sid, mask in preds.items():
        PILImage.fromarray(mask * 255, mode="L").save(out / f"{sid}.png")
    _write_run_record(args.out, "predict",
                      {"checkpoint": args.checkpoint, "data": args.data, "theta": theta})
    print(f"wrote {len(preds)} masks to {out}")
    return 0


def cmd_viz(args) -> int:
    from .evaluation import predict_masks
    model, text_enc, samples, theta = _load_for_eval(args)
    preds = predict_masks(model, samples, text_enc, theta=theta)
    out = Path(args.out) / "overlays"
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        overlay = render_overlay(preds[s.sample_id], s.mask, s.image)
        img8 = np.round(np.asarray(overlay, dtype=np.float64) * 255.0).astype(np.uint8)
        PILImage.fromarray(img8, mode="RGB").save(out / f"{s.sample_id}_overlay.png")
    _write_run_record(args.out, "viz",
                      {"checkpoint": args.checkpoint, "data": args.data, "theta": theta})
    print(f"wrote {len(samples)} overlays to {out}")
    return 0


def cmd_ablate(args) -> int:
    defaults = dict(_FINETUNE_DEFAULTS, seed=_default_seed(),
                    pre_lr=1e-4, pre_epochs=10, pre_steps=None)
    resolved = _resolve(args, defaults)
    train_samples = load_dataset(args.data)
    test_samples = load_dataset(args.test_data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    base_cfg = _train_config(resolved, "finetune")
    pre_cfg = dataclasses.replace(
        base_cfg, phase="pretrain", learning_rate=resolved["pre_lr"],
        max_epochs=resolved["pre_epochs"], max_steps=resolved["pre_steps"],
        patience=min(base_cfg.patience, resolved["pre_epochs"]), batch_size=8)
    reports = run_ablation(base_cfg, train_samples, test_samples, seeds,
                           out_dir=args.out, pretrain_cfg=pre_cfg)
    resolved["data"] = args.data
    resolved["test_data"] = args.test_data
    resolved["seeds"] = seeds
    _write_run_record(args.out, "ablate", resolved)
    for r in reports:
        print(f"{r.variant:10s} seed {r.seed}: dice {r.mean_dice:.2f}  miou {r.mean_miou:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tamiseg",
        description="Text-guided multi-scale segmentation pipeline on synthetic lesions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--size", type=int, default=None, help="square image size (multiple of 32)")
    _add_common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="Phase I: consistency pretraining")
    _add_train_flags(p)
    p.add_argument("--no-consistency", action="store_false", default=None, dest="consistency")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="Phase II: end-to-end fine-tuning")
    _add_train_flags(p)
    p.add_argument("--init", help="Phase-I checkpoint to initialize the encoder")
    p.add_argument("--lambda", type=float, default=None, dest="lam",
                   help="distillation loss weight")
    p.add_argument("--teacher", default=None, help="teacher spec, e.g. hash:0")
    p.add_argument("--text-encoder", default=None, dest="text_encoder",
                   help="text encoder spec, e.g. hash:0")
    p.add_argument("--freeze-encoder", action="store_true", default=None,
                   dest="freeze_encoder")
    p.add_argument("--no-cma", action="store_false", default=None, dest="use_cma")
    p.add_argument("--no-sed", action="store_false", default=None, dest="use_sed")
    p.add_argument("--no-sad", action="store_false", default=None, dest="use_sad")
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    for name, fn in (("eval", cmd_eval), ("predict", cmd_predict), ("viz", cmd_viz)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("ablate", help="train and score the module ladder")
    _add_train_flags(p)
    p.add_argument("--test-data", required=True, dest="test_data")
    p.add_argument("--seeds", default=None, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--lambda", type=float, default=None, dest="lam")
    p.add_argument("--teacher", default=None)
    p.add_argument("--text-encoder", default=None, dest="text_encoder")
    p.add_argument("--pre-lr", type=float, default=None, dest="pre_lr")
    p.add_argument("--pre-epochs", type=int, default=None, dest="pre_epochs")
    p.add_argument("--pre-steps", type=int, default=None, dest="pre_steps")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
