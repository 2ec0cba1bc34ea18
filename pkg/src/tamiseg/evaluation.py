"""Segmentation metrics, tricolor overlay rendering, checkpoint evaluation,
and the sequential-module ablation harness."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


def _counts(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    inter = np.logical_and(p, g).sum()
    return p, g, int(inter), int(p.sum()), int(g.sum())


def dice_metric(pred: np.ndarray, gt: np.ndarray, eps: float = 1.0) -> float:
    """100 * (2|P∩G| + eps) / (|P| + |G| + eps). eps=1 makes double-empty 100."""
    _, _, inter, np_, ng = _counts(pred, gt)
    return 100.0 * (2.0 * inter + eps) / (np_ + ng + eps)


def miou_metric(pred: np.ndarray, gt: np.ndarray, eps: float = 1.0) -> float:
    """Mean of foreground and background IoU, each eps-smoothed, as a percentage."""
    p, g, inter, np_, ng = _counts(pred, gt)
    union_fg = np_ + ng - inter
    inter_bg = np.logical_and(~p, ~g).sum()
    union_bg = p.size - inter
    iou_fg = (inter + eps) / (union_fg + eps)
    iou_bg = (inter_bg + eps) / (union_bg + eps)
    return 100.0 * 0.5 * (iou_fg + iou_bg)


OVERLAY_COLORS = {
    "overlap": (255, 255, 0),   # prediction AND ground truth
    "over": (255, 0, 0),        # prediction only (over-segmentation)
    "under": (0, 255, 0),       # ground truth only (under-segmentation)
}
OVERLAY_ALPHA = 0.5


def render_overlay(pred: np.ndarray, gt: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Tints the base image: yellow on agreement, red on over-segmentation,
    green on under-segmentation; everything else untouched."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape or p.shape != base.shape[:2]:
        raise ValueError(
            f"shape mismatch: pred {p.shape}, gt {g.shape}, base {base.shape[:2]}")
    out = np.asarray(base, dtype=np.float64).copy()
    for region, color in (
        (p & g, OVERLAY_COLORS["overlap"]),
        (p & ~g, OVERLAY_COLORS["over"]),
        (~p & g, OVERLAY_COLORS["under"]),
    ):
        tint = np.asarray(color, dtype=np.float64) / 255.0
        out[region] = (1.0 - OVERLAY_ALPHA) * out[region] + OVERLAY_ALPHA * tint
    return out.astype(base.dtype, copy=False)


@dataclass
class MetricsReport:
    variant: str
    seed: int
    sample_ids: list[str]
    dice: list[float]
    miou: list[float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_miou(self) -> float:
        return float(np.mean(self.miou))

    @property
    def count(self) -> int:
        return len(self.sample_ids)


def predict_masks(model, samples, text_enc, theta: float = 0.5, batch_size: int = 8):
    """Binarized predictions for a sample list; returns {sample_id: mask uint8}."""
    from .losses import binarize
    from .training import _pad_text, _to_image_tensor

    model.eval()
    out = {}
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            xb = _to_image_tensor([s.image for s in chunk])
            text, key_mask = (None, None)
            if getattr(model, "align", None) is not None:
                if text_enc is None:
                    raise ValueError("model uses text alignment but no text encoder was given")
                text, key_mask = _pad_text([text_enc.embed(s.prompt).matrix for s in chunk])
            prob = model(xb, text, key_mask)
            hard = binarize(prob, theta)
            for s, h in zip(chunk, hard):
                out[s.sample_id] = h.numpy().astype(np.uint8)
    return out


def evaluate_model(model, samples, text_enc, theta: float = 0.5,
                   variant: str = "model", seed: int = 0,
                   batch_size: int = 8) -> MetricsReport:
    preds = predict_masks(model, samples, text_enc, theta, batch_size)
    ids, dices, mious = [], [], []
    for s in samples:
        ids.append(s.sample_id)
        dices.append(dice_metric(preds[s.sample_id], s.mask))
        mious.append(miou_metric(preds[s.sample_id], s.mask))
    return MetricsReport(variant=variant, seed=seed, sample_ids=ids, dice=dices, miou=mious)


def write_metrics_csv(reports, out_dir) -> tuple[Path, Path]:
    """Per-sample metrics plus a mean±std summary, one row per (variant, seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples_path = out / "metrics_samples.csv"
    with samples_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "sample_id", "dice", "miou"])
        for r in reports:
            for sid, d, m in zip(r.sample_ids, r.dice, r.miou):
                writer.writerow([r.variant, r.seed, sid, f"{d:.4f}", f"{m:.4f}"])
    summary_path = out / "metrics_summary.csv"
    by_variant: dict[str, list[MetricsReport]] = {}
    for r in reports:
        by_variant.setdefault(r.variant, []).append(r)
    with summary_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "n_seeds", "dice_mean", "dice_std", "miou_mean", "miou_std"])
        for variant, rs in by_variant.items():
            dm = [r.mean_dice for r in rs]
            mm = [r.mean_miou for r in rs]
            writer.writerow([variant, len(rs), f"{np.mean(dm):.4f}", f"{np.std(dm):.4f}",
                             f"{np.mean(mm):.4f}", f"{np.std(mm):.4f}"])
    return samples_path, summary_path


# ablation ladder: modules are switched on cumulatively
ABLATION_VARIANTS = (
    ("baseline", {"use_cma": False, "use_sed": False, "use_sad": False}),
    ("+cma", {"use_cma": True, "use_sed": False, "use_sad": False}),
    ("+cma+sed", {"use_cma": True, "use_sed": True, "use_sad": False}),
    ("full", {"use_cma": True, "use_sed": True, "use_sad": True}),
)


def run_ablation(base_cfg, train_samples, test_samples, seeds, out_dir=None,
                 pretrain_cfg=None):
    """Trains and evaluates the cumulative module ladder per seed.

    For each seed the encoder is pretrained once (Phase I) and shared across
    all four variants' fine-tuning runs. Returns one MetricsReport per
    (variant, seed); when out_dir is given, also writes the per-row table,
    per-sample metrics, and a summary CSV."""
    from .training import TrainConfig, finetune, pretrain

    reports = []
    for seed in seeds:
        if pretrain_cfg is not None:
            pre_cfg = dataclasses.replace(pretrain_cfg, seed=seed, out_dir=None)
            init = pretrain(pre_cfg, train_samples).checkpoint
        else:
            init = None
        for variant, flags in ABLATION_VARIANTS:
            cfg = dataclasses.replace(base_cfg, phase="finetune", seed=seed,
                                      out_dir=None, **flags)
            result = finetune(cfg, train_samples, init)
            from .training import load_segmenter
            model, _, text_enc = load_segmenter(result.checkpoint)
            report = evaluate_model(model, test_samples, text_enc, theta=cfg.theta,
                                    variant=variant, seed=seed,
                                    batch_size=cfg.batch_size)
            reports.append(report)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "ablation_table.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "cma", "sed", "sad", "seed", "dice", "miou"])
            flags_of = dict(ABLATION_VARIANTS)
            for r in reports:
                f = flags_of[r.variant]
                writer.writerow([r.variant, int(f["use_cma"]), int(f["use_sed"]),
                                 int(f["use_sad"]), r.seed,
                                 f"{r.mean_dice:.4f}", f"{r.mean_miou:.4f}"])
        write_metrics_csv(reports, out)
    return reports
