"""Training objectives: BCE, Dice, the hybrid mask loss, binarization, the
symmetric consistency loss, the pretraining objective, and the fine-tuning
total. All functions are pure and dtype-preserving; tensors with three or
more dims treat dim 0 as the batch (Dice averages per-sample)."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossConfig:
    theta: float = 0.5        # binarization threshold
    lam: float = 0.1          # distillation weight in the fine-tuning total
    eps_clamp: float = 1e-7   # probability clamp before logs
    eps_dice: float = 1.0     # Laplace smoothing for the empty-mask case

    def validate(self) -> None:
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0,1), got {self.theta}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.eps_clamp <= 0.0:
            raise ValueError(f"eps_clamp must be > 0, got {self.eps_clamp}")
        if self.eps_dice < 0.0:
            raise ValueError(f"eps_dice must be >= 0, got {self.eps_dice}")


def _check_shapes(g: torch.Tensor, p: torch.Tensor) -> None:
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch: target {tuple(g.shape)} vs prediction {tuple(p.shape)}")


def bce_loss(g: torch.Tensor, p: torch.Tensor, eps_clamp: float = 1e-7) -> torch.Tensor:
    """Mean over pixels of -[g log p + (1-g) log(1-p)], with p clamped for log safety."""
    _check_shapes(g, p)
    p = p.clamp(eps_clamp, 1.0 - eps_clamp)
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def dice_loss(g: torch.Tensor, p: torch.Tensor, eps_dice: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), per sample, batch-averaged."""
    _check_shapes(g, p)
    if g.dim() >= 3:
        dims = tuple(range(1, g.dim()))
        inter = (p * g).sum(dim=dims)
        denom = p.sum(dim=dims) + g.sum(dim=dims)
    else:
        inter = (p * g).sum()
        denom = p.sum() + g.sum()
    return (1.0 - (2.0 * inter + eps_dice) / (denom + eps_dice)).mean()


def mask_loss(g: torch.Tensor, p: torch.Tensor, eps_clamp: float = 1e-7,
              eps_dice: float = 1.0) -> torch.Tensor:
    """Hybrid segmentation loss: BCE plus Dice."""
    return bce_loss(g, p, eps_clamp) + dice_loss(g, p, eps_dice)


def binarize(p: torch.Tensor, theta: float) -> torch.Tensor:
    """Hard mask: 1 where p >= theta (inclusive), else 0. Gradient-stopped."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0,1), got {theta}")
    return (p.detach() >= theta).to(p.dtype)


def consistency_loss(pa: torch.Tensor, pb: torch.Tensor, theta: float = 0.5,
                     eps_clamp: float = 1e-7) -> torch.Tensor:
    """Symmetric agreement loss: each branch is supervised by the other's
    binarized (gradient-stopped) prediction."""
    _check_shapes(pa, pb)
    return 0.5 * (bce_loss(binarize(pb, theta), pa, eps_clamp)
                  + bce_loss(binarize(pa, theta), pb, eps_clamp))


def pretrain_loss(g: torch.Tensor, pa: torch.Tensor, pb: torch.Tensor, theta: float = 0.5,
                  eps_clamp: float = 1e-7, eps_dice: float = 1.0,
                  consistency: bool = True) -> torch.Tensor:
    """Phase-I objective: hybrid loss on both branches plus their consistency term.

    `consistency=False` drops the agreement term (ablation control)."""
    total = (mask_loss(g, pa, eps_clamp, eps_dice)
             + mask_loss(g, pb, eps_clamp, eps_dice))
    if consistency:
        total = total + consistency_loss(pa, pb, theta, eps_clamp)
    return total


def total_loss(l_pred: torch.Tensor, l_distill: torch.Tensor, lam: float) -> torch.Tensor:
    """Fine-tuning objective: prediction loss plus lambda-weighted distillation loss."""
    if lam < 0.0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return l_pred + lam * l_distill
