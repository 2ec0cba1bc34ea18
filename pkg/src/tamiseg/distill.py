"""Semantic feature distillation against a frozen teacher.

The teacher interface is one method (image batch -> four unit-normalized
token grids at strides 4/8/16/32) plus a stable identity string, so a real
pretrained vision transformer can be dropped in. The bundled stand-in
("hash teacher") projects each non-overlapping patch through a fixed seeded
random linear map and L2-normalizes, which keeps the frozen / deterministic /
local-per-patch contract without external weights.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import he_init_

STRIDES = (4, 8, 16, 32)
COSINE_EPS = 1e-8


class TeacherModel(nn.Module):
    """Frozen feature teacher. Subclasses implement forward(images) ->
    list of four (B, D_t, H/s, W/s) unit-norm token grids."""

    name: str = "teacher"

    def identity(self) -> str:
        raise NotImplementedError


class HashPatchTeacher(TeacherModel):
    """Seeded random patch projections, one per stride, L2-normalized.

    Weights are registered as buffers: no trainable parameters, frozen by
    construction, and the identity string pins the seed.
    """

    name = "hash"

    def __init__(self, seed: int = 0, token_dim: int = 32):
        super().__init__()
        self.seed = int(seed)
        self.token_dim = int(token_dim)
        gen = torch.Generator().manual_seed(self.seed)
        for stride in STRIDES:
            w = torch.empty(self.token_dim, 3, stride, stride)
            w.normal_(0.0, 1.0 / (stride * (3 ** 0.5)), generator=gen)
            self.register_buffer(f"proj_s{stride}", w)

    def identity(self) -> str:
        return f"hash:{self.seed}:{self.token_dim}"

    @torch.no_grad()
    def forward(self, images):
        if images.shape[-1] % 32 != 0 or images.shape[-2] % 32 != 0:
            raise ValueError(
                f"input spatial size must be divisible by 32, got {tuple(images.shape[-2:])}")
        grids = []
        for stride in STRIDES:
            w = getattr(self, f"proj_s{stride}")
            tok = F.conv2d(images, w, stride=stride)
            norm = tok.norm(dim=1, keepdim=True).clamp_min(1e-12)
            grids.append(tok / norm)
        return grids


def teacher_features(images, teacher: TeacherModel):
    """Unit-normalized token grids for a batch, detached from any graph."""
    return [g.detach() for g in teacher(images)]


class FeatureProjector(nn.Module):
    """Per-level two-layer MLP (1x1 convs with a ReLU between) mapping encoder
    channels to the teacher token width. Exists only for the distillation
    loss; it is not part of the segmentation forward path."""

    def __init__(self, widths, token_dim: int):
        super().__init__()
        self.levels = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(w, token_dim, 1),
                nn.ReLU(inplace=True),
                nn.Conv2d(token_dim, token_dim, 1),
            )
            for w in widths
        )
        he_init_(self)

    def forward(self, pyramid):
        return [proj(f) for proj, f in zip(self.levels, pyramid)]


def project(feature, projector: FeatureProjector, level: int):
    if feature.shape[1] != projector.levels[level][0].in_channels:
        raise ValueError(
            f"level {level} expects {projector.levels[level][0].in_channels} channels, "
            f"got {feature.shape[1]}")
    return projector.levels[level](feature)


def distill_loss(projected, teacher_grids) -> torch.Tensor:
    """Negative mean cosine similarity between projected student tokens and
    teacher tokens, averaged over all spatial tokens of all levels.

    Value lies in [-1, 1]; zero-norm projections contribute ~0."""
    if len(projected) != len(teacher_grids):
        raise ValueError(f"level count mismatch: {len(projected)} vs {len(teacher_grids)}")
    total = None
    n_tokens = 0
    for p, t in zip(projected, teacher_grids):
        if p.shape != t.shape:
            raise ValueError(f"grid mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
        p_norm = p.norm(dim=1, keepdim=True) + COSINE_EPS
        t_norm = t.norm(dim=1, keepdim=True) + COSINE_EPS
        cos = (p * t).sum(dim=1, keepdim=True) / (p_norm * t_norm)
        level_sum = cos.sum()
        total = level_sum if total is None else total + level_sum
        n_tokens += cos.numel()
    return -total / n_tokens
