"""Consistency-aware multi-scale backbone and the Phase-I prediction head.

The backbone is a width-configurable residual CNN with a stride-4 stem and
three halving stages, emitting four feature maps at strides 4/8/16/32 with
strictly increasing channel counts. The head turns a pyramid into a
full-resolution probability mask and is used only during pretraining.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_EPS = 1e-7  # probability maps are clamped into [PROB_EPS, 1 - PROB_EPS]


@dataclass(frozen=True)
class ArchConfig:
    """Backbone and head widths. `tiny` is the desk-scale test default."""

    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks: tuple[int, int, int, int] = (1, 1, 1, 1)
    head_width: int = 16
    teacher_dim: int = 32   # D_t: teacher token / projection output width
    text_dim: int = 32      # C_t: text embedding width
    branch_width: int = 32  # w_b: decoder branch internal width

    def validate(self) -> None:
        if len(self.widths) != 4 or any(w <= 0 for w in self.widths):
            raise ValueError(f"need 4 positive widths, got {self.widths}")
        if any(a >= b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"channel widths must be strictly increasing: {self.widths}")
        if any(b < 1 for b in self.blocks):
            raise ValueError(f"each stage needs >= 1 block: {self.blocks}")

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "blocks": list(self.blocks),
            "head_width": self.head_width,
            "teacher_dim": self.teacher_dim,
            "text_dim": self.text_dim,
            "branch_width": self.branch_width,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        return ArchConfig(
            widths=tuple(d["widths"]),
            blocks=tuple(d["blocks"]),
            head_width=int(d["head_width"]),
            teacher_dim=int(d["teacher_dim"]),
            text_dim=int(d["text_dim"]),
            branch_width=int(d["branch_width"]),
        )


TINY = ArchConfig()
FULL = ArchConfig(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), head_width=64,
                  teacher_dim=128, text_dim=128, branch_width=128)

ARCH_PRESETS = {"tiny": TINY, "full": FULL}


def he_init_(module: nn.Module) -> None:
    """He fan-in normal for conv/linear weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv1d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                math.prod(m.weight.shape[2:]) if m.weight.dim() > 2 else 1)
            nn.init.normal_(m.weight, mean=0.0, std=math.sqrt(2.0 / max(fan_in, 1)))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = _norm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ConsistencyEncoder(nn.Module):
    """Backbone producing four feature maps at strides 4/8/16/32."""

    def __init__(self, arch: ArchConfig = TINY):
        super().__init__()
        arch.validate()
        self.arch = arch
        w1, w2, w3, w4 = arch.widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w1, 7, stride=2, padding=3, bias=False),
            _norm(w1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage1 = self._make_stage(w1, w1, arch.blocks[0], stride=1)
        self.stage2 = self._make_stage(w1, w2, arch.blocks[1], stride=2)
        self.stage3 = self._make_stage(w2, w3, arch.blocks[2], stride=2)
        self.stage4 = self._make_stage(w3, w4, arch.blocks[3], stride=2)
        he_init_(self)

    @staticmethod
    def _make_stage(in_ch, out_ch, n_blocks, stride):
        layers = [ResidualBlock(in_ch, out_ch, stride=stride)]
        layers += [ResidualBlock(out_ch, out_ch) for _ in range(n_blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] % 32 != 0 or x.shape[-2] % 32 != 0:
            raise ValueError(
                f"input spatial size must be divisible by 32, got {tuple(x.shape[-2:])}")
        s = self.stem(x)
        f1 = self.stage1(s)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        return [f1, f2, f3, f4]


class PretrainHead(nn.Module):
    """Lightweight pyramid-to-mask head: per-level 1x1 reduction, upsample
    everything to stride 4, sum, two 3x3 convs, 1x1 conv to logits, bilinear
    upsample to the input resolution, sigmoid. Doubles as the plain fusion
    decoder used by the ablation baseline.

    The final upsample acts on logits, not probabilities: interpolated
    probabilities cannot express sub-cell boundaries (the soft mass ramps cap
    the reachable Dice), while steep logit crossings can."""

    def __init__(self, widths, head_width=16):
        super().__init__()
        self.reduce = nn.ModuleList(nn.Conv2d(w, head_width, 1) for w in widths)
        self.conv1 = nn.Conv2d(head_width, head_width, 3, padding=1)
        self.conv2 = nn.Conv2d(head_width, head_width, 3, padding=1)
        self.out = nn.Conv2d(head_width, 1, 1)
        he_init_(self)

    def forward(self, pyramid):
        base = self.reduce[0](pyramid[0])
        size = base.shape[-2:]
        merged = base
        for level, conv in zip(pyramid[1:], list(self.reduce)[1:]):
            merged = merged + F.interpolate(conv(level), size=size, mode="bilinear",
                                            align_corners=False)
        h = F.relu(self.conv1(merged))
        h = F.relu(self.conv2(h))
        logits = F.interpolate(self.out(h), scale_factor=4, mode="bilinear",
                               align_corners=False)
        prob = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return prob.squeeze(1)
