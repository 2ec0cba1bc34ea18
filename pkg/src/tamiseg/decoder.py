"""Scale-adaptive decoder: three parallel branches over adjacent feature
pairs, each refining an upsample-concat through a residual conv chain and
channel/spatial attention gates, fused at stride 4 into the prediction head.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import PROB_EPS, he_init_


def _up2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class EfficientChannelAttention(nn.Module):
    """Channel gate: global average pool, 1-D conv across channels, sigmoid."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, kernel_size, padding=(kernel_size - 1) // 2, bias=False)
        he_init_(self)

    def forward(self, x):
        desc = x.mean(dim=(2, 3))                      # B, C
        gate = torch.sigmoid(self.conv(desc.unsqueeze(1)).squeeze(1))
        return x * gate[:, :, None, None]


class PyramidSpatialAttention(nn.Module):
    """Spatial gate from multi-rate context: three parallel dilated 3x3 convs
    over the channel-mean map, summed, squeezed to one channel, sigmoid."""

    def __init__(self, dilations=(1, 2, 4)):
        super().__init__()
        self.context = nn.ModuleList(
            nn.Conv2d(1, 1, 3, padding=d, dilation=d) for d in dilations)
        self.squeeze = nn.Conv2d(1, 1, 1)
        he_init_(self)

    def forward(self, x):
        pooled = x.mean(dim=1, keepdim=True)
        ctx = self.context[0](pooled)
        for conv in list(self.context)[1:]:
            ctx = ctx + conv(pooled)
        gate = torch.sigmoid(self.squeeze(ctx))
        return x * gate


class DecoderBranch(nn.Module):
    """One branch: bilinear-upsample the deeper map, concat with the shallower,
    then a 1x1 / 3x3 / 3x3 / 1x1 chain with accumulating residual sums,
    followed by channel and spatial attention."""

    def __init__(self, in_shallow: int, in_deep: int, width: int, eca_kernel: int = 3):
        super().__init__()
        self.width = width
        self.c1 = nn.Conv2d(in_shallow + in_deep, width, 1)
        self.c2 = nn.Conv2d(width, width, 3, padding=1)
        self.c3 = nn.Conv2d(width, width, 3, padding=1)
        self.c4 = nn.Conv2d(width, width, 1)
        self.eca = EfficientChannelAttention(eca_kernel)
        self.psa = PyramidSpatialAttention()
        he_init_(self)

    def forward(self, shallow, deep):
        if (deep.shape[-2] * 2, deep.shape[-1] * 2) != tuple(shallow.shape[-2:]):
            raise ValueError(
                f"deep map {tuple(deep.shape[-2:])} must be exactly half of "
                f"shallow map {tuple(shallow.shape[-2:])}")
        merged = torch.cat([_up2(deep), shallow], dim=1)
        f1 = self.c1(merged)
        f2 = F.relu(self.c2(f1) + f1)
        f3 = F.relu(self.c3(f2) + f2 + f1)
        f4 = F.relu(self.c4(f3) + f3 + f2 + f1)
        return self.psa(self.eca(f4))


class FusionHead(nn.Module):
    """Concat the three branch outputs at stride 4, run a 3x3 then 1x1 conv to
    logits, bilinear-upsample the logits to full resolution, sigmoid.

    Upsampling happens in logit space: probability ramps from interpolating
    sigmoid outputs cap the reachable boundary sharpness, logit crossings do
    not."""

    def __init__(self, width: int):
        super().__init__()
        self.c5 = nn.Conv2d(3 * width, width, 3, padding=1)
        self.c6 = nn.Conv2d(width, 1, 1)
        he_init_(self)

    def forward(self, att_s, att_m, att_l):
        if (att_m.shape[-2] * 2, att_m.shape[-1] * 2) != tuple(att_s.shape[-2:]) or \
           (att_l.shape[-2] * 4, att_l.shape[-1] * 4) != tuple(att_s.shape[-2:]):
            raise ValueError("branch outputs must sit at strides 4/8/16")
        merged = torch.cat([
            att_s,
            _up2(att_m),
            F.interpolate(att_l, scale_factor=4, mode="bilinear", align_corners=False),
        ], dim=1)
        logits = F.interpolate(self.c6(self.c5(merged)), scale_factor=4,
                               mode="bilinear", align_corners=False)
        prob = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return prob.squeeze(1)


class ScaleAdaptiveDecoder(nn.Module):
    """Three branches over pairs (level1, level2), (level2, level3),
    (level3, level4), fused into one probability mask."""

    def __init__(self, widths, branch_width: int = 32, eca_kernel: int = 3):
        super().__init__()
        self.branch_s = DecoderBranch(widths[0], widths[1], branch_width, eca_kernel)
        self.branch_m = DecoderBranch(widths[1], widths[2], branch_width, eca_kernel)
        self.branch_l = DecoderBranch(widths[2], widths[3], branch_width, eca_kernel)
        self.head = FusionHead(branch_width)

    def forward(self, pyramid):
        att_s = self.branch_s(pyramid[0], pyramid[1])
        att_m = self.branch_m(pyramid[1], pyramid[2])
        att_l = self.branch_l(pyramid[2], pyramid[3])
        return self.head(att_s, att_m, att_l)
