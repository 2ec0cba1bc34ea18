"""Fine-tuning model: encoder, per-level distillation projections, optional
cross-modal alignment, and one of the two decoders.

Flags mirror the ablation ladder: `use_cma` gates text alignment, `use_sed`
gates the distillation loss term (the projector is always built so seeded
initialization is identical between a disabled run and a lambda=0 run), and
`use_sad` picks the scale-adaptive decoder over the plain fusion head.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .decoder import ScaleAdaptiveDecoder
from .distill import FeatureProjector, distill_loss, teacher_features
from .encoder import ArchConfig, ConsistencyEncoder, PretrainHead
from .losses import mask_loss
from .text_align import CrossModalAlignment


class TextGuidedSegmenter(nn.Module):
    def __init__(self, arch: ArchConfig, use_cma: bool = True, use_sed: bool = True,
                 use_sad: bool = True):
        super().__init__()
        self.arch = arch
        self.use_cma = use_cma
        self.use_sed = use_sed
        self.use_sad = use_sad
        self.encoder = ConsistencyEncoder(arch)
        self.projector = FeatureProjector(arch.widths, arch.teacher_dim)
        if use_cma:
            self.align = nn.ModuleList(
                CrossModalAlignment(w, arch.text_dim) for w in arch.widths)
        else:
            self.align = None
        if use_sad:
            self.decoder = ScaleAdaptiveDecoder(arch.widths, arch.branch_width)
        else:
            self.decoder = PretrainHead(arch.widths, arch.head_width)

    def flags(self) -> dict:
        return {"use_cma": self.use_cma, "use_sed": self.use_sed, "use_sad": self.use_sad}

    def forward(self, images, text=None, key_mask=None):
        """Probability mask for a batch. `text` is (L, C_t) or (B, L, C_t);
        `key_mask` is (B, L) bool marking valid tokens of padded batches."""
        pyramid = self.encoder(images)
        if self.align is not None:
            if text is None:
                raise ValueError("text embedding required when alignment is enabled")
            pyramid = [m(f, text, key_mask) for m, f in zip(self.align, pyramid)]
        return self.decoder(pyramid)

    def training_losses(self, images, masks, teacher=None, text=None, key_mask=None,
                        eps_clamp: float = 1e-7, eps_dice: float = 1.0):
        """(prediction loss, distillation loss or None, predicted mask)."""
        pyramid = self.encoder(images)
        l_distill = None
        if self.use_sed:
            if teacher is None:
                raise ValueError("teacher required when distillation is enabled")
            grids = teacher_features(images, teacher)
            l_distill = distill_loss(self.projector(pyramid), grids)
        aligned = pyramid
        if self.align is not None:
            if text is None:
                raise ValueError("text embedding required when alignment is enabled")
            aligned = [m(f, text, key_mask) for m, f in zip(self.align, pyramid)]
        pred = self.decoder(aligned)
        l_pred = mask_loss(masks, pred, eps_clamp, eps_dice)
        return l_pred, l_distill, pred
