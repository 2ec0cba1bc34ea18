"""Frozen prompt embedding and the cross-modal attention that injects text
semantics into each visual feature level.

The text encoder interface (prompt string -> token matrix) admits real
pretrained language models; the bundled stand-in maps each token to a fixed
random vector drawn from a frozen table keyed by a stable token hash.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class TextEmbedding:
    matrix: torch.Tensor  # L x C_t
    tokens: tuple[str, ...]


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric tokens; whitespace and punctuation are separators."""
    return _TOKEN_RE.findall(text.lower())


class TextModel:
    """Frozen prompt encoder: embed(prompt) -> TextEmbedding, plus a stable identity."""

    name: str = "text"

    def embed(self, prompt: str) -> TextEmbedding:
        raise NotImplementedError

    def identity(self) -> str:
        raise NotImplementedError


class HashTextEncoder(TextModel):
    """Per-token fixed random vectors from a seeded table keyed by token hash."""

    name = "hash"

    def __init__(self, seed: int = 0, dim: int = 32):
        self.seed = int(seed)
        self.dim = int(dim)
        self._table: dict[str, np.ndarray] = {}

    def identity(self) -> str:
        return f"hash:{self.seed}:{self.dim}"

    def _vector(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            key = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng((self.seed, key))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            self._table[token] = vec
        return vec

    def embed(self, prompt: str) -> TextEmbedding:
        tokens = tokenize(prompt)
        if not tokens:
            raise ValueError(f"prompt has no tokens: {prompt!r}")
        matrix = torch.from_numpy(np.stack([self._vector(t) for t in tokens]))
        return TextEmbedding(matrix=matrix, tokens=tuple(tokens))


def embed_prompt(prompt: str, embedder: TextModel) -> TextEmbedding:
    return embedder.embed(prompt)


class CrossModalAlignment(nn.Module):
    """Single-head attention from visual positions (queries) to text tokens
    (keys/values), added residually so the output keeps the input's shape.

    Query/key/value maps are bias-free matrices; the value map returns to the
    level's channel count. Scale is sqrt(d) with d = min(channels, text_dim).
    """

    def __init__(self, channels: int, text_dim: int):
        super().__init__()
        self.channels = channels
        self.text_dim = text_dim
        self.d = min(channels, text_dim)
        def mat(rows, cols):
            w = torch.empty(rows, cols)
            nn.init.normal_(w, std=math.sqrt(1.0 / rows))
            return nn.Parameter(w)
        self.w_q = mat(channels, self.d)
        self.w_k = mat(text_dim, self.d)
        self.w_v = mat(text_dim, channels)

    def attention(self, feature, text, key_mask=None):
        """Attention weights and pre-residual output.

        feature: (B, C, H, W); text: (L, C_t) or (B, L, C_t);
        key_mask: optional (B, L) bool, True for valid tokens."""
        if feature.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {feature.shape[1]}")
        if text.dim() == 2:
            text = text.unsqueeze(0).expand(feature.shape[0], -1, -1)
        if text.shape[-1] != self.text_dim:
            raise ValueError(f"expected text dim {self.text_dim}, got {text.shape[-1]}")
        b, c, h, w = feature.shape
        x = feature.flatten(2).transpose(1, 2)            # B, HW, C
        q = x @ self.w_q                                  # B, HW, d
        k = text @ self.w_k                               # B, L, d
        v = text @ self.w_v                               # B, L, C
        logits = q @ k.transpose(1, 2) / math.sqrt(self.d)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, :], float("-inf"))
        attn = torch.softmax(logits, dim=-1)              # B, HW, L
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return attn, out

    def forward(self, feature, text, key_mask=None):
        _, out = self.attention(feature, text, key_mask)
        return feature + out


def cross_modal_align(feature, text_embedding: TextEmbedding, module: CrossModalAlignment):
    """Aligns one feature level with a prompt embedding; shape-preserving."""
    return module(feature, text_embedding.matrix.to(feature.dtype))
