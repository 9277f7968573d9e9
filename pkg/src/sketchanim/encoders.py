"""Semantic condition encoders and modality-specific projections.

Small trainable stand-ins for frozen pretrained image/text encoders: the
downstream control module only needs fixed-width token features per
modality, which these provide. Real encoders can be swapped in behind the
same call surface.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MODALITY_BACKGROUND = "background"
MODALITY_INSTANCE = "instance"
MODALITY_TEXT = "text"
MODALITIES = (MODALITY_BACKGROUND, MODALITY_INSTANCE, MODALITY_TEXT)


@dataclass
class SemanticFeature:
    """K x d token features for one condition, tagged with its modality."""

    tokens: torch.Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be (K, d) with K >= 1, got {tuple(self.tokens.shape)}")


@dataclass
class ProjectedFeature:
    """Tokens aligned to the backbone hidden width."""

    tokens: torch.Tensor
    modality: str


class _AttnBlock(nn.Module):
    """Pre-norm attention + MLP block; optionally cross-attends to context."""

    def __init__(self, dim, heads=4):
        super().__init__()
        self.heads = heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))

    def forward(self, x, context=None):
        ctx = x if context is None else context
        q = self.to_q(self.norm_q(x))
        kv_in = self.norm_kv(ctx)
        k, v = self.to_k(kv_in), self.to_v(kv_in)
        lq, dim = q.shape
        lk = k.shape[0]
        hd = dim // self.heads
        q = q.view(lq, self.heads, hd).transpose(0, 1)
        k = k.view(lk, self.heads, hd).transpose(0, 1)
        v = v.view(lk, self.heads, hd).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / hd**0.5, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(lq, dim)
        x = x + self.to_out(out)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class ImageConditionEncoder(nn.Module):
    """Patchify -> linear -> 2 attention blocks -> K learned query tokens."""

    def __init__(self, feature_dim=64, num_tokens=16, grid=8, heads=4):
        super().__init__()
        self.feature_dim = feature_dim
        self.num_tokens = num_tokens
        self.grid = grid
        self.patch_proj = nn.Linear(3, feature_dim)
        self.patch_pos = nn.Parameter(torch.zeros(grid * grid, feature_dim))
        self.queries = nn.Parameter(torch.zeros(num_tokens, feature_dim))
        nn.init.normal_(self.patch_pos, std=0.02)
        nn.init.normal_(self.queries, std=0.02)
        self.blocks = nn.ModuleList([_AttnBlock(feature_dim, heads) for _ in range(2)])
        self.out_proj = nn.Linear(feature_dim, feature_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValueError(f"image must be (H, W, 3), got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValueError("image contains non-finite pixels")
        # block-mean pooling onto a fixed grid keeps the token count constant
        # for any input resolution
        x = image.permute(2, 0, 1).unsqueeze(0)
        x = F.adaptive_avg_pool2d(x, (self.grid, self.grid))
        patches = x.squeeze(0).permute(1, 2, 0).reshape(self.grid * self.grid, 3)
        patches = self.patch_proj(patches) + self.patch_pos
        tokens = self.queries
        for block in self.blocks:
            tokens = block(tokens, context=patches)
        return self.out_proj(tokens)


def hash_token(word: str, buckets: int = 4096) -> int:
    """Stable vocabulary bucket for a word (crc32; process-independent).

    The salt keeps the generated-caption vocabulary collision-free at 4096
    buckets (unsalted crc32 collides on two of its words).
    """
    return zlib.crc32(b"tok/" + word.encode("utf-8")) % buckets


class HashTextEncoder(nn.Module):
    """Whitespace tokens -> hash-bucketed embeddings -> 2 attention blocks.

    The empty caption maps to a single dedicated pad token.
    """

    def __init__(self, feature_dim=64, buckets=4096, max_tokens=64, heads=4):
        super().__init__()
        self.feature_dim = feature_dim
        self.buckets = buckets
        self.max_tokens = max_tokens
        self.embedding = nn.Embedding(buckets, feature_dim)
        self.pad_embedding = nn.Parameter(torch.zeros(feature_dim))
        self.pos = nn.Parameter(torch.zeros(max_tokens, feature_dim))
        nn.init.normal_(self.pos, std=0.02)
        nn.init.normal_(self.pad_embedding, std=0.02)
        self.blocks = nn.ModuleList([_AttnBlock(feature_dim, heads) for _ in range(2)])

    def token_ids(self, caption: str) -> list[int]:
        words = caption.split()
        return [hash_token(w, self.buckets) for w in words[: self.max_tokens]]

    def forward(self, caption: str) -> torch.Tensor:
        ids = self.token_ids(caption)
        if not ids:
            x = self.pad_embedding.unsqueeze(0) + self.pos[:1]
        else:
            idx = torch.tensor(ids, dtype=torch.long)
            x = self.embedding(idx) + self.pos[: len(ids)]
        for block in self.blocks:
            x = block(x)
        return x


class ModalityProjector(nn.Module):
    """2-layer MLP lifting encoder features to the backbone hidden width."""

    def __init__(self, in_dim, out_dim, hidden=None):
        super().__init__()
        hidden = hidden or max(in_dim, out_dim)
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, tokens):
        return self.net(tokens)


class ConditionEncoders(nn.Module):
    """Bundle of the image/text encoders and per-modality projections.

    One instance projector is shared by every reference instance.
    """

    def __init__(self, feature_dim=64, hidden_dim=128, image_tokens=16, text_buckets=4096):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.image_encoder = ImageConditionEncoder(feature_dim, num_tokens=image_tokens)
        self.text_encoder = HashTextEncoder(feature_dim, buckets=text_buckets)
        self.project_bg = ModalityProjector(feature_dim, hidden_dim)
        self.project_inst = ModalityProjector(feature_dim, hidden_dim)
        self.project_text = ModalityProjector(feature_dim, hidden_dim)

    def encode_image_condition(self, image, modality=MODALITY_INSTANCE) -> SemanticFeature:
        if modality not in (MODALITY_BACKGROUND, MODALITY_INSTANCE):
            raise ValueError(f"image modality must be background or instance, got {modality!r}")
        if isinstance(image, np.ndarray):
            image = torch.as_tensor(image, dtype=self.project_bg.net[0].weight.dtype)
        return SemanticFeature(tokens=self.image_encoder(image), modality=modality)

    def encode_text(self, caption: str) -> SemanticFeature:
        return SemanticFeature(tokens=self.text_encoder(caption), modality=MODALITY_TEXT)

    def project(self, feature: SemanticFeature) -> ProjectedFeature:
        if feature.modality == MODALITY_BACKGROUND:
            proj = self.project_bg
        elif feature.modality == MODALITY_INSTANCE:
            proj = self.project_inst
        elif feature.modality == MODALITY_TEXT:
            proj = self.project_text
        else:
            raise ValueError(f"unknown modality {feature.modality!r}")
        return ProjectedFeature(tokens=proj(feature.tokens), modality=feature.modality)
