"""
Latent forecasting MLP: dreams the tactile embedding N steps ahead
from the adapted current embedding and the draft action chunk.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from diffcore import ShapeError
from worldmodel import LatentEmbedding, normalized_mse

PROVENANCES = ("null", "predicted", "oracle")


@dataclass
class DreamEmbedding:
    """
    patches: [B, P, D_w]; pooled: [B, D_w]; vision: optional [B, D] wrist
    embedding predicted alongside the tactile latent.
    """

    patches: torch.Tensor
    pooled: torch.Tensor
    provenance: str = "predicted"
    vision: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")

    @property
    def is_null(self) -> bool:
        return self.provenance == "null"

    def norm(self) -> float:
        return float(self.patches.detach().norm())

    def to_latent(self) -> LatentEmbedding:
        return LatentEmbedding(self.patches, self.pooled)


def null_dream(num_patches: int, dim: int, batch: int = 1, vision_dim: Optional[int] = None) -> DreamEmbedding:
    """H_null: the all-zero stand-in fed to the draft pass."""
    vision = torch.zeros(batch, vision_dim) if vision_dim else None
    return DreamEmbedding(torch.zeros(batch, num_patches, dim), torch.zeros(batch, dim), "null", vision)


def oracle_dream(target: LatentEmbedding) -> DreamEmbedding:
    """Wrap the true future embedding as a dream (evaluation reference only)."""
    return DreamEmbedding(target.patches, target.pooled, "oracle")


class Forecaster(nn.Module):
    """
    3-layer MLP over [flattened adapted patches, pooled vector, flattened chunk].

    Args:
        num_patches: P
        dim: D_w
        chunk_h: action chunk length H
        hidden: hidden width
        action_dim: per-step action size
        vision_dim: width of the optional wrist-embedding head (0 disables it)
    """

    def __init__(self, num_patches: int, dim: int, chunk_h: int, hidden: int = 256, action_dim: int = 7,
                 vision_dim: int = 0):
        super().__init__()
        self.num_patches = num_patches
        self.dim = dim
        self.chunk_h = chunk_h
        self.action_dim = action_dim
        in_features = num_patches * dim + dim + chunk_h * action_dim
        self.trunk = nn.Sequential(nn.Linear(in_features, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU())
        self.head = nn.Linear(hidden, num_patches * dim)
        self.vision_head = nn.Linear(hidden, vision_dim) if vision_dim else None

    def forward(self, patches: torch.Tensor, chunk: torch.Tensor, pooled: Optional[torch.Tensor] = None) -> DreamEmbedding:
        batch = patches.shape[0]
        if tuple(patches.shape[1:]) != (self.num_patches, self.dim):
            raise ShapeError(f"expected patches [B, {self.num_patches}, {self.dim}], got {tuple(patches.shape)}")
        if tuple(chunk.shape) != (batch, self.chunk_h, self.action_dim):
            raise ShapeError(f"expected chunk [{batch}, {self.chunk_h}, {self.action_dim}], got {tuple(chunk.shape)}")
        if pooled is None:
            pooled = patches.mean(dim=1)
        features = self.trunk(torch.cat([patches.reshape(batch, -1), pooled, chunk.reshape(batch, -1)], dim=1))
        future = self.head(features).reshape(batch, self.num_patches, self.dim)
        vision = self.vision_head(features) if self.vision_head is not None else None
        return DreamEmbedding(future, future.mean(dim=1), "predicted", vision)


def dream(z: LatentEmbedding, a_draft: torch.Tensor, forecaster: Forecaster) -> DreamEmbedding:
    """Forecast the future tactile latent from the adapted embedding and the draft chunk."""
    return forecaster(z.patches, a_draft, z.pooled)


def forecasting_loss(pred, target) -> torch.Tensor:
    """
    L_W: mean squared error between per-patch L2-normalised embeddings,
    with no gradient into the target.

    Args:
        pred: DreamEmbedding or [B, P, D] tensor
        target: LatentEmbedding or [B, P, D] tensor
    """
    pred = pred.patches if hasattr(pred, "patches") else pred
    target = target.patches if hasattr(target, "patches") else target
    return normalized_mse(pred, target)


def vision_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return normalized_mse(pred, target)


@torch.no_grad()
def dream_cosine(pred: DreamEmbedding, target: LatentEmbedding) -> Optional[torch.Tensor]:
    """Per-sample cosine between flattened patch grids; None for the null dream."""
    if pred.is_null:
        return None
    batch = pred.patches.shape[0]
    return F.cosine_similarity(pred.patches.reshape(batch, -1), target.patches.reshape(batch, -1), dim=1)


if __name__ == "__main__":
    f = Forecaster(16, 128, 8)
    z = LatentEmbedding.from_patches(torch.randn(2, 16, 128))
    h = dream(z, torch.zeros(2, 8, 7), f)
    print(f"✅ dream {tuple(h.patches.shape)}; L_W vs itself = {float(forecasting_loss(h, h.to_latent())):.1f}")
