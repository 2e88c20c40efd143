"""
Modality encoders and the unified token sequence.

Every modality becomes tokens of width D:
  - prompt: one learned embedding per task id
  - state: the 7-d proprio vector through a small MLP
  - tpv / wrist / tactile: linear patch embedding + learned 2-D position + modality embedding

The concatenated sequence [prompt, state, tpv, wrist, tactile] runs through a
shared pre-norm transformer; the output after `mid_layer` blocks is H_mid and
the final normalised output is H_align.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops.layers.torch import Rearrange

from diffcore import LayerNorm, NoiseSource, ShapeError, TransformerBlock
from run_config import TASKS

IMAGE_TAGS = ("tpv", "wrist", "tactile")
# position scale brings gripper coordinates (cm range) to O(1)
PROPRIO_SCALE = (20.0, 20.0, 20.0, 1.0, 1.0, 1.0, 1.0)


class ContractViolation(ValueError):
    """Raised when a pooling request selects no tactile tokens."""


@dataclass
class EncoderConfig:
    token_dim: int = 128
    depth: int = 4
    heads: int = 8
    mid_layer: int = 2
    patch_px: int = 8
    dropout: float = 0.1
    image_size: int = 64
    tactile_size: int = 32
    proprio_dim: int = 7
    n_prompts: int = 2
    use_tactile: bool = True

    def __post_init__(self):
        if not 1 <= self.mid_layer < self.depth:
            raise ValueError(f"mid_layer must satisfy 1 <= mid_layer < depth, got {self.mid_layer}/{self.depth}")
        for size in (self.image_size, self.tactile_size):
            if size % self.patch_px != 0:
                raise ShapeError(f"image size {size} is not divisible by patch size {self.patch_px}")

    @classmethod
    def from_run_config(cls, cfg: dict) -> "EncoderConfig":
        return cls(
            token_dim=cfg["token_dim"], depth=cfg["encoder_depth"], heads=cfg["encoder_heads"],
            mid_layer=cfg["mid_layer"], patch_px=cfg["patch_px"], dropout=cfg["dropout"],
            n_prompts=len(TASKS), use_tactile=not cfg["disable_tactile"],
        )


@dataclass
class TokenSequence:
    """
    tokens: [B, L, D]
    tags: modality tag per token (length L)
    positions: [L, 2] (row, col) grid position; (-1, -1) for non-image tokens
    """

    tokens: torch.Tensor
    tags: List[str]
    positions: torch.Tensor

    def __len__(self) -> int:
        return len(self.tags)

    def index_of(self, tag: str) -> torch.Tensor:
        return torch.tensor([i for i, t in enumerate(self.tags) if t == tag], dtype=torch.long)

    def select(self, tag: str) -> torch.Tensor:
        """Tokens carrying `tag`, [B, n, D]."""
        return self.tokens[:, self.index_of(tag)]

    def grid(self, tag: str) -> Tuple[int, int]:
        pos = self.positions[self.index_of(tag)]
        if len(pos) == 0:
            return 0, 0
        return int(pos[:, 0].max()) + 1, int(pos[:, 1].max()) + 1

    def with_tokens(self, tokens: torch.Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.tags, self.positions)

    def append(self, tokens: torch.Tensor, tag: str) -> "TokenSequence":
        extra = tokens.shape[1]
        positions = torch.cat([self.positions, torch.full((extra, 2), -1, dtype=torch.long)])
        return TokenSequence(torch.cat([self.tokens, tokens], dim=1), self.tags + [tag] * extra, positions)


@dataclass
class ObsBatch:
    """Observation tensors; images are [B, H, W, 3] float32."""

    tpv: torch.Tensor
    wrist: torch.Tensor
    tactile: torch.Tensor
    proprio: torch.Tensor
    prompt: torch.Tensor

    @classmethod
    def from_batch(cls, batch) -> "ObsBatch":
        return cls(batch.tpv, batch.wrist, batch.tactile, batch.proprio, batch.prompt)

    @classmethod
    def from_observations(cls, observations: Sequence) -> "ObsBatch":
        def stack(name):
            return torch.as_tensor(np.stack([np.asarray(getattr(o, name)) for o in observations]), dtype=torch.float32)
        prompt = torch.tensor([o.prompt_id for o in observations], dtype=torch.long)
        return cls(stack("tpv"), stack("wrist"), stack("tactile"), stack("proprio"), prompt)

    def __len__(self) -> int:
        return int(self.proprio.shape[0])


class PatchTokenizer(nn.Module):
    """Linear patch embedding with learned 2-D positional and modality embeddings."""

    def __init__(self, image_size: int, patch_px: int, dim: int, channels: int = 3):
        super().__init__()
        if image_size % patch_px != 0:
            raise ShapeError(f"image size {image_size} is not divisible by patch size {patch_px}")
        self.patch_px = patch_px
        self.grid = (image_size // patch_px, image_size // patch_px)
        self.to_patches = Rearrange("b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=patch_px, p2=patch_px)
        self.proj = nn.Linear(patch_px * patch_px * channels, dim)
        self.pos_embedding = nn.Parameter(torch.zeros(self.grid[0] * self.grid[1], dim))
        self.modality_embedding = nn.Parameter(torch.zeros(dim))
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        nn.init.trunc_normal_(self.modality_embedding, std=0.02)

    def positions(self) -> torch.Tensor:
        rows, cols = self.grid
        r, c = torch.meshgrid(torch.arange(rows), torch.arange(cols), indexing="ij")
        return torch.stack([r.reshape(-1), c.reshape(-1)], dim=1)

    def embed_patches(self, image: torch.Tensor) -> torch.Tensor:
        """Patch embedding before positional/modality terms: [B, P, D]."""
        if image.dim() != 4 or image.shape[1] % self.patch_px or image.shape[2] % self.patch_px:
            raise ShapeError(f"image {tuple(image.shape)} is not divisible into {self.patch_px}px patches")
        if (image.shape[1] // self.patch_px, image.shape[2] // self.patch_px) != self.grid:
            raise ShapeError(f"image {tuple(image.shape)} does not match the {self.grid} patch grid")
        return self.proj(self.to_patches(image))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.embed_patches(image) + self.pos_embedding + self.modality_embedding


class MultimodalEncoder(nn.Module):
    """
    Shared-transformer encoder over every modality.

    Args:
        config: encoder hyper-parameters
        noise: dropout stream source shared with the rest of the policy
    """

    def __init__(self, config: EncoderConfig, noise: Optional[NoiseSource] = None):
        super().__init__()
        self.config = config
        dim = config.token_dim
        self.noise = noise if noise is not None else NoiseSource(0)
        self.tokenizers = nn.ModuleDict({
            "tpv": PatchTokenizer(config.image_size, config.patch_px, dim),
            "wrist": PatchTokenizer(config.image_size, config.patch_px, dim),
            "tactile": PatchTokenizer(config.tactile_size, config.patch_px, dim),
        })
        self.state_mlp = nn.Sequential(nn.Linear(config.proprio_dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.prompt_embedding = nn.Embedding(config.n_prompts, dim)
        self.register_buffer("proprio_scale", torch.tensor(PROPRIO_SCALE[:config.proprio_dim]))
        self.blocks = nn.ModuleList([
            TransformerBlock(dim, config.heads, dropout=config.dropout, noise=self.noise)
            for _ in range(config.depth)
        ])
        self.final_norm = LayerNorm(dim)

    def tokenize_image(self, image: torch.Tensor, view_tag: str) -> TokenSequence:
        if view_tag not in IMAGE_TAGS:
            raise ValueError(f"unknown image view {view_tag!r}")
        tokenizer = self.tokenizers[view_tag]
        tokens = tokenizer(image)
        return TokenSequence(tokens, [view_tag] * tokens.shape[1], tokenizer.positions())

    def assemble(self, obs: ObsBatch) -> TokenSequence:
        """Input token sequence [prompt, state, tpv, wrist, (tactile)]."""
        prompt = self.prompt_embedding(obs.prompt)[:, None, :]
        state = self.state_mlp(obs.proprio * self.proprio_scale)[:, None, :]
        none = torch.full((1, 2), -1, dtype=torch.long)
        parts = [TokenSequence(prompt, ["prompt"], none), TokenSequence(state, ["state"], none)]
        views = ("tpv", "wrist", "tactile") if self.config.use_tactile else ("tpv", "wrist")
        parts.extend(self.tokenize_image(getattr(obs, view), view) for view in views)
        return TokenSequence(
            torch.cat([p.tokens for p in parts], dim=1),
            [tag for p in parts for tag in p.tags],
            torch.cat([p.positions for p in parts]),
        )

    def forward(self, obs: ObsBatch) -> Tuple[TokenSequence, TokenSequence]:
        """
        Encode a batch of observations.

        Returns:
            (H_mid, H_align) token sequences sharing tags and positions
        """
        seq = self.assemble(obs)
        x = seq.tokens
        h_mid = None
        for depth, block in enumerate(self.blocks, start=1):
            x = block(x)
            if depth == self.config.mid_layer:
                h_mid = x
        return seq.with_tokens(h_mid), seq.with_tokens(self.final_norm(x))


def pool_region(seq: TokenSequence, tag: str, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Mean-pool the tokens of `tag` selected by `mask`, then L2-normalise.

    Args:
        seq: token sequence
        tag: modality tag to pool
        mask: [B, rows, cols] or [rows, cols] boolean selection; None selects every token

    Returns:
        (vectors [B, D], present [B]); absent samples carry a zero vector

    Raises:
        ContractViolation: a sample selects no tactile tokens
    """
    tokens = seq.select(tag)
    batch, count, _ = tokens.shape
    if count == 0:
        raise ContractViolation(f"sequence has no {tag!r} tokens")
    if mask is None:
        weights = torch.ones(batch, count, dtype=tokens.dtype)
    else:
        rows, cols = seq.grid(tag)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.dim() == 2:
            mask = mask.expand(batch, -1, -1)
        if tuple(mask.shape[1:]) != (rows, cols):
            raise ShapeError(f"mask grid {tuple(mask.shape[1:])} does not match {tag} grid {(rows, cols)}")
        positions = seq.positions[seq.index_of(tag)]
        weights = mask[:, positions[:, 0], positions[:, 1]].to(tokens.dtype)
    counts = weights.sum(dim=1)
    present = counts > 0
    if tag == "tactile" and not bool(present.all()):
        raise ContractViolation("empty tactile selection")
    mean = (weights[..., None] * tokens).sum(dim=1) / counts.clamp(min=1.0)[:, None]
    vectors = F.normalize(mean, dim=-1) * present[:, None].to(tokens.dtype)
    return vectors, present


def modality_grad_norms(encoder: MultimodalEncoder) -> Dict[str, float]:
    """Gradient norm reaching each modality's input embedding (after backward)."""
    def norm(params):
        grads = [p.grad for p in params if p.grad is not None]
        return float(torch.sqrt(sum((g ** 2).sum() for g in grads))) if grads else 0.0
    out = {view: norm(encoder.tokenizers[view].proj.parameters()) for view in IMAGE_TAGS}
    out["state"] = norm(encoder.state_mlp.parameters())
    out["prompt"] = norm(encoder.prompt_embedding.parameters())
    return out


if __name__ == "__main__":
    encoder = MultimodalEncoder(EncoderConfig())
    obs = ObsBatch(torch.rand(2, 64, 64, 3), torch.rand(2, 64, 64, 3), torch.rand(2, 32, 32, 3),
                   torch.zeros(2, 7), torch.tensor([0, 1]))
    h_mid, h_align = encoder.eval()(obs)
    print(f"✅ H_mid {tuple(h_mid.tokens.shape)}, H_align {tuple(h_align.tokens.shape)}, tags {len(h_align.tags)}")
