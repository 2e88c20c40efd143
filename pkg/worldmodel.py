"""
Frozen tactile world model.

A small JEPA-style encoder over tactile frames: a context encoder plus
predictor regresses an EMA target encoder's patch embeddings of the frame N
steps ahead. After pretraining the model is frozen and only used through
`wm_embed`; the policy adapts its patch embeddings with a residual
bottleneck adapter and attention pooling.
"""

import copy
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from tqdm import tqdm

from datastore import EpisodeDataset, clip_index, load_tactile_clips
from diffcore import (AdamW, CounterRng, Dropout, LayerNorm, MultiHeadAttention, NoiseSource, ShapeError,
                      TransformerBlock, count_parameters, load_checkpoint, load_into, module_digest,
                      save_checkpoint)
from encoders import PatchTokenizer

WM_DEPTH = {"small": 2, "large": 4}
TACTILE_SHAPE = (32, 32, 3)
HEATMAP_SCALE = 16


@dataclass
class WmConfig:
    size: str = "small"
    dim: int = 128
    heads: int = 8
    context: int = 4
    horizon: int = 5
    ema_decay: float = 0.996
    patch_px: int = 8
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 32

    def __post_init__(self):
        if self.size not in WM_DEPTH:
            raise ValueError(f"world model size must be one of {tuple(WM_DEPTH)}, got {self.size!r}")
        if self.horizon < 1:
            raise ValueError("prediction horizon must be >= 1")
        if self.context < 1:
            raise ValueError("context length must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("EMA decay must lie in (0, 1)")

    @property
    def depth(self) -> int:
        return WM_DEPTH[self.size]

    @property
    def grid(self) -> Tuple[int, int]:
        return TACTILE_SHAPE[0] // self.patch_px, TACTILE_SHAPE[1] // self.patch_px

    @classmethod
    def from_run_config(cls, cfg: dict) -> "WmConfig":
        return cls(cfg["wm_size"], cfg["wm_dim"], cfg["wm_heads"], cfg["wm_context"], cfg["horizon_n"],
                   cfg["ema_decay"], cfg["patch_px"], cfg["wm_epochs"], cfg["wm_lr"], cfg["wm_batch"])


@dataclass
class LatentEmbedding:
    """patches: [B, P, D_w]; pooled: [B, D_w] (mean over patches)."""

    patches: torch.Tensor
    pooled: torch.Tensor

    @classmethod
    def from_patches(cls, patches: torch.Tensor) -> "LatentEmbedding":
        return cls(patches, patches.mean(dim=1))


def normalized_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise mean of (normalize(pred) - normalize(target))^2 along the last dim; target gets no gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return ((F.normalize(pred, dim=-1) - F.normalize(target.detach(), dim=-1)) ** 2).mean()


class TactileEncoder(nn.Module):
    def __init__(self, config: WmConfig):
        super().__init__()
        self.tokenizer = PatchTokenizer(TACTILE_SHAPE[0], config.patch_px, config.dim)
        self.blocks = nn.ModuleList([TransformerBlock(config.dim, config.heads) for _ in range(config.depth)])
        self.norm = LayerNorm(config.dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.tokenizer(images)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class TactileWorldModel(nn.Module):
    """Context encoder + predictor trained against an EMA target encoder."""

    def __init__(self, config: WmConfig):
        super().__init__()
        self.config = config
        patches = config.grid[0] * config.grid[1]
        self.context_encoder = TactileEncoder(config)
        self.target_encoder = copy.deepcopy(self.context_encoder)
        for param in self.target_encoder.parameters():
            param.requires_grad_(False)
        self.frame_embedding = nn.Parameter(torch.zeros(config.context, 1, config.dim))
        nn.init.trunc_normal_(self.frame_embedding, std=0.02)
        self.predictor = TransformerBlock(config.dim, config.heads)
        self.predictor_head = nn.Sequential(nn.Linear(config.dim, config.dim), nn.GELU(),
                                            nn.Linear(config.dim, config.dim))
        self.num_patches = patches
        self.frozen = False

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.context_encoder(images)

    def predict(self, context: torch.Tensor) -> torch.Tensor:
        """
        Args:
            context: [B, k, 32, 32, 3] frames t-k+1..t

        Returns:
            predicted patch embeddings of frame t+N, [B, P, D_w]
        """
        batch, k = context.shape[:2]
        if k != self.config.context:
            raise ShapeError(f"expected {self.config.context} context frames, got {k}")
        tokens = self.encode(context.reshape(batch * k, *context.shape[2:]))
        tokens = tokens.reshape(batch, k, self.num_patches, -1) + self.frame_embedding
        tokens = self.predictor(tokens.reshape(batch, k * self.num_patches, -1))
        return self.predictor_head(tokens[:, -self.num_patches:])

    def jepa_loss(self, context: torch.Tensor, target_frames: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            target = self.target_encoder(target_frames)
        return normalized_mse(self.predict(context), target)

    @torch.no_grad()
    def ema_update(self, decay: Optional[float] = None) -> None:
        decay = self.config.ema_decay if decay is None else decay
        for target, online in zip(self.target_encoder.parameters(), self.context_encoder.parameters()):
            target.mul_(decay).add_(online, alpha=1.0 - decay)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("target_encoder.")]

    def freeze(self) -> "TactileWorldModel":
        for param in self.parameters():
            param.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True) -> "TactileWorldModel":
        # a frozen model never leaves eval mode
        return super().train(mode and not self.frozen)

    def digest(self) -> str:
        return module_digest(self)

    def encoder_parameter_count(self) -> int:
        return count_parameters(self.context_encoder)


def _as_tactile_batch(image) -> torch.Tensor:
    tensor = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image,
                             dtype=torch.float32)
    if tensor.dim() == 3:
        tensor = tensor[None]
    if tensor.dim() != 4 or tuple(tensor.shape[1:]) != TACTILE_SHAPE:
        raise ShapeError(f"tactile image must be {TACTILE_SHAPE}, got {tuple(tensor.shape)}")
    return tensor


@torch.no_grad()
def wm_embed(model: TactileWorldModel, image) -> LatentEmbedding:
    """Frozen-encoder embedding of one [32, 32, 3] image or a [B, 32, 32, 3] batch."""
    was_training = model.training
    model.eval()
    patches = model.encode(_as_tactile_batch(image))
    model.train(was_training)
    return LatentEmbedding.from_patches(patches)


def embedding_spread(patches: torch.Tensor) -> float:
    """Mean per-dimension std of pooled embeddings across a batch (collapse guard)."""
    pooled = F.normalize(patches.mean(dim=1), dim=-1)
    return float(pooled.std(dim=0).mean())


def _shuffled_targets(dataset: EpisodeDataset, indices, seed: int) -> torch.Tensor:
    frames = []
    for position, t in indices:
        tactile = dataset.episode(position).arrays["tactile"]
        order = CounterRng(seed, (position, 11)).permutation(tactile.shape[0])
        frames.append(np.asarray(tactile[order[t]]))
    return torch.as_tensor(np.stack(frames))


def wm_pretrain(
    dataset: EpisodeDataset,
    config: WmConfig,
    seed: int = 0,
    shuffled_targets: bool = False,
    verbose: bool = True,
) -> Tuple[TactileWorldModel, List[Dict[str, float]]]:
    """
    Self-supervised pretraining, then freeze.

    Args:
        dataset: recorded episodes (need length > k + N)
        config: world model settings
        seed: parameter-init and batch-order seed
        shuffled_targets: control run that regresses temporally shuffled frames
        verbose: progress output

    Returns:
        (frozen model, per-epoch history with loss and embedding spread)
    """
    index = clip_index(dataset, config.context, config.horizon)
    if not index:
        raise ValueError(
            f"no episode is longer than context + horizon ({config.context} + {config.horizon}) steps"
        )
    torch.manual_seed(seed)
    model = TactileWorldModel(config)
    optimizer = AdamW(model.trainable_parameters(), lr=config.lr, weight_decay=0.0)
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = CounterRng(seed, (epoch, 5)).permutation(len(index))
        losses, spreads = [], []
        batches = range(0, len(order), config.batch_size)
        for start in tqdm(batches, desc=f"world model epoch {epoch + 1}/{config.epochs}", disable=not verbose):
            chunk = [index[i] for i in order[start:start + config.batch_size]]
            context, target = load_tactile_clips(dataset, chunk, config.context, config.horizon)
            if shuffled_targets:
                target = _shuffled_targets(dataset, chunk, seed)
            loss = model.jepa_loss(context, target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.ema_update()
            losses.append(float(loss.detach()))
            with torch.no_grad():
                spreads.append(embedding_spread(model.encode(context[:, -1])))
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "spread": float(np.mean(spreads))}
        history.append(record)
        if verbose:
            print(f"📉 wm epoch {epoch + 1}: loss={record['loss']:.5f} spread={record['spread']:.4f}")
    return model.freeze(), history


class TactileAdapter(nn.Module):
    """
    Residual bottleneck adapter (D_w -> D_w/4 -> D_w/4 -> D_w) plus
    single-query attention pooling over the adapted patches.
    """

    def __init__(self, dim: int, heads: int = 8, dropout: float = 0.1, alpha_init: float = 0.1,
                 noise: Optional[NoiseSource] = None):
        super().__init__()
        hidden = dim // 4
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), Dropout(dropout, noise),
            nn.Linear(hidden, hidden), nn.GELU(), Dropout(dropout, noise),
            nn.Linear(hidden, dim),
        )
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))
        self.query = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.trunc_normal_(self.query, std=0.02)
        inner = max(heads, (3 * dim // 8) // heads * heads)
        self.pool = MultiHeadAttention(dim, heads, inner_dim=inner)

    def forward(self, z: LatentEmbedding) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (adapted patches [B, P, D_w], pooled [B, D_w])."""
        patches = z.patches + self.alpha * self.mlp(z.patches)
        query = self.query.expand(patches.shape[0], -1, -1)
        return patches, self.pool(query, patches)[:, 0]


def adapt_and_pool(z: LatentEmbedding, adapter: TactileAdapter, training: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    adapter.train(training)
    return adapter(z)


def heatmap_grid(patches, grid: Tuple[int, int] = (4, 4)) -> Tuple[np.ndarray, np.ndarray]:
    """Per-patch L2 norms on the patch grid, raw and min-max normalised."""
    if hasattr(patches, "patches"):
        patches = patches.patches
    values = torch.as_tensor(patches).detach().to(torch.float64)
    if values.dim() == 3:
        values = values[0]
    if values.shape[0] != grid[0] * grid[1]:
        raise ShapeError(f"{values.shape[0]} patches do not fill a {grid} grid")
    raw = values.norm(dim=-1).reshape(grid).numpy()
    span = raw.max() - raw.min()
    normalised = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    return raw, normalised


def heatmap_export(patches, path: Union[str, Path], grid: Tuple[int, int] = (4, 4)) -> Tuple[Path, Path]:
    """
    Write a patch-norm heatmap as a binary PPM (P6) plus a CSV of raw norms.

    Args:
        patches: [P, D], [1, P, D] or an embedding object with `.patches`
        path: output stem; `.ppm` and `.csv` are appended

    Returns:
        (pixmap path, csv path)
    """
    raw, normalised = heatmap_grid(patches, grid)
    stem = Path(path)
    ppm_path, csv_path = stem.with_suffix(".ppm"), stem.with_suffix(".csv")
    pixels = np.round(normalised * 255.0).astype(np.uint8)
    image = Image.fromarray(np.stack([pixels] * 3, axis=-1))
    image = image.resize((grid[1] * HEATMAP_SCALE, grid[0] * HEATMAP_SCALE), Image.Resampling.NEAREST)
    image.save(ppm_path, format="PPM")
    np.savetxt(csv_path, raw, delimiter=",", fmt="%.17g")
    return ppm_path, csv_path


def read_heatmap_csv(path: Union[str, Path]) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def save_world_model(model: TactileWorldModel, stem: Union[str, Path], extra: Optional[dict] = None) -> Path:
    meta = {"kind": "world_model", "frozen": bool(model.frozen), "config": asdict(model.config)}
    meta.update(extra or {})
    return save_checkpoint(stem, model, meta)


def load_world_model(stem: Union[str, Path]) -> TactileWorldModel:
    tensors, meta = load_checkpoint(stem)
    if meta.get("kind") != "world_model":
        raise ValueError(f"{stem} is not a world model checkpoint")
    model = TactileWorldModel(WmConfig(**meta["config"]))
    load_into(model, tensors)
    return model.freeze() if meta.get("frozen") else model


if __name__ == "__main__":
    wm = TactileWorldModel(WmConfig())
    adapter = TactileAdapter(wm.config.dim)
    ratio = count_parameters(adapter) / wm.encoder_parameter_count()
    z = wm_embed(wm, np.full(TACTILE_SHAPE, 0.5, dtype=np.float32))
    print(f"✅ z patches {tuple(z.patches.shape)}; adapter overhead {ratio:.1%}")
