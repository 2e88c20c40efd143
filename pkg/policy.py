"""
Action expert and the two-pass Think-Dream-Act policy.

Pass 1 (think) drafts an action chunk from H_align with the null dream,
the world model plus forecaster dream the tactile latent that chunk leads
to, and pass 2 (act) re-runs the same expert with the dream tokens filled in.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from diffcore import (CheckpointError, LayerNorm, NoiseSource, ShapeError, TransformerBlock, load_checkpoint,
                      load_into, save_checkpoint)
from encoders import EncoderConfig, MultimodalEncoder, ObsBatch, TokenSequence
from forecaster import DreamEmbedding, Forecaster, dream, null_dream
from worldmodel import LatentEmbedding, TactileAdapter, TactileWorldModel, WmConfig, load_world_model, wm_embed

ACTION_DIM = 7
MIN_ACTION_STD = 1e-6
WM_PREFIX = "world_model."


@dataclass
class PolicyConfig:
    depth: int = 3
    heads: int = 8
    token_dim: int = 128
    chunk_h: int = 8
    dropout: float = 0.1
    forecaster_hidden: int = 256
    predict_vision: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"action expert depth must be >= 1, got {self.depth}")
        if self.chunk_h < 1:
            raise ValueError(f"chunk length must be >= 1, got {self.chunk_h}")

    @classmethod
    def from_run_config(cls, cfg: dict) -> "PolicyConfig":
        return cls(cfg["expert_depth"], cfg["expert_heads"], cfg["token_dim"], cfg["chunk_h"], cfg["dropout"],
                   cfg["forecaster_hidden"], cfg["dream_predicts_vision"])


class ActionNormalizer(nn.Module):
    """Per-dimension z-score of actions; statistics travel with the checkpoint."""

    def __init__(self, dim: int = ACTION_DIM):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    def fit(self, mean: np.ndarray, std: np.ndarray) -> "ActionNormalizer":
        std = np.where(np.asarray(std) < MIN_ACTION_STD, 1.0, std)
        self.mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.std.copy_(torch.as_tensor(std, dtype=torch.float32))
        return self

    def normalize(self, actions: torch.Tensor) -> torch.Tensor:
        return (actions - self.mean) / self.std

    def denormalize(self, actions: torch.Tensor) -> torch.Tensor:
        return actions * self.std + self.mean


def action_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    l1 chunk loss: per-step absolute errors summed over action dims,
    averaged over the H steps and then over the batch.

    Args:
        pred, target: [B, H, 7] or [H, 7]
    """
    if pred.shape != target.shape:
        raise ShapeError(f"action chunks differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().sum(dim=-1).mean()


class ActionExpert(nn.Module):
    """H learned action queries cross-attending over H_align plus dream tokens."""

    def __init__(self, config: PolicyConfig, wm_dim: int, num_patches: int, noise: Optional[NoiseSource] = None):
        super().__init__()
        dim = config.token_dim
        self.config = config
        self.num_patches = num_patches
        self.queries = nn.Parameter(torch.zeros(config.chunk_h, dim))
        nn.init.trunc_normal_(self.queries, std=0.02)
        self.dream_patch_proj = nn.Linear(wm_dim, dim)
        self.dream_pooled_proj = nn.Linear(wm_dim, dim)
        self.dream_vision_proj = nn.Linear(dim, dim) if config.predict_vision else None
        self.blocks = nn.ModuleList([
            TransformerBlock(dim, config.heads, dropout=config.dropout, noise=noise) for _ in range(config.depth)
        ])
        self.norm = LayerNorm(dim)
        self.head = nn.Linear(dim, ACTION_DIM)

    def dream_tokens(self, h_align: TokenSequence, h_dream: DreamEmbedding) -> TokenSequence:
        if h_dream.patches.shape[1] != self.num_patches:
            raise ShapeError(f"dream has {h_dream.patches.shape[1]} patches, expected {self.num_patches}")
        seq = h_align.append(self.dream_patch_proj(h_dream.patches), "dream")
        seq = seq.append(self.dream_pooled_proj(h_dream.pooled)[:, None], "dream")
        if self.dream_vision_proj is not None:
            vision = h_dream.vision if h_dream.vision is not None else h_dream.pooled.new_zeros(
                h_dream.pooled.shape[0], self.config.token_dim)
            seq = seq.append(self.dream_vision_proj(vision)[:, None], "dream")
        return seq

    def forward(self, h_align: TokenSequence, h_dream: DreamEmbedding) -> torch.Tensor:
        """
        Args:
            h_align: final encoder tokens [B, L, D]
            h_dream: null or predicted dream

        Returns:
            normalised action chunk [B, H, 7]
        """
        if h_dream.provenance not in ("null", "predicted"):
            raise ValueError(f"the action expert takes null or predicted dreams, got {h_dream.provenance!r}")
        context = self.dream_tokens(h_align, h_dream).tokens
        x = self.queries.expand(context.shape[0], -1, -1)
        for block in self.blocks:
            x = block(x, context)
        return self.head(self.norm(x))


@dataclass
class TdaOutput:
    """One Think-Dream-Act step; chunks are in normalised action units."""

    h_mid: TokenSequence
    h_align: TokenSequence
    a_draft: torch.Tensor
    h_dream: DreamEmbedding
    a_final: torch.Tensor
    z: Optional[LatentEmbedding] = None


class DreamTacPolicy(nn.Module):
    """
    Encoder, action expert, tactile adapter, forecaster and the frozen
    tactile world model in one module.

    Args:
        encoder_config: shared encoder settings
        policy_config: action expert / forecaster settings
        world_model: pretrained model; it is frozen here and never saved with the policy
        seed: dropout stream seed
    """

    def __init__(self, encoder_config: EncoderConfig, policy_config: PolicyConfig, world_model: TactileWorldModel,
                 seed: int = 0):
        super().__init__()
        self.noise = NoiseSource(seed)
        self.encoder_config = encoder_config
        self.policy_config = policy_config
        wm_dim = world_model.config.dim
        num_patches = world_model.num_patches
        self.encoder = MultimodalEncoder(encoder_config, self.noise)
        self.expert = ActionExpert(policy_config, wm_dim, num_patches, self.noise)
        self.adapter = TactileAdapter(wm_dim, world_model.config.heads, policy_config.dropout, noise=self.noise)
        vision_dim = encoder_config.token_dim if policy_config.predict_vision else 0
        self.forecaster = Forecaster(num_patches, wm_dim, policy_config.chunk_h, policy_config.forecaster_hidden,
                                     ACTION_DIM, vision_dim)
        self.normalizer = ActionNormalizer()
        self.world_model = world_model.freeze()
        self.use_dream = True

    @property
    def chunk_h(self) -> int:
        return self.policy_config.chunk_h

    def null(self, batch: int) -> DreamEmbedding:
        vision_dim = self.encoder_config.token_dim if self.policy_config.predict_vision else None
        return null_dream(self.world_model.num_patches, self.world_model.config.dim, batch, vision_dim)

    def encode(self, obs: ObsBatch) -> Tuple[TokenSequence, TokenSequence]:
        return self.encoder(obs)

    def act(self, h_align: TokenSequence, h_dream: DreamEmbedding) -> torch.Tensor:
        return self.expert(h_align, h_dream)

    def dream(self, tactile: torch.Tensor, a_draft: torch.Tensor) -> Tuple[DreamEmbedding, LatentEmbedding]:
        z = wm_embed(self.world_model, tactile)
        patches, pooled = self.adapter(z)
        return dream(LatentEmbedding(patches, pooled), a_draft, self.forecaster), z

    def think_dream_act(self, obs: ObsBatch, use_dream: bool = True) -> TdaOutput:
        """
        Both passes on one encoder call.

        Args:
            obs: observation batch
            use_dream: False feeds the null dream to pass 2 as well

        Returns:
            TdaOutput with a_draft, H_dream and a_final
        """
        h_mid, h_align = self.encode(obs)
        h_null = self.null(len(obs))
        a_draft = self.act(h_align, h_null)
        if not use_dream:
            return TdaOutput(h_mid, h_align, a_draft, h_null, a_draft)
        h_dream, z = self.dream(obs.tactile, a_draft)
        a_final = self.act(h_align, h_dream)
        return TdaOutput(h_mid, h_align, a_draft, h_dream, a_final, z)

    @torch.no_grad()
    def predict_chunk(self, observation, pass_name: str = "final", use_dream: Optional[bool] = None) -> Tuple[np.ndarray, dict]:
        """
        Inference on one simulator observation.

        Returns:
            (action chunk [H, 7] in simulator units, inference record)
        """
        if pass_name not in ("draft", "final"):
            raise ValueError(f"pass_name must be draft or final, got {pass_name!r}")
        self.eval()
        use_dream = self.use_dream if use_dream is None else use_dream
        out = self.think_dream_act(ObsBatch.from_observations([observation]), use_dream)
        draft = self.normalizer.denormalize(out.a_draft)[0].numpy().astype(np.float64)
        final = self.normalizer.denormalize(out.a_final)[0].numpy().astype(np.float64)
        record = {"draft": draft.tolist(), "final": final.tolist(), "dream_norm": out.h_dream.norm()}
        return (draft if pass_name == "draft" else final), record

    def world_model_digest(self) -> str:
        return self.world_model.digest()

    def trainable_groups(self, stage: str):
        """(main parameters, adapter parameters) updated in `stage`."""
        main = list(self.encoder.parameters()) + list(self.expert.parameters())
        if stage == "1":
            return main, []
        return main + list(self.forecaster.parameters()), list(self.adapter.parameters())


def build_policy(cfg: dict, world_model: Optional[TactileWorldModel] = None) -> DreamTacPolicy:
    """Fresh policy from a run config; a randomly initialised world model when none is given."""
    torch.manual_seed(cfg["seed"])
    if world_model is None:
        world_model = TactileWorldModel(WmConfig.from_run_config(cfg))
    return DreamTacPolicy(EncoderConfig.from_run_config(cfg), PolicyConfig.from_run_config(cfg), world_model,
                          seed=cfg["seed"])


def save_policy(policy: DreamTacPolicy, stem: Union[str, Path], extra: Optional[dict] = None) -> Path:
    meta = {
        "kind": "policy",
        "encoder": asdict(policy.encoder_config),
        "policy": asdict(policy.policy_config),
        "world_model": asdict(policy.world_model.config),
        "world_model_digest": policy.world_model_digest(),
        "seed": policy.noise.seed,
        "use_dream": policy.use_dream,
    }
    meta.update(extra or {})
    return save_checkpoint(stem, policy, meta, exclude_prefixes=(WM_PREFIX,))


def load_policy(stem: Union[str, Path], world_model: Optional[TactileWorldModel] = None) -> DreamTacPolicy:
    """
    Rebuild a policy checkpoint around `world_model` (or, when the checkpoint
    records one, the world model checkpoint it was trained with).
    """
    tensors, meta = load_checkpoint(stem)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{stem} is not a policy checkpoint")
    if world_model is None:
        wm_path = meta.get("wm_checkpoint")
        world_model = load_world_model(wm_path) if wm_path else TactileWorldModel(WmConfig(**meta["world_model"]))
    if WmConfig(**meta["world_model"]) != world_model.config:
        raise CheckpointError("world model configuration does not match the policy checkpoint")
    policy = DreamTacPolicy(EncoderConfig(**meta["encoder"]), PolicyConfig(**meta["policy"]), world_model,
                            seed=meta.get("seed", 0))
    policy.use_dream = bool(meta.get("use_dream", True))
    load_into(policy, tensors, strict=False)
    expected = {name for name in policy.state_dict() if not name.startswith(WM_PREFIX)}
    missing = sorted(expected - set(tensors))
    if missing:
        raise CheckpointError(f"policy checkpoint is missing {len(missing)} tensors, e.g. {missing[0]}")
    return policy


if __name__ == "__main__":
    from run_config import defaults

    net = build_policy(defaults()).eval()
    obs = ObsBatch(torch.rand(1, 64, 64, 3), torch.rand(1, 64, 64, 3), torch.full((1, 32, 32, 3), 0.5),
                   torch.zeros(1, 7), torch.tensor([0]))
    with torch.no_grad():
        result = net.think_dream_act(obs)
    print(f"✅ a_draft {tuple(result.a_draft.shape)}, dream norm {result.h_dream.norm():.3f}")
