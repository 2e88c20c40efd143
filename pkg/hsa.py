"""
Hierarchical spatial alignment: InfoNCE terms tying the pooled tactile
embedding to the pooled wrist and third-person regions where the sensor
projects.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from diffcore import CounterRng, ShapeError
from encoders import TokenSequence, pool_region

REGION_PATCHES = 2  # random negative regions are REGION_PATCHES x REGION_PATCHES patch blocks
VIEWS = (("w", "wrist"), ("tp", "tpv"))


@dataclass
class HsaConfig:
    temperature: float = 0.07
    lambda_hsa: float = 0.1
    in_batch_negatives: bool = True
    region_negatives: int = 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_hsa < 0:
            raise ValueError(f"lambda_hsa must be non-negative, got {self.lambda_hsa}")
        if not self.in_batch_negatives and self.region_negatives < 1:
            raise ValueError("at least one negative source is required")

    @classmethod
    def from_run_config(cls, cfg: dict) -> "HsaConfig":
        return cls(cfg["hsa_temperature"], cfg["lambda_hsa"], cfg["hsa_in_batch_negatives"],
                   cfg["hsa_region_negatives"])


@dataclass
class HsaBatchInputs:
    """
    Pooled, unit-norm vectors for one batch.

    h_tau: [B, D] tactile anchors
    h_w / h_tp: [B, D] in-bbox wrist / third-person positives
    w_present / tp_present: [B] bool, False where the bbox was invalid or empty
    w_regions / tp_regions: [B, R, D] pooled off-sensor regions of the same image
    w_regions_present / tp_regions_present: [B, R] bool
    """

    h_tau: torch.Tensor
    h_w: torch.Tensor
    w_present: torch.Tensor
    h_tp: torch.Tensor
    tp_present: torch.Tensor
    w_regions: torch.Tensor
    w_regions_present: torch.Tensor
    tp_regions: torch.Tensor
    tp_regions_present: torch.Tensor

    def __len__(self) -> int:
        return int(self.h_tau.shape[0])


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    -log( exp(a.p/k) / (exp(a.p/k) + sum_i exp(a.n_i/k)) )

    Args:
        anchor: [D]
        positive: [D]
        negatives: [K, D], K >= 1
        temperature: k > 0

    Returns:
        Scalar loss
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    negatives = negatives.reshape(-1, anchor.shape[-1])
    if negatives.shape[0] < 1:
        raise ValueError("info_nce needs at least one negative")
    if positive.shape != anchor.shape:
        raise ShapeError(f"anchor {tuple(anchor.shape)} and positive {tuple(positive.shape)} differ")
    logits = torch.cat([(anchor * positive).sum()[None], negatives @ anchor]) / temperature
    return torch.logsumexp(logits, dim=0) - logits[0]


def info_nce_batch(anchors: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor,
                   valid: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Row-wise info_nce with a per-row negative mask.

    Args:
        anchors, positives: [B, D]
        negatives: [B, K, D]
        valid: [B, K] bool; rows need at least one valid negative

    Returns:
        [B] losses
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    pos = (anchors * positives).sum(dim=-1, keepdim=True)
    neg = torch.einsum("bd,bkd->bk", anchors, negatives)
    neg = neg.masked_fill(~valid, float("-inf"))
    logits = torch.cat([pos, neg], dim=1) / temperature
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def _view_negatives(positives: torch.Tensor, present: torch.Tensor, regions: torch.Tensor,
                    regions_present: torch.Tensor, cfg: HsaConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    batch = positives.shape[0]
    parts, valid = [], []
    if cfg.in_batch_negatives:
        others = positives[None, :, :].expand(batch, -1, -1)
        not_self = ~torch.eye(batch, dtype=torch.bool)
        parts.append(others)
        valid.append(not_self & present[None, :])
    if cfg.region_negatives > 0:
        parts.append(regions)
        valid.append(regions_present)
    return torch.cat(parts, dim=1), torch.cat(valid, dim=1)


def hsa_loss(inputs: HsaBatchInputs, cfg: HsaConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    Batch alignment loss L_HSA = L_HSA-W + L_HSA-TP.

    Each term sums per-sample InfoNCE over samples with a valid bbox and at
    least one negative, divided by the batch size; skipped samples add zero.

    Returns:
        (total loss, breakdown with hsa_w, hsa_tp, skipped_w, skipped_tp)
    """
    batch = len(inputs)
    if batch < 2 and cfg.in_batch_negatives:
        raise ValueError("in-batch negatives need a batch of at least 2")
    breakdown: Dict[str, float] = {}
    terms = []
    for short, _ in VIEWS:
        positives = getattr(inputs, f"h_{short}")
        present = getattr(inputs, f"{short}_present")
        negatives, valid = _view_negatives(positives, present, getattr(inputs, f"{short}_regions"),
                                           getattr(inputs, f"{short}_regions_present"), cfg)
        usable = present & valid.any(dim=1)
        if bool(usable.any()):
            losses = info_nce_batch(inputs.h_tau[usable], positives[usable], negatives[usable], valid[usable],
                                    cfg.temperature)
            term = losses.sum() / batch
        else:
            term = inputs.h_tau.sum() * 0.0
        terms.append(term)
        breakdown[f"hsa_{short}"] = float(term.detach())
        breakdown[f"skipped_{short}"] = int(batch - int(usable.sum()))
    return terms[0] + terms[1], breakdown


def random_region_masks(mask: np.ndarray, count: int, rng: CounterRng) -> List[Optional[np.ndarray]]:
    """
    Pick `count` REGION_PATCHES-square patch blocks that do not touch `mask`.
    Entries are None when no such block exists.
    """
    rows, cols = mask.shape
    size = REGION_PATCHES
    candidates = [(r, c) for r in range(rows - size + 1) for c in range(cols - size + 1)
                  if not mask[r:r + size, c:c + size].any()]
    if not candidates:
        return [None] * count
    picks = rng.generator().integers(0, len(candidates), size=count)
    out = []
    for pick in picks:
        r, c = candidates[int(pick)]
        region = np.zeros_like(mask, dtype=bool)
        region[r:r + size, c:c + size] = True
        out.append(region)
    return out


def _pooled_regions(seq: TokenSequence, tag: str, masks: np.ndarray, count: int,
                    rng: CounterRng) -> Tuple[torch.Tensor, torch.Tensor]:
    batch, _, dim = seq.tokens.shape
    if count == 0:
        return seq.tokens.new_zeros(batch, 0, dim), torch.zeros(batch, 0, dtype=torch.bool)
    region_masks = np.zeros((count, batch) + masks.shape[1:], dtype=bool)
    for i in range(batch):
        for r, region in enumerate(random_region_masks(masks[i], count, rng.split(i))):
            if region is not None:
                region_masks[r, i] = region
    pooled, present = [], []
    for r in range(count):
        vectors, ok = pool_region(seq, tag, torch.from_numpy(region_masks[r]))
        pooled.append(vectors)
        present.append(ok)
    return torch.stack(pooled, dim=1), torch.stack(present, dim=1)


def build_hsa_inputs(h_mid: TokenSequence, wrist_mask: torch.Tensor, tpv_mask: torch.Tensor,
                     cfg: HsaConfig, rng: CounterRng) -> HsaBatchInputs:
    """
    Pool anchors, positives and region negatives from H_mid.

    Args:
        h_mid: intermediate-layer token sequence (must contain tactile tokens)
        wrist_mask, tpv_mask: [B, rows, cols] bbox token masks
        cfg: alignment settings
        rng: stream for choosing off-sensor regions
    """
    h_tau, _ = pool_region(h_mid, "tactile", None)
    h_w, w_present = pool_region(h_mid, "wrist", wrist_mask)
    h_tp, tp_present = pool_region(h_mid, "tpv", tpv_mask)
    w_regions, w_regions_present = _pooled_regions(h_mid, "wrist", wrist_mask.numpy(), cfg.region_negatives,
                                                   rng.split(0))
    tp_regions, tp_regions_present = _pooled_regions(h_mid, "tpv", tpv_mask.numpy(), cfg.region_negatives,
                                                     rng.split(1))
    return HsaBatchInputs(h_tau, h_w, w_present, h_tp, tp_present, w_regions, w_regions_present,
                          tp_regions, tp_regions_present)


@torch.no_grad()
def alignment_gap(h_mid: TokenSequence, wrist_mask: torch.Tensor) -> Optional[float]:
    """
    Mean cos(h_tau, wrist-in-bbox) minus mean cos(h_tau, wrist-outside-bbox)
    over samples where both regions are non-empty.
    """
    h_tau, _ = pool_region(h_mid, "tactile", None)
    inside, inside_ok = pool_region(h_mid, "wrist", wrist_mask)
    outside, outside_ok = pool_region(h_mid, "wrist", ~wrist_mask)
    both = inside_ok & outside_ok
    if not bool(both.any()):
        return None
    cos_in = F.cosine_similarity(h_tau[both], inside[both], dim=-1)
    cos_out = F.cosine_similarity(h_tau[both], outside[both], dim=-1)
    return float((cos_in - cos_out).mean())


if __name__ == "__main__":
    a = F.normalize(torch.randn(16), dim=0)
    print(f"✅ equal-logit loss = {float(info_nce(a, a, a[None], 0.07)):.4f} (ln 2 = 0.6931)")
