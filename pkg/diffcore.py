"""
Deterministic differentiable-computation substrate.

Thin layer over torch that every learned module in this repo is built on:
finite-checked functional ops, counter-based dropout masks, multi-head
attention, AdamW with non-finite guards and the DTWT parameter checkpoint
format.
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

CHECKPOINT_MAGIC = b"DTWT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when an op produces, or an optimizer receives, NaN/Inf values."""


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


class CheckpointError(ValueError):
    """Raised for malformed parameter checkpoints."""


def configure_determinism(threads: int = 1) -> None:
    """Pin torch to a fixed thread count and deterministic kernels."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def seed_everything(seed: int) -> "CounterRng":
    """Seed torch's parameter-init RNG and return the matching counter RNG."""
    torch.manual_seed(seed)
    return CounterRng(seed)


class CounterRng:
    """
    Splittable counter-based random source.

    Every stream is identified by (seed, path); draws come from a Philox
    generator keyed by that pair, so results never depend on call history.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)

    def split(self, *keys: int) -> "CounterRng":
        return CounterRng(self.seed, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(sequence))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def __repr__(self) -> str:
        return f"CounterRng(seed={self.seed}, path={self.path})"


class NoiseSource:
    """
    Hands out dropout streams keyed by (seed, step, call index).

    The trainer calls `set_step` once per optimizer step; every dropout layer
    then draws its own child stream in forward order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.step = 0
        self._calls = 0

    def set_step(self, step: int) -> None:
        self.step = int(step)
        self._calls = 0

    def next_rng(self) -> CounterRng:
        rng = CounterRng(self.seed, (self.step, self._calls))
        self._calls += 1
        return rng


def check_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {what} (shape {tuple(tensor.shape)})")
    return tensor


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """
    Matrix product with an optional shared leading batch.

    Args:
        a: [..., m, k]
        b: [..., k, n] with the same leading dims as `a`, or a plain [k, n]

    Returns:
        [..., m, n]
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return check_finite(torch.matmul(a, b), "matmul output")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-subtracted softmax along `axis`."""
    check_finite(x, "softmax input")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    exp = torch.exp(shifted)
    return check_finite(exp / exp.sum(dim=axis, keepdim=True), "softmax output")


def layernorm(
    x: torch.Tensor,
    gain: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return check_finite(out, "layernorm output")


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def dropout(x: torch.Tensor, p: float, training: bool, rng: Optional[CounterRng] = None) -> torch.Tensor:
    """
    Inverted dropout with masks drawn from a counter RNG.

    Args:
        x: input tensor
        p: drop probability in [0, 1)
        training: identity when False
        rng: mask stream; required when training with p > 0

    Returns:
        Tensor with dropped elements zeroed and survivors scaled by 1/(1-p)
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    keep = rng.uniform(tuple(x.shape)) >= p
    mask = torch.from_numpy(keep).to(dtype=x.dtype)
    return x * mask / (1.0 - p)


class Dropout(nn.Module):
    def __init__(self, p: float, noise: Optional[NoiseSource] = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.noise = noise if noise is not None else NoiseSource(0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        return dropout(x, self.p, True, self.noise.next_rng())


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention with per-head q/k/v projections and an
    output projection.

    Args:
        dim: model dim of query and key/value tokens
        heads: number of heads; must divide `dim` and `inner_dim`
        inner_dim: width of the projected q/k/v space (defaults to `dim`)
        dropout: attention-weight dropout
        noise: dropout stream source
    """

    def __init__(
        self,
        dim: int,
        heads: int = 8,
        inner_dim: Optional[int] = None,
        dropout: float = 0.0,
        noise: Optional[NoiseSource] = None,
    ):
        super().__init__()
        inner_dim = inner_dim or dim
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
        if inner_dim % heads != 0:
            raise ShapeError(f"inner dim {inner_dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (inner_dim // heads) ** -0.5
        self.q_proj = nn.Linear(dim, inner_dim)
        self.k_proj = nn.Linear(dim, inner_dim)
        self.v_proj = nn.Linear(dim, inner_dim)
        self.out_proj = nn.Linear(inner_dim, dim)
        self.attn_drop = Dropout(dropout, noise)

    def forward(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        """
        Args:
            q_tokens: [B, Lq, dim]
            kv_tokens: [B, Lk, dim]

        Returns:
            [B, Lq, dim]
        """
        if q_tokens.shape[0] != kv_tokens.shape[0] or q_tokens.shape[-1] != kv_tokens.shape[-1]:
            raise ShapeError(
                f"attention inputs disagree: {tuple(q_tokens.shape)} vs {tuple(kv_tokens.shape)}"
            )
        q = rearrange(self.q_proj(q_tokens), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.k_proj(kv_tokens), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.v_proj(kv_tokens), "b n (h d) -> b h n d", h=self.heads)
        weights = softmax(matmul(q, k.transpose(-1, -2)) * self.scale, axis=-1)
        weights = self.attn_drop(weights)
        out = rearrange(matmul(weights, v), "b h n d -> b n (h d)")
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0, noise: Optional[NoiseSource] = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = Dropout(dropout, noise)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(self.drop(gelu(self.fc1(x)))))


class TransformerBlock(nn.Module):
    """Pre-norm block; cross-attends to `context` when given, else self-attends."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, dropout: float = 0.0,
                 noise: Optional[NoiseSource] = None):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, dropout=dropout, noise=noise)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, dim * mlp_ratio, dropout, noise)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm1(x)
        kv = h if context is None else context
        x = x + self.attn(h, kv)
        return x + self.mlp(self.norm2(x))


class AdamW(torch.optim.AdamW):
    """torch AdamW that refuses non-finite gradients and counts its steps."""

    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 1e-4, **kwargs):
        super().__init__(params, lr=lr, weight_decay=weight_decay, **kwargs)
        self.step_count = 0

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for param in group["params"]:
                if param.grad is not None and not torch.isfinite(param.grad).all():
                    raise NonFiniteError(
                        f"non-finite gradient for parameter of shape {tuple(param.shape)}"
                    )
        loss = super().step(closure)
        self.step_count += 1
        return loss


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: Dict,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> List[torch.Tensor]:
    """
    One functional AdamW update with bias correction and decoupled weight decay.

    Args:
        params: current parameter values (left untouched)
        grads: gradients, one per parameter
        state: moment buffers and step counter; filled on the first call
        lr, weight_decay, betas, eps: usual AdamW hyper-parameters

    Returns:
        Updated parameter tensors
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {tuple(p.shape)} and gradient {tuple(g.shape)} differ")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter of shape {tuple(p.shape)}")
    if "step" not in state:
        state.update(step=0, exp_avg=[torch.zeros_like(p) for p in params],
                     exp_avg_sq=[torch.zeros_like(p) for p in params])
    state["step"] += 1
    beta1, beta2 = betas
    bias1 = 1.0 - beta1 ** state["step"]
    bias2 = 1.0 - beta2 ** state["step"]
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state["exp_avg"][i] = beta1 * state["exp_avg"][i] + (1.0 - beta1) * g
        state["exp_avg_sq"][i] = beta2 * state["exp_avg_sq"][i] + (1.0 - beta2) * g * g
        m_hat = state["exp_avg"][i] / bias1
        v_hat = state["exp_avg_sq"][i] / bias2
        decayed = p * (1.0 - lr * weight_decay)
        updated.append(decayed - lr * m_hat / (v_hat.sqrt() + eps))
    return updated


ArrayLike = Union[torch.Tensor, np.ndarray]


def _to_numpy(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    # ascontiguousarray promotes 0-d arrays to 1-d; keep the original shape
    return np.ascontiguousarray(value, dtype="<f4").reshape(np.shape(value))


def save_parameters(path: Union[str, Path], tensors: Mapping[str, ArrayLike]) -> None:
    """
    Write named tensors in DTWT format.

    Layout: magic "DTWT", u32 version, then per record: u32 name length,
    UTF-8 name, u32 rank, rank x u64 dims, little-endian f32 payload.
    """
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(tensors):
            array = _to_numpy(tensors[name])
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", array.ndim))
            handle.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            handle.write(array.tobytes())


def load_parameters(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 8
    tensors = {}
    try:
        while offset < len(data):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = data[offset:offset + 4 * count]
            if len(payload) != 4 * count:
                raise CheckpointError(f"{path}: truncated payload for {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            offset += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record ({exc})") from exc
    return tensors


def save_checkpoint(stem: Union[str, Path], module: nn.Module, meta: Optional[dict] = None,
                    exclude_prefixes: Tuple[str, ...] = ()) -> Path:
    """Save `module.state_dict()` to `<stem>.dtwt` and `meta` to `<stem>.json`."""
    stem = Path(stem)
    state = {
        name: value for name, value in module.state_dict().items()
        if not name.startswith(exclude_prefixes)
    }
    save_parameters(stem.with_suffix(".dtwt"), state)
    meta = dict(meta or {})
    meta["digest"] = tensors_digest(state)
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return stem.with_suffix(".dtwt")


def load_checkpoint(stem: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    stem = Path(stem)
    if stem.suffix in (".dtwt", ".json"):
        stem = stem.with_suffix("")
    weights_path = stem.with_suffix(".dtwt")
    if not weights_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {weights_path}")
    meta_path = stem.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return load_parameters(weights_path), meta


def load_into(module: nn.Module, tensors: Mapping[str, np.ndarray], strict: bool = True,
              prefix: str = "") -> None:
    state = {}
    for name, value in tensors.items():
        if name.startswith(prefix):
            state[name[len(prefix):]] = torch.from_numpy(np.array(value, dtype=np.float32))
    current = module.state_dict()
    for name, value in state.items():
        if name in current and tuple(current[name].shape) != tuple(value.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(value.shape)} vs model {tuple(current[name].shape)}"
            )
    missing, unexpected = module.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing} unexpected={unexpected}")


def tensors_digest(tensors: Mapping[str, ArrayLike]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode("utf-8"))
        digest.update(_to_numpy(tensors[name]).tobytes())
    return digest.hexdigest()


def module_digest(module: nn.Module) -> str:
    return tensors_digest(module.state_dict())


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


if __name__ == "__main__":
    configure_determinism()
    attn = MultiHeadAttention(16, heads=4)
    tokens = torch.randn(2, 5, 16)
    print(f"✅ attention output {tuple(attn(tokens, tokens).shape)}")
    print(f"✅ softmax([1000, 1000]) = {softmax(torch.tensor([1000.0, 1000.0])).tolist()}")
