"""
Run configuration: one flat key/value namespace shared by every workflow.

Values come from (lowest to highest precedence) registered defaults, a
config file, DREAMTAC_<KEY> environment variables and `--set key=value`
overrides.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional

from dotenv import dotenv_values, load_dotenv

ENV_PREFIX = "DREAMTAC_"
TASKS = ("peg_in_hole", "tool_stabilize")


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values and inconsistent settings."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list_of(item: Callable[[str], Any]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        return [item(part.strip()) for part in text.split(",") if part.strip()]
    return parse


@dataclass(frozen=True)
class ConfigKey:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


_KEYS: List[ConfigKey] = [
    # data
    ConfigKey("tasks", _list_of(str), ["peg_in_hole", "tool_stabilize"], "tasks to record/train/evaluate"),
    ConfigKey("episodes_per_task", int, 400, "successful demonstrations recorded per task"),
    ConfigKey("data_seed", int, 0, "first seed used when recording demonstrations"),
    ConfigKey("max_episode_steps", int, 120, "episode step cap"),
    ConfigKey("cache_episodes", int, 32, "episodes kept in memory by a dataset reader"),
    ConfigKey("sensor_half_extents", _list_of(float), [0.008, 0.008, 0.004], "tactile sensor box half-extents (m)"),
    # encoder
    ConfigKey("token_dim", int, 128, "token width D of the shared encoder"),
    ConfigKey("encoder_depth", int, 4, "transformer blocks in the shared encoder"),
    ConfigKey("encoder_heads", int, 8, "attention heads in the shared encoder"),
    ConfigKey("mid_layer", int, 2, "block index whose output is H_mid"),
    ConfigKey("patch_px", int, 8, "image patch size in pixels"),
    ConfigKey("dropout", float, 0.1, "dropout probability"),
    # alignment
    ConfigKey("hsa_temperature", float, 0.07, "InfoNCE temperature"),
    ConfigKey("lambda_hsa", float, 0.1, "weight of the alignment loss"),
    ConfigKey("hsa_in_batch_negatives", _parse_bool, True, "use other samples' regions as negatives"),
    ConfigKey("hsa_region_negatives", int, 2, "random off-sensor regions per image used as negatives"),
    # world model
    ConfigKey("wm_size", str, "small", "tactile world model size: small or large"),
    ConfigKey("wm_dim", int, 128, "world model embedding width D_w"),
    ConfigKey("wm_heads", int, 8, "world model attention heads"),
    ConfigKey("wm_context", int, 4, "context frames for world model pretraining"),
    ConfigKey("horizon_n", int, 5, "prediction horizon N in steps"),
    ConfigKey("ema_decay", float, 0.996, "EMA decay of the target encoder"),
    ConfigKey("wm_epochs", int, 20, "world model pretraining epochs"),
    ConfigKey("wm_lr", float, 1e-4, "world model learning rate"),
    ConfigKey("wm_batch", int, 32, "world model batch size"),
    # policy
    ConfigKey("chunk_h", int, 8, "action chunk length H"),
    ConfigKey("expert_depth", int, 3, "action expert blocks"),
    ConfigKey("expert_heads", int, 8, "action expert attention heads"),
    ConfigKey("forecaster_hidden", int, 256, "forecaster MLP hidden width"),
    # training
    ConfigKey("lambda_w", float, 1.0, "weight of the latent forecasting loss"),
    ConfigKey("batch_size", int, 32, "policy training batch size"),
    ConfigKey("epochs", int, 20, "policy training epochs per stage"),
    ConfigKey("max_steps_per_epoch", int, 0, "cap on steps per epoch (0 = full pass)"),
    ConfigKey("lr", float, 1e-4, "learning rate of encoders, policy and forecaster"),
    ConfigKey("weight_decay", float, 1e-4, "weight decay of encoders, policy and forecaster"),
    ConfigKey("adapter_lr", float, 1e-5, "learning rate of the adapter and attention pooling"),
    ConfigKey("adapter_weight_decay", float, 1e-4, "weight decay of the adapter and attention pooling"),
    ConfigKey("lr_schedule", str, "cosine", "learning-rate schedule: cosine or constant"),
    ConfigKey("warmup_steps", int, 100, "linear warmup steps"),
    ConfigKey("seed", int, 0, "training/evaluation seed"),
    # ablations
    ConfigKey("disable_hsa", _parse_bool, False, "drop the alignment loss"),
    ConfigKey("disable_dream", _parse_bool, False, "always feed the null dream (stage 2 becomes stage 1)"),
    ConfigKey("disable_tactile", _parse_bool, False, "drop tactile tokens from the encoder"),
    ConfigKey("supervise_draft", _parse_bool, True, "supervise the draft pass in stage 2"),
    ConfigKey("data_fraction", float, 1.0, "fraction of demonstrations used (0.2..1.0)"),
    ConfigKey("dream_predicts_vision", _parse_bool, False, "forecaster also predicts the future wrist embedding"),
    # evaluation / misc
    ConfigKey("val_fraction", float, 0.1, "held-out fraction of episodes"),
    ConfigKey("snapshots", int, 5, "forecaster snapshots kept for heatmap series"),
    ConfigKey("eval_episodes", int, 100, "evaluation episodes per seed"),
    ConfigKey("eval_seeds", _list_of(int), [0, 1, 2], "evaluation seeds"),
    ConfigKey("workers", int, 1, "parallel worker processes"),
    ConfigKey("log_every", int, 50, "steps between metric status lines"),
    ConfigKey("log_inference", _parse_bool, False, "write inference.jsonl during evaluation"),
]

REGISTRY: Dict[str, ConfigKey] = {key.name: key for key in _KEYS}


def defaults() -> Dict[str, Any]:
    return {key.name: _copy(key.default) for key in _KEYS}


def _copy(value: Any) -> Any:
    return list(value) if isinstance(value, list) else value


def coerce(name: str, raw: Any) -> Any:
    """Parse `raw` into the registered type of `name`."""
    if name not in REGISTRY:
        raise ConfigError(f"unknown config key: {name}")
    if not isinstance(raw, str):
        return _copy(raw)
    try:
        return REGISTRY[name].parse(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        name, raw = pair.split("=", 1)
        name = name.strip()
        overrides[name] = coerce(name, raw.strip())
    return overrides


def _from_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for name, raw in dotenv_values(path).items():
        if raw is None:
            raise ConfigError(f"{path}: key {name} has no value")
        values[name] = coerce(name, raw)
    return values


def _from_environment() -> Dict[str, Any]:
    load_dotenv()
    values = {}
    for env_name, raw in os.environ.items():
        if env_name.startswith(ENV_PREFIX):
            values[env_name[len(ENV_PREFIX):].lower()] = raw
    return {name: coerce(name, raw) for name, raw in values.items()}


def validate(cfg: Dict[str, Any]) -> Dict[str, Any]:
    unknown = sorted(set(cfg) - set(REGISTRY))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for task in cfg["tasks"]:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if not 1 <= cfg["mid_layer"] < cfg["encoder_depth"]:
        raise ConfigError("mid_layer must satisfy 1 <= mid_layer < encoder_depth")
    if cfg["wm_size"] not in ("small", "large"):
        raise ConfigError(f"wm_size must be small or large, got {cfg['wm_size']!r}")
    if cfg["lr_schedule"] not in ("cosine", "constant"):
        raise ConfigError(f"lr_schedule must be cosine or constant, got {cfg['lr_schedule']!r}")
    if cfg["lambda_hsa"] < 0 or cfg["lambda_w"] < 0:
        raise ConfigError("loss weights must be non-negative")
    if cfg["hsa_temperature"] <= 0:
        raise ConfigError("hsa_temperature must be positive")
    if not 0.0 < cfg["ema_decay"] < 1.0:
        raise ConfigError("ema_decay must lie in (0, 1)")
    if cfg["chunk_h"] < 1 or cfg["horizon_n"] < 1:
        raise ConfigError("chunk_h and horizon_n must be >= 1")
    if not 0.0 <= cfg["dropout"] < 1.0:
        raise ConfigError("dropout must lie in [0, 1)")
    if len(cfg["sensor_half_extents"]) != 3 or min(cfg["sensor_half_extents"]) <= 0:
        raise ConfigError("sensor_half_extents needs three positive values")
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if cfg["cache_episodes"] < 1:
        raise ConfigError("cache_episodes must be >= 1")
    return cfg


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    use_environment: bool = True,
) -> Dict[str, Any]:
    """
    Resolve a run configuration.

    Args:
        path: optional flat key=value config file
        overrides: already-coerced values that win over everything else
        use_environment: read DREAMTAC_<KEY> variables (and a .env file)

    Returns:
        Fully populated, validated config dict
    """
    cfg = defaults()
    if path:
        cfg.update(_from_file(Path(path)))
    if use_environment:
        cfg.update(_from_environment())
    for name, value in (overrides or {}).items():
        cfg[name] = coerce(name, value)
    return validate(cfg)


def config_hash(cfg: Dict[str, Any]) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def describe_keys() -> str:
    """Help text listing every key with its default."""
    lines = ["config keys (key=default: help):"]
    for key in _KEYS:
        default = key.default
        if isinstance(default, list):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {key.name}={default}: {key.help}")
    return "\n".join(lines)


def save_config(cfg: Dict[str, Any], path: Path) -> None:
    """Write a config back in the flat key=value format."""
    lines = []
    for name in sorted(cfg):
        value = cfg[name]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    cfg = load_config()
    print(describe_keys())
    print(f"✅ default config hash: {config_hash(cfg)[:12]}")
