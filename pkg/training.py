"""
Training curriculum: world-model pretraining, Stage 1 (action + alignment
with the null dream) and Stage 2 (adds latent forecasting and the second
pass), plus the ablation runner.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

import run_config
from datastore import Batch, EpisodeDataset, action_statistics, load_batch, split, subset
from diffcore import (AdamW, CounterRng, NonFiniteError, load_parameters, save_parameters)
from encoders import ObsBatch
from evalharness import evaluate, seed_std
from forecaster import forecasting_loss, vision_loss
from hsa import HsaConfig, build_hsa_inputs, hsa_loss
from policy import DreamTacPolicy, action_loss, build_policy, load_policy, save_policy
from worldmodel import WmConfig, load_world_model, save_world_model, wm_embed, wm_pretrain

METRIC_COLUMNS = ("step", "loss_total", "loss_action_draft", "loss_action_final", "hsa_w", "hsa_tp", "loss_w",
                  "skipped_w", "skipped_tp", "lr")
ABLATIONS: Dict[str, Dict] = {
    "full": {},
    "hsa_only": {"disable_dream": True},
    "dream_only": {"lambda_hsa": 0.0},
    # without tactile tokens there is nothing to align, and no dream
    "vision_only": {"disable_tactile": True, "disable_dream": True},
}
ABLATION_COLUMNS = ("variant", "task", "overrides", "sr_mean", "sr_std", "runs", "failed", "error")


class TrainingDivergedError(RuntimeError):
    """A loss went NaN/Inf; the message carries the step and every loss term."""


class FrozenWeightsMutatedError(RuntimeError):
    """The tactile world model's weights changed during policy training."""


@dataclass
class TrainConfig:
    stage: str = "1"
    lambda_hsa: float = 0.1
    lambda_w: float = 1.0
    chunk_h: int = 8
    horizon_n: int = 5
    batch_size: int = 32
    epochs: int = 20
    max_steps_per_epoch: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    adapter_lr: float = 1e-5
    adapter_weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    warmup_steps: int = 100
    seed: int = 0
    disable_hsa: bool = False
    disable_dream: bool = False
    disable_tactile: bool = False
    supervise_draft: bool = True
    wm_size: str = "small"
    data_fraction: float = 1.0
    dream_predicts_vision: bool = False
    val_fraction: float = 0.1
    snapshots: int = 5
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in ("wm", "1", "2"):
            raise ValueError(f"stage must be wm, 1 or 2, got {self.stage!r}")
        if self.lambda_hsa < 0 or self.lambda_w < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def effective_lambda_hsa(self) -> float:
        return 0.0 if self.disable_hsa else self.lambda_hsa

    @classmethod
    def from_run_config(cls, cfg: dict, stage: str = "1") -> "TrainConfig":
        fields = {name: cfg[name] for name in cls.__dataclass_fields__ if name != "stage"}
        return cls(stage=str(stage), **fields)


def lr_factor(step: int, total_steps: int, warmup: int, schedule: str) -> float:
    """Linear warmup, then cosine decay to zero (or constant)."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if schedule == "constant":
        return 1.0
    progress = (step - warmup) / max(1, total_steps - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def compute_losses(
    policy: DreamTacPolicy,
    batch: Batch,
    tcfg: TrainConfig,
    hsa_cfg: HsaConfig,
    rng: CounterRng,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """
    One training objective evaluation.

    Stage 1 (or Stage 2 with the dream disabled):
        L_action(draft) + lambda_HSA * L_HSA
    Stage 2:
        [L_action(draft)] + L_action(final) + lambda_HSA * L_HSA + lambda_W * L_W

    Returns:
        (total loss tensor, logged terms)
    """
    obs = ObsBatch.from_batch(batch)
    use_dream = tcfg.stage == "2" and not tcfg.disable_dream
    out = policy.think_dream_act(obs, use_dream=use_dream)
    targets = policy.normalizer.normalize(batch.actions)
    loss_draft = action_loss(out.a_draft, targets)
    terms = {"loss_action_draft": float(loss_draft.detach()), "loss_action_final": 0.0, "hsa_w": 0.0,
             "hsa_tp": 0.0, "loss_w": 0.0, "skipped_w": 0, "skipped_tp": 0}

    if use_dream:
        future = wm_embed(policy.world_model, batch.future_tactile)
        loss_w = forecasting_loss(out.h_dream, future)
        if out.h_dream.vision is not None:
            with torch.no_grad():
                wrist_target = policy.encoder.tokenize_image(batch.future_wrist, "wrist").tokens.mean(dim=1)
            loss_w = loss_w + vision_loss(out.h_dream.vision, wrist_target)
        loss_final = action_loss(out.a_final, targets)
        total = loss_final + tcfg.lambda_w * loss_w
        if tcfg.supervise_draft:
            total = total + loss_draft
        terms["loss_action_final"] = float(loss_final.detach())
        terms["loss_w"] = float(loss_w.detach())
    else:
        total = loss_draft

    if policy.encoder_config.use_tactile and not tcfg.disable_hsa:
        inputs = build_hsa_inputs(out.h_mid, batch.wrist_mask, batch.tpv_mask, hsa_cfg, rng)
        loss_hsa, breakdown = hsa_loss(inputs, hsa_cfg)
        terms.update(breakdown)
        if tcfg.effective_lambda_hsa > 0:
            total = total + tcfg.effective_lambda_hsa * loss_hsa
    terms["loss_total"] = float(total.detach())
    if not math.isfinite(terms["loss_total"]):
        raise TrainingDivergedError(f"non-finite loss: {terms}")
    return total, terms


class Trainer:
    """
    Runs the curriculum for one run configuration.

    Args:
        cfg: resolved run config (see run_config)
        out_dir: run directory; checkpoints and metrics are written here
        verbose: progress bars and status lines
    """

    def __init__(self, cfg: dict, out_dir: Union[str, Path], verbose: bool = True):
        self.cfg = run_config.validate(dict(cfg))
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.verbose = verbose
        self.hsa_cfg = HsaConfig.from_run_config(self.cfg)
        self.config_hash = run_config.config_hash(self.cfg)

    def _say(self, message: str) -> None:
        if self.verbose:
            print(message)

    def _views(self, dataset: EpisodeDataset) -> Tuple[EpisodeDataset, EpisodeDataset]:
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        data = subset(dataset, self.cfg["data_fraction"], self.cfg["data_seed"])
        return split(data, self.cfg["val_fraction"], self.cfg["data_seed"])

    # ---- world model -------------------------------------------------------

    def pretrain_wm(self, dataset: EpisodeDataset, shuffled_targets: bool = False) -> Path:
        """Pretrain, freeze and save the tactile world model; returns the checkpoint stem."""
        config = WmConfig.from_run_config(self.cfg)
        self._say(f"🔄 pretraining {config.size} tactile world model (k={config.context}, N={config.horizon})")
        model, history = wm_pretrain(dataset, config, self.cfg["seed"], shuffled_targets, self.verbose)
        with open(self.out_dir / "wm_history.csv", "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=["epoch", "loss", "spread"])
            writer.writeheader()
            writer.writerows(history)
        stem = self.out_dir / "world_model"
        save_world_model(model, stem, {"config_hash": self.config_hash, "seed": self.cfg["seed"],
                                       "shuffled_targets": shuffled_targets,
                                       "final_loss": history[-1]["loss"] if history else None})
        self._say(f"✅ frozen world model saved to {stem}.dtwt")
        return stem

    # ---- policy stages -----------------------------------------------------

    def train_stage1(self, dataset: EpisodeDataset, wm_ckpt: Optional[Union[str, Path]] = None,
                     resume: bool = False, stop_at_step: Optional[int] = None) -> Path:
        world_model = load_world_model(wm_ckpt) if wm_ckpt else None
        policy = build_policy(self.cfg, world_model)
        train_ds, _ = self._views(dataset)
        mean, std = action_statistics(train_ds)
        policy.normalizer.fit(mean, std)
        return self._fit(policy, dataset, TrainConfig.from_run_config(self.cfg, "1"), wm_ckpt, resume, stop_at_step)

    def train_stage2(self, dataset: EpisodeDataset, stage1_ckpt: Optional[Union[str, Path]],
                     wm_ckpt: Optional[Union[str, Path]], resume: bool = False,
                     stop_at_step: Optional[int] = None) -> Path:
        for label, path in (("stage-1", stage1_ckpt), ("world model", wm_ckpt)):
            if not path or not Path(path).with_suffix(".dtwt").exists():
                raise run_config.ConfigError(f"stage 2 needs a {label} checkpoint (got {path})")
        world_model = load_world_model(wm_ckpt)
        if not world_model.frozen:
            raise run_config.ConfigError(f"{wm_ckpt} is not a frozen world model checkpoint")
        policy = load_policy(stage1_ckpt, world_model)
        return self._fit(policy, dataset, TrainConfig.from_run_config(self.cfg, "2"), wm_ckpt, resume, stop_at_step)

    def _optimizer(self, policy: DreamTacPolicy, tcfg: TrainConfig) -> AdamW:
        main, adapter = policy.trainable_groups(tcfg.stage)
        groups = [{"params": main, "lr": tcfg.lr, "weight_decay": tcfg.weight_decay, "base_lr": tcfg.lr}]
        if adapter:
            groups.append({"params": adapter, "lr": tcfg.adapter_lr, "weight_decay": tcfg.adapter_weight_decay,
                           "base_lr": tcfg.adapter_lr})
        return AdamW(groups, lr=tcfg.lr, weight_decay=tcfg.weight_decay)

    def _epoch_batches(self, index: List[Tuple[int, int]], epoch: int, tcfg: TrainConfig) -> List[List[Tuple[int, int]]]:
        order = CounterRng(tcfg.seed, (epoch, 9)).permutation(len(index))
        batches = [[index[i] for i in order[start:start + tcfg.batch_size]]
                   for start in range(0, len(order), tcfg.batch_size)]
        # in-batch negatives need two samples
        batches = [b for b in batches if len(b) >= 2]
        if tcfg.max_steps_per_epoch > 0:
            batches = batches[:tcfg.max_steps_per_epoch]
        return batches

    def _save_resume(self, stem: Path, policy: DreamTacPolicy, optimizer: AdamW, position: dict) -> None:
        tensors = {name: value for name, value in policy.state_dict().items() if not name.startswith("world_model.")}
        names = {id(p): name for name, p in policy.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                state = optimizer.state.get(param)
                if state:
                    tensors[f"optim.{names[id(param)]}.exp_avg"] = state["exp_avg"]
                    tensors[f"optim.{names[id(param)]}.exp_avg_sq"] = state["exp_avg_sq"]
                    tensors[f"optim.{names[id(param)]}.step"] = torch.as_tensor(state["step"], dtype=torch.float32)
        save_parameters(stem.with_suffix(".dtwt"), tensors)
        position = dict(position, step_count=optimizer.step_count, config_hash=self.config_hash)
        stem.with_suffix(".json").write_text(json.dumps(position, indent=2, sort_keys=True))

    def _load_resume(self, stem: Path, policy: DreamTacPolicy, optimizer: AdamW) -> dict:
        tensors = load_parameters(stem.with_suffix(".dtwt"))
        position = json.loads(stem.with_suffix(".json").read_text())
        params = dict(policy.named_parameters())
        with torch.no_grad():
            for name, value in policy.state_dict().items():
                if name in tensors:
                    value.copy_(torch.from_numpy(tensors[name]))
        for name, param in params.items():
            key = f"optim.{name}"
            if f"{key}.exp_avg" in tensors:
                optimizer.state[param] = {
                    "step": torch.tensor(float(tensors[f"{key}.step"])),
                    "exp_avg": torch.from_numpy(tensors[f"{key}.exp_avg"]).clone(),
                    "exp_avg_sq": torch.from_numpy(tensors[f"{key}.exp_avg_sq"]).clone(),
                }
        optimizer.step_count = int(position["step_count"])
        return position

    @torch.no_grad()
    def _validate(self, policy: DreamTacPolicy, val_ds: EpisodeDataset, tcfg: TrainConfig) -> Optional[float]:
        if len(val_ds) == 0:
            return None
        policy.eval()
        index = val_ds.sample_index()
        losses = []
        for start in range(0, len(index), tcfg.batch_size):
            batch = load_batch(val_ds, index[start:start + tcfg.batch_size], tcfg.chunk_h, tcfg.horizon_n,
                               self.cfg["sensor_half_extents"], self.cfg["patch_px"])
            out = policy.think_dream_act(ObsBatch.from_batch(batch), tcfg.stage == "2" and not tcfg.disable_dream)
            targets = policy.normalizer.normalize(batch.actions)
            chunk = out.a_final if tcfg.stage == "2" else out.a_draft
            losses.append(float(action_loss(chunk, targets)) * len(batch))
        return sum(losses) / len(index)

    def _fit(self, policy: DreamTacPolicy, dataset: EpisodeDataset, tcfg: TrainConfig,
             wm_ckpt: Optional[Union[str, Path]], resume: bool, stop_at_step: Optional[int]) -> Path:
        stage = tcfg.stage
        policy.use_dream = not tcfg.disable_dream
        train_ds, val_ds = self._views(dataset)
        index = train_ds.sample_index()
        optimizer = self._optimizer(policy, tcfg)
        steps_per_epoch = len(self._epoch_batches(index, 0, tcfg))
        if steps_per_epoch == 0:
            raise ValueError("training set yields no batch of at least two samples")
        total_steps = steps_per_epoch * tcfg.epochs
        resume_stem = self.out_dir / f"stage{stage}_resume"
        start_epoch, start_batch, global_step = 0, 0, 0
        if resume:
            if not resume_stem.with_suffix(".dtwt").exists():
                raise run_config.ConfigError(f"nothing to resume: {resume_stem}.dtwt not found")
            position = self._load_resume(resume_stem, policy, optimizer)
            start_epoch, start_batch, global_step = position["epoch"], position["batch"], position["global_step"]
            self._say(f"🔄 resuming stage {stage} at step {global_step}")

        wm_digest = policy.world_model_digest()
        metrics_path = self.out_dir / f"metrics_stage{stage}.csv"
        if not resume or not metrics_path.exists():
            with open(metrics_path, "w", newline="") as handle:
                csv.writer(handle).writerow(METRIC_COLUMNS)

        snapshot_steps = set()
        if stage == "2" and tcfg.snapshots > 0 and not tcfg.disable_dream:
            snapshot_steps = {round(i * total_steps / tcfg.snapshots) for i in range(tcfg.snapshots + 1)}
            (self.out_dir / "snapshots").mkdir(exist_ok=True)

        val_names = list(val_ds.episode_names)

        def snapshot(step: int) -> None:
            if step in snapshot_steps:
                stem = self.out_dir / "snapshots" / f"stage2_step{step:06d}"
                save_policy(policy, stem, dict(self._meta("2", wm_ckpt, val_names), step=step))

        best_val = float("inf")
        self._say(f"🔄 stage {stage}: {len(train_ds)} train / {len(val_ds)} val episodes, "
                  f"{steps_per_epoch} steps per epoch")
        if global_step == 0:
            snapshot(0)
        for epoch in range(start_epoch, tcfg.epochs):
            policy.train()
            batches = self._epoch_batches(index, epoch, tcfg)
            progress = tqdm(batches, desc=f"stage {stage} epoch {epoch + 1}/{tcfg.epochs}", disable=not self.verbose)
            epoch_losses = []
            for b, chunk in enumerate(progress):
                if epoch == start_epoch and b < start_batch:
                    continue
                factor = lr_factor(global_step, total_steps, tcfg.warmup_steps, tcfg.lr_schedule)
                for group in optimizer.param_groups:
                    group["lr"] = group["base_lr"] * factor
                policy.noise.set_step(global_step)
                batch = load_batch(train_ds, chunk, tcfg.chunk_h, tcfg.horizon_n, self.cfg["sensor_half_extents"],
                                   self.cfg["patch_px"])
                total, terms = compute_losses(policy, batch, tcfg, self.hsa_cfg,
                                              CounterRng(tcfg.seed, (global_step, 13)))
                optimizer.zero_grad()
                total.backward()
                try:
                    optimizer.step()
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"step {global_step}: {exc}; losses {terms}") from exc
                terms.update(step=global_step, lr=optimizer.param_groups[0]["lr"])
                with open(metrics_path, "a", newline="") as handle:
                    csv.writer(handle).writerow([terms[c] for c in METRIC_COLUMNS])
                epoch_losses.append(terms["loss_total"])
                progress.set_postfix(loss=f"{terms['loss_total']:.4f}", hsa_w=f"{terms['hsa_w']:.3f}",
                                     loss_w=f"{terms['loss_w']:.4f}")
                if self.verbose and global_step % max(1, tcfg.log_every) == 0:
                    tqdm.write(f"📉 step {global_step}: total={terms['loss_total']:.5f} "
                               f"draft={terms['loss_action_draft']:.5f} final={terms['loss_action_final']:.5f} "
                               f"hsa_w={terms['hsa_w']:.4f} hsa_tp={terms['hsa_tp']:.4f} "
                               f"skipped_w={terms['skipped_w']} skipped_tp={terms['skipped_tp']} "
                               f"loss_w={terms['loss_w']:.5f}")
                global_step += 1
                snapshot(global_step)
                if stop_at_step is not None and global_step >= stop_at_step:
                    self._save_resume(resume_stem, policy, optimizer,
                                      {"epoch": epoch, "batch": b + 1, "global_step": global_step})
                    self._check_frozen(policy, wm_digest)
                    self._say(f"⚠️ stopped at step {global_step}; resume state in {resume_stem}.dtwt")
                    return resume_stem
            progress.close()
            val_loss = self._validate(policy, val_ds, tcfg)
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            val_text = "n/a" if val_loss is None else f"{val_loss:.4f}"
            self._say(f"📉 stage {stage} epoch {epoch + 1:02d} | train loss {train_loss:.4f} | val loss {val_text}")
            self._save_resume(resume_stem, policy, optimizer, {"epoch": epoch + 1, "batch": 0,
                                                               "global_step": global_step})
            if val_loss is not None and val_loss < best_val:
                best_val = val_loss
                save_policy(policy, self.out_dir / f"stage{stage}_best", self._meta(stage, wm_ckpt, val_names))

        self._check_frozen(policy, wm_digest)
        meta = self._meta(stage, wm_ckpt, val_names)
        snapshots = sorted(str(p.with_suffix("")) for p in (self.out_dir / "snapshots").glob("stage2_step*.dtwt"))
        meta.update(snapshots=snapshots, steps=global_step, best_val=None if best_val == float("inf") else best_val)
        stem = self.out_dir / f"stage{stage}"
        save_policy(policy, stem, meta)
        self._say(f"✅ stage {stage} finished after {global_step} steps; checkpoint {stem}.dtwt")
        return stem

    def _meta(self, stage: str, wm_ckpt, val_names: Sequence[str]) -> dict:
        return {"stage": stage, "config_hash": self.config_hash, "wm_checkpoint": _path_or_none(wm_ckpt),
                "val_episodes": list(val_names)}

    @staticmethod
    def _check_frozen(policy: DreamTacPolicy, digest: str) -> None:
        if policy.world_model_digest() != digest:
            raise FrozenWeightsMutatedError("tactile world model weights changed during policy training")


def _path_or_none(path) -> Optional[str]:
    return str(path) if path else None


def train_pipeline(dataset: EpisodeDataset, cfg: dict, out_dir: Union[str, Path],
                   wm_ckpt: Optional[Union[str, Path]] = None, verbose: bool = True) -> Path:
    """World model (unless given) -> Stage 1 -> Stage 2; returns the final policy checkpoint."""
    trainer = Trainer(cfg, out_dir, verbose)
    if wm_ckpt is None:
        wm_ckpt = trainer.pretrain_wm(dataset)
    stage1 = trainer.train_stage1(dataset, wm_ckpt)
    return trainer.train_stage2(dataset, stage1, wm_ckpt)


def _aggregate(rates: List[float]) -> Tuple[float, Optional[float]]:
    if not rates:
        return float("nan"), float("nan")
    return float(np.mean(rates)), seed_std(rates)


def run_ablation(
    grid: Sequence[Dict],
    base_cfg: dict,
    dataset: EpisodeDataset,
    out_dir: Union[str, Path],
    wm_ckpt: Optional[Union[str, Path]] = None,
    tasks: Optional[Sequence[str]] = None,
    verbose: bool = True,
) -> List[Dict]:
    """
    Train and evaluate every grid entry for every seed in `eval_seeds`.

    Args:
        grid: entries like {"name": "full"} or {"name": "full", "wm_size": "large"};
            a name from ABLATIONS contributes its flags, other keys are config overrides
        base_cfg: resolved run config
        dataset: full demonstration dataset
        out_dir: per-run subdirectories and ablation.csv are written here
        wm_ckpt: world model shared by runs whose wm_size matches it
        tasks: tasks to evaluate (defaults to the config's tasks)

    Returns:
        One row per (grid entry, task) with success-rate mean and std over seeds
    """
    if not grid:
        raise ValueError("ablation grid is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = list(tasks or base_cfg["tasks"])
    world_models: Dict[str, Path] = {}
    if wm_ckpt:
        world_models[load_world_model(wm_ckpt).config.size] = Path(wm_ckpt)
    rows = []
    for entry in grid:
        name = entry.get("name", "full")
        overrides = dict(ABLATIONS.get(name, {}))
        overrides.update({k: v for k, v in entry.items() if k != "name"})
        label = name + "".join(f"_{k}-{v}" for k, v in sorted(entry.items()) if k != "name")
        rates: Dict[str, List[float]] = {task: [] for task in tasks}
        failed, errors = 0, []
        for seed in base_cfg["eval_seeds"]:
            try:
                cfg = run_config.validate({**base_cfg, **overrides, "seed": seed})
                run_dir = out_dir / f"{label}_seed{seed}"
                size = cfg["wm_size"]
                if size not in world_models:
                    world_models[size] = Trainer(cfg, out_dir / f"wm_{size}", verbose).pretrain_wm(dataset)
                ckpt = train_pipeline(dataset, cfg, run_dir, world_models[size], verbose)
                for task in tasks:
                    report = evaluate(ckpt, task, cfg["eval_episodes"], [seed], workers=cfg["workers"],
                                      max_steps=cfg["max_episode_steps"], verbose=verbose)
                    rates[task].append(report.sr_mean)
            except Exception as exc:
                failed += 1
                errors.append(f"seed {seed}: {exc}")
                print(f"❌ ablation run {label} seed {seed} failed: {exc}")
        for task in tasks:
            mean, std = _aggregate(rates[task])
            rows.append({"variant": label, "task": task, "overrides": json.dumps(overrides, sort_keys=True),
                         "sr_mean": mean, "sr_std": std, "runs": len(rates[task]), "failed": failed,
                         "error": "; ".join(errors)})
    with open(out_dir / "ablation.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    if verbose:
        print(f"✅ ablation table with {len(rows)} rows written to {out_dir / 'ablation.csv'}")
    return rows


def read_metrics(path: Union[str, Path]) -> List[Dict[str, float]]:
    with open(path, newline="") as handle:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(handle)]


if __name__ == "__main__":
    print(json.dumps(TrainConfig.from_run_config(run_config.defaults(), "2").__dict__, indent=2))
