"""
Closed-loop evaluation and the experiment reports built on it: success-rate
statistics, dream quality, heatmap series, prediction strips, the data
scaling curve and the numeric acceptance checks.
"""

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

import simworld
from datastore import EpisodeDataset, clip_index, load_batch, subset
from diffcore import module_digest
from encoders import ObsBatch
from forecaster import dream_cosine, forecasting_loss, null_dream, oracle_dream
from policy import DreamTacPolicy, load_policy
from worldmodel import HEATMAP_SCALE, heatmap_export, heatmap_grid, wm_embed

EVAL_SEED_BASE = 1_000_000  # evaluation episodes never reuse demonstration seeds
SEED_STRIDE = 10_000
SLIP_THRESHOLD = 0.0002  # m of grasp-offset change in one step
EXPERT = "expert"
MIN_COSINE_GAIN = 0.3
RANDOM_POLICY_CEILING = 5.0


@dataclass
class EpisodeTrace:
    seed: int
    success: bool
    steps: int
    final_error_mm: float
    slip_events: int


@dataclass
class EvalReport:
    """
    Success rates in percent. `per_seed` holds one rate per evaluation seed;
    `sr_std` is their sample standard deviation, or None with fewer than two
    seeds.
    """

    task: str
    policy: str
    pass_name: str
    seeds: List[int]
    n_episodes: int
    per_seed: List[float]
    sr_mean: float
    sr_std: Optional[float]
    traces: List[EpisodeTrace] = field(default_factory=list)
    config_hash: str = ""
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        data = asdict(self)
        if not timing:
            data.pop("wall_clock")
        return data

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def seed_std(rates: Sequence[float]) -> Optional[float]:
    """Sample standard deviation across seeds; None when there are fewer than two."""
    if len(rates) < 2:
        return None
    return float(np.std(rates, ddof=1))


def format_rate(mean: float, std: Optional[float]) -> str:
    spread = "n/a" if std is None else f"{std:.1f}"
    return f"{mean:.1f} ± {spread}%"


def episode_seed(eval_seed: int, episode: int) -> int:
    return EVAL_SEED_BASE + eval_seed * SEED_STRIDE + episode


def final_error_mm(state: simworld.WorldState) -> float:
    """Peg: tip-to-hole lateral distance. Tool: lateral lean of the tool top."""
    if state.task == "peg_in_hole":
        return float(np.linalg.norm(state.held_bottom[:2] - state.target_xy) * 1000.0)
    return float(simworld.TOOL_HEIGHT * np.linalg.norm(state.tilt) * 1000.0)


class PolicyActor:
    """Receding-horizon chunks from a policy; optionally records each inference."""

    def __init__(self, policy: DreamTacPolicy, pass_name: str = "final"):
        self.policy = policy
        self.pass_name = pass_name
        self.records: List[dict] = []
        self.log_inference = False

    def __call__(self, observation: simworld.Observation, state: simworld.WorldState) -> np.ndarray:
        chunk, record = self.policy.predict_chunk(observation, self.pass_name)
        if self.log_inference:
            self.records.append(dict(record, seed=state.seed, step=state.step_index))
        return chunk


class ExpertActor:
    def __init__(self, privileged: bool = True):
        self.privileged = privileged
        self.records: List[dict] = []

    def __call__(self, observation: simworld.Observation, state: simworld.WorldState) -> np.ndarray:
        return simworld.scripted_expert(state, self.privileged)[None]


def rollout(actor: Callable, task: str, seed: int, max_steps: int = simworld.DEFAULT_MAX_STEPS) -> EpisodeTrace:
    """Run one episode, executing every chunk step before replanning."""
    env = simworld.ContactEnv(task, max_steps)
    observation = env.reset(seed)
    done = False
    slips = 0
    while not done:
        chunk = np.asarray(actor(observation, env.state))
        for action in chunk:
            before = env.state.grasp_offset.copy()
            observation, done, _ = env.step(simworld.clip_action(action))
            if np.linalg.norm(env.state.grasp_offset - before) > SLIP_THRESHOLD:
                slips += 1
            if done:
                break
    state = env.state
    return EpisodeTrace(int(seed), bool(state.success), int(state.step_index), final_error_mm(state), slips)


def _rollout_job(args) -> Tuple[EpisodeTrace, List[dict]]:
    actor, task, seed, max_steps = args
    torch.set_num_threads(1)
    actor.records = []
    trace = rollout(actor, task, seed, max_steps)
    return trace, actor.records


def _resolve_actor(policy_or_ckpt, pass_name: str) -> Tuple[Callable, str, str]:
    if isinstance(policy_or_ckpt, str) and policy_or_ckpt.startswith(EXPERT):
        return ExpertActor(privileged=policy_or_ckpt == EXPERT), policy_or_ckpt, ""
    if isinstance(policy_or_ckpt, DreamTacPolicy):
        return PolicyActor(policy_or_ckpt, pass_name), "in-memory", ""
    stem = Path(policy_or_ckpt)
    meta_path = stem.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return PolicyActor(load_policy(stem), pass_name), str(stem), meta.get("config_hash", "")


def evaluate(
    policy_or_ckpt,
    task: str,
    n_episodes: int = 100,
    seeds: Sequence[int] = (0, 1, 2),
    pass_name: str = "final",
    workers: int = 1,
    max_steps: int = simworld.DEFAULT_MAX_STEPS,
    inference_log: Optional[Union[str, Path]] = None,
    verbose: bool = True,
) -> EvalReport:
    """
    Closed-loop success rate of a policy (or the scripted expert).

    Args:
        policy_or_ckpt: DreamTacPolicy, checkpoint stem, "expert" or "expert-blind"
        task: simulator task
        n_episodes: episodes per evaluation seed
        seeds: evaluation seeds; each maps to a disjoint block of episode seeds
        pass_name: execute "final" (refined) or "draft" chunks
        workers: parallel rollout processes, each with its own policy copy
        max_steps: episode cap
        inference_log: optional jsonl path for per-step inference records
        verbose: progress output

    Returns:
        EvalReport
    """
    simworld.task_index(task)
    if n_episodes < 1 or not seeds:
        raise ValueError("need at least one episode and one seed")
    actor, label, cfg_hash = _resolve_actor(policy_or_ckpt, pass_name)
    if inference_log is not None and isinstance(actor, PolicyActor):
        actor.log_inference = True
    started = time.perf_counter()
    jobs = [(actor, task, episode_seed(s, i), max_steps) for s in seeds for i in range(n_episodes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_rollout_job, jobs), total=len(jobs), desc=f"eval {task}",
                                disable=not verbose))
    else:
        torch_threads = torch.get_num_threads()
        results = [_rollout_job(job) for job in tqdm(jobs, desc=f"eval {task}", disable=not verbose)]
        torch.set_num_threads(torch_threads)
    traces = [trace for trace, _ in results]
    per_seed = []
    for k, _ in enumerate(seeds):
        block = traces[k * n_episodes:(k + 1) * n_episodes]
        per_seed.append(100.0 * sum(t.success for t in block) / n_episodes)
    if inference_log is not None:
        with open(inference_log, "w") as handle:
            for _, records in results:
                for record in records:
                    handle.write(json.dumps(record) + "\n")
    report = EvalReport(
        task=task, policy=label, pass_name=pass_name, seeds=list(seeds), n_episodes=n_episodes, per_seed=per_seed,
        sr_mean=float(np.mean(per_seed)), sr_std=seed_std(per_seed),
        traces=traces, config_hash=cfg_hash, wall_clock=time.perf_counter() - started,
    )
    if verbose:
        print(f"✅ {task} [{pass_name}] {format_rate(report.sr_mean, report.sr_std)} over {len(seeds)} x {n_episodes}")
    return report


def checkpoint_digest(stem: Union[str, Path]) -> str:
    """Digest of a policy checkpoint's weights (evaluation must leave it unchanged)."""
    return module_digest(load_policy(stem))


def _held_out(policy_ckpt: Union[str, Path], dataset: EpisodeDataset) -> EpisodeDataset:
    meta_path = Path(policy_ckpt).with_suffix(".json")
    names = json.loads(meta_path.read_text()).get("val_episodes") if meta_path.exists() else None
    names = [n for n in (names or []) if n in dataset.episode_names]
    return dataset.view(names) if names else dataset


def _as_policy(policy_or_ckpt) -> DreamTacPolicy:
    return policy_or_ckpt if isinstance(policy_or_ckpt, DreamTacPolicy) else load_policy(policy_or_ckpt)


@torch.no_grad()
def dream_quality(policy_or_ckpt, dataset: EpisodeDataset, horizon: int, max_samples: int = 256,
                  batch_size: int = 32) -> Dict[str, object]:
    """
    Held-out agreement between H_dream and the frozen embedding of the actual
    t+N tactile frame.

    Returns:
        dict with mean/std cosine of predicted dreams, the oracle and null
        references, and L_W of the forecaster against a copy-forward baseline
    """
    policy = _as_policy(policy_or_ckpt).eval()
    data = _held_out(policy_or_ckpt, dataset) if not isinstance(policy_or_ckpt, DreamTacPolicy) else dataset
    index = clip_index(data, 1, horizon)[:max_samples]
    if not index:
        raise ValueError(f"no held-out step has a frame {horizon} steps ahead")
    cosines, oracle, loss_pred, loss_copy = [], [], [], []
    for start in range(0, len(index), batch_size):
        chunk = index[start:start + batch_size]
        batch = load_batch(data, chunk, policy.chunk_h, horizon)
        out = policy.think_dream_act(ObsBatch.from_batch(batch))
        target = wm_embed(policy.world_model, batch.future_tactile)
        current = wm_embed(policy.world_model, batch.tactile)
        cosines.append(dream_cosine(out.h_dream, target))
        oracle.append(dream_cosine(oracle_dream(target), target))
        loss_pred.append(float(forecasting_loss(out.h_dream, target)) * len(chunk))
        loss_copy.append(float(forecasting_loss(current.patches, target)) * len(chunk))
    cos = torch.cat(cosines)
    null = dream_cosine(null_dream(policy.world_model.num_patches, policy.world_model.config.dim), target)
    return {
        "samples": len(index),
        "cosine_mean": float(cos.mean()),
        "cosine_std": float(cos.std()) if len(cos) > 1 else 0.0,
        "oracle_cosine": float(torch.cat(oracle).mean()),
        "null_cosine": "n/a" if null is None else float(null.mean()),
        "loss_w": sum(loss_pred) / len(index),
        "loss_w_copy_forward": sum(loss_copy) / len(index),
    }


def _pick_samples(dataset: EpisodeDataset, horizon: int, count: int) -> List[Tuple[int, int]]:
    index = clip_index(dataset, 1, horizon)
    if not index:
        raise ValueError(f"no step has a frame {horizon} steps ahead")
    picks = np.linspace(0, len(index) - 1, num=min(count, len(index))).round().astype(int)
    return [index[i] for i in picks]


@torch.no_grad()
def heatmap_series(snapshots: Sequence[Union[str, Path]], dataset: EpisodeDataset, horizon: int,
                   out_dir: Union[str, Path], samples: int = 8) -> List[float]:
    """
    For each forecaster snapshot, export the H_dream heatmap of the first
    held-out sample and return the mean absolute error between dream and
    true-future heatmaps averaged over `samples` held-out steps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not snapshots:
        raise ValueError("no snapshots to export")
    data = _held_out(snapshots[-1], dataset)
    maes = []
    truth_written = False
    for k, stem in enumerate(snapshots):
        policy = load_policy(stem).eval()
        picks = _pick_samples(data, horizon, samples)
        batch = load_batch(data, picks, policy.chunk_h, horizon)
        out = policy.think_dream_act(ObsBatch.from_batch(batch))
        target = wm_embed(policy.world_model, batch.future_tactile)
        errors = []
        for i in range(len(picks)):
            _, dreamed = heatmap_grid(out.h_dream.patches[i])
            _, truth = heatmap_grid(target.patches[i])
            errors.append(float(np.abs(dreamed - truth).mean()))
        heatmap_export(out.h_dream.patches[0], out_dir / f"dream_{k:02d}")
        if not truth_written:
            heatmap_export(target.patches[0], out_dir / "truth")
            truth_written = True
        maes.append(float(np.mean(errors)))
    with open(out_dir / "series.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["snapshot", "checkpoint", "mae"])
        for k, (stem, mae) in enumerate(zip(snapshots, maes)):
            writer.writerow([k, str(stem), repr(mae)])
    return maes


@torch.no_grad()
def prediction_strip(policy_or_ckpt, dataset: EpisodeDataset, position: int, horizon: int,
                     out_dir: Union[str, Path]) -> Path:
    """
    Dream vs true-future heatmaps for every step of one episode, side by
    side, plus strip.csv of per-step cosine similarity.
    """
    policy = _as_policy(policy_or_ckpt).eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episode = dataset.episode(position)
    steps = list(range(episode.length))
    batch = load_batch(dataset, [(position, t) for t in steps], policy.chunk_h, horizon)
    out = policy.think_dream_act(ObsBatch.from_batch(batch))
    target = wm_embed(policy.world_model, batch.future_tactile)
    cosine = dream_cosine(out.h_dream, target)
    cells = []
    for t in steps:
        _, dreamed = heatmap_grid(out.h_dream.patches[t])
        _, truth = heatmap_grid(target.patches[t])
        gap = np.ones((dreamed.shape[0], 1))
        cells.append(np.concatenate([dreamed, gap, truth], axis=1))
        cells.append(np.zeros((1, cells[-1].shape[1])))
    strip = np.concatenate(cells[:-1], axis=0)
    pixels = np.round(strip * 255.0).astype(np.uint8)
    image = Image.fromarray(np.stack([pixels] * 3, axis=-1))
    image = image.resize((strip.shape[1] * HEATMAP_SCALE, strip.shape[0] * HEATMAP_SCALE), Image.Resampling.NEAREST)
    image_path = out_dir / f"strip_{episode.name}.ppm"
    image.save(image_path, format="PPM")
    with open(out_dir / f"strip_{episode.name}.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "cosine"])
        for t in steps:
            writer.writerow([t, repr(float(cosine[t]))])
    return image_path


def scaling_study(
    fractions: Sequence[float],
    cfg: dict,
    dataset: EpisodeDataset,
    train_fn: Callable[[EpisodeDataset, dict, Path], Path],
    out_dir: Union[str, Path],
    task: str = "peg_in_hole",
    verbose: bool = True,
) -> List[Dict[str, float]]:
    """
    Train on nested data fractions and evaluate each; writes curve.csv.

    Args:
        fractions: subset fractions (each must be an allowed fraction)
        cfg: resolved run config; eval_seeds are the training seeds
        dataset: full dataset
        train_fn: (dataset, cfg, run_dir) -> policy checkpoint stem
        out_dir: run directories and curve.csv
        task: evaluation task
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fraction in fractions:
        subset(dataset, fraction, cfg["data_seed"])
    rows = []
    for fraction in fractions:
        rates = []
        for seed in cfg["eval_seeds"]:
            run_cfg = dict(cfg, data_fraction=fraction, seed=seed)
            ckpt = train_fn(dataset, run_cfg, out_dir / f"fraction_{fraction:.1f}_seed{seed}")
            report = evaluate(ckpt, task, cfg["eval_episodes"], [seed], workers=cfg["workers"],
                              max_steps=cfg["max_episode_steps"], verbose=verbose)
            rates.append(report.sr_mean)
        rows.append({"fraction": float(fraction), "sr_mean": float(np.mean(rates)),
                     "sr_std": seed_std(rates)})
    with open(out_dir / "curve.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["fraction", "sr_mean", "sr_std"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def check_ablation_ordering(rows: Sequence[Dict], task: str = "peg_in_hole") -> Tuple[bool, List[str]]:
    """full > dream_only > hsa_only > vision_only, full - hsa_only >= 10 and full - best ablation >= 5 points."""
    rates = {row["variant"]: float(row["sr_mean"]) for row in rows if row["task"] == task}
    needed = ("full", "dream_only", "hsa_only", "vision_only")
    missing = [name for name in needed if name not in rates or math.isnan(rates[name])]
    if missing:
        return False, [f"missing ablation results: {', '.join(missing)}"]
    problems = []
    for better, worse in zip(needed, needed[1:]):
        if not rates[better] > rates[worse]:
            problems.append(f"expected {better} ({rates[better]:.1f}) > {worse} ({rates[worse]:.1f})")
    if rates["full"] - rates["hsa_only"] < 10.0:
        problems.append(f"full - hsa_only = {rates['full'] - rates['hsa_only']:.1f} < 10 points")
    best_ablation = max(rates[name] for name in needed[1:])
    if rates["full"] - best_ablation < 5.0:
        problems.append(f"full - best ablation = {rates['full'] - best_ablation:.1f} < 5 points")
    return not problems, problems


def check_scaling_curve(rows: Sequence[Dict]) -> Tuple[bool, List[str]]:
    """SR(100) >= SR(20) - 2 sigma and SR(100) - SR(60) < SR(60) - SR(20)."""
    points = {round(float(row["fraction"]), 1): row for row in rows}
    missing = [f for f in (0.2, 0.6, 1.0) if f not in points]
    if missing:
        return False, [f"missing fractions: {missing}"]
    low, mid, high = (float(points[f]["sr_mean"]) for f in (0.2, 0.6, 1.0))
    if points[0.2]["sr_std"] in (None, ""):
        return False, ["SR(20%) has no spread; the curve needs at least 2 seeds"]
    sigma = float(points[0.2]["sr_std"])
    problems = []
    if high < low - 2.0 * sigma:
        problems.append(f"SR(100%)={high:.1f} fell below SR(20%)={low:.1f} - 2 sigma")
    if not high - mid < mid - low:
        problems.append(f"no diminishing returns: {high - mid:.1f} >= {mid - low:.1f}")
    return not problems, problems


def check_dream_gain(init: Dict[str, object], trained: Dict[str, object],
                     min_gain: float = MIN_COSINE_GAIN) -> Tuple[bool, List[str]]:
    """Held-out dream cosine of the trained forecaster must beat its initial snapshot by `min_gain`."""
    gain = float(trained["cosine_mean"]) - float(init["cosine_mean"])
    if gain < min_gain:
        return False, [f"dream cosine improved by {gain:.3f} < {min_gain}"]
    return True, []


def check_random_floor(reports: Sequence[EvalReport], ceiling: float = RANDOM_POLICY_CEILING) -> Tuple[bool, List[str]]:
    """An untrained policy must stay at or below `ceiling` percent success on every task."""
    problems = [f"random policy reached {report.sr_mean:.1f}% on {report.task} (ceiling {ceiling:.0f}%)"
                for report in reports if report.sr_mean > ceiling]
    return not problems, problems


def check_heatmap_series(maes: Sequence[float], min_share: float = 0.8) -> Tuple[bool, List[str]]:
    """Heatmap MAE must not increase between consecutive snapshots in at least `min_share` of transitions."""
    if len(maes) < 2:
        return False, ["need at least two snapshots"]
    steps = len(maes) - 1
    decreasing = sum(1 for a, b in zip(maes, maes[1:]) if b <= a)
    required = math.ceil(min_share * steps)
    if decreasing < required:
        return False, [f"heatmap MAE decreased in {decreasing}/{steps} transitions (need {required})"]
    return True, []


if __name__ == "__main__":
    result = evaluate(EXPERT, "peg_in_hole", n_episodes=5, seeds=[0])
    print(f"✅ expert success {result.sr_mean:.0f}%")
