"""
Demonstration recording, on-disk episode format, dataset views and
minibatch assembly.

Layout of a dataset directory:

    manifest.json
    peg_in_hole_000000/
        meta.json
        tpv.dtep  wrist.dtep  tactile.dtep  proprio.dtep  action.dtep
        sensor_pose.dtep  wrist_camera.dtep  grasp_offset.dtep  wrench.dtep

Every .dtep file holds one modality for the whole episode (time first):
a 16-byte header (magic "DTEP", u16 rank, 5 x u16 dims) followed by
little-endian f32 values. Steps are contiguous, so readers memory-map the
file and page in one step at a time; `read_step` reads a single step with
one seek.
"""

import json
import struct
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

import simworld
from diffcore import CounterRng
from geometry import CameraModel, Pose, bbox_token_mask, sensor_bbox
import run_config

TENSOR_MAGIC = b"DTEP"
HEADER_BYTES = 16
MAX_RANK = 5
SIM_VERSION = "contact-sim-1"
ALLOWED_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
MIN_EXPERT_RATE = 0.5
MIN_ATTEMPTS_FOR_ABORT = 4
MODALITIES = ("tpv", "wrist", "tactile", "proprio", "action", "sensor_pose", "wrist_camera",
              "grasp_offset", "wrench")
DEFAULT_CACHE_EPISODES = 32

Expert = Callable[[simworld.WorldState], np.ndarray]


class ExpertFailureError(RuntimeError):
    """The scripted expert succeeds too rarely to build a dataset."""


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def write_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    if array.ndim > MAX_RANK:
        raise ValueError(f"rank {array.ndim} exceeds {MAX_RANK}")
    dims = list(array.shape) + [0] * (MAX_RANK - array.ndim)
    if max(dims, default=0) > 0xFFFF:
        raise ValueError(f"dimension too large for the tensor header: {array.shape}")
    with open(path, "wb") as handle:
        handle.write(TENSOR_MAGIC)
        handle.write(struct.pack("<H5H", array.ndim, *dims))
        handle.write(array.tobytes())


def read_header(path: Union[str, Path]) -> Tuple[int, ...]:
    """Shape stored in a DTEP header."""
    with open(path, "rb") as handle:
        header = handle.read(HEADER_BYTES)
    if len(header) != HEADER_BYTES or header[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a DTEP tensor file")
    rank, *dims = struct.unpack("<H5H", header[4:])
    return tuple(dims[:rank])


def read_tensor(path: Union[str, Path], mmap: bool = False) -> np.ndarray:
    """
    Load a DTEP file.

    Args:
        path: tensor file
        mmap: return a read-only memory map instead of an in-memory copy

    Returns:
        float32 array with the stored shape
    """
    shape = read_header(path)
    count = int(np.prod(shape)) if shape else 1
    if mmap and count > 0:
        return np.memmap(path, dtype="<f4", mode="r", offset=HEADER_BYTES, shape=shape)
    data = Path(path).read_bytes()[HEADER_BYTES:HEADER_BYTES + 4 * count]
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def read_step(path: Union[str, Path], t: int) -> np.ndarray:
    """Read step `t` (leading index) of a DTEP file without touching the other steps."""
    shape = read_header(path)
    if not shape or not 0 <= t < shape[0]:
        raise IndexError(f"step {t} out of range for {path} with shape {shape}")
    step_shape = shape[1:]
    count = int(np.prod(step_shape)) if step_shape else 1
    with open(path, "rb") as handle:
        handle.seek(HEADER_BYTES + 4 * count * t)
        data = handle.read(4 * count)
    return np.frombuffer(data, dtype="<f4").reshape(step_shape).copy()


@dataclass
class Episode:
    """One recorded demonstration; `arrays` maps modality -> [T, ...] float32."""

    task: str
    seed: int
    arrays: Dict[str, np.ndarray]
    success: bool
    meta: Dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return int(self.arrays["action"].shape[0])

    @property
    def name(self) -> str:
        return episode_name(self.task, self.seed)

    def observation(self, t: int) -> simworld.Observation:
        return simworld.Observation(
            tpv=np.array(self.arrays["tpv"][t]),
            wrist=np.array(self.arrays["wrist"][t]),
            tactile=np.array(self.arrays["tactile"][t]),
            proprio=np.array(self.arrays["proprio"][t]),
            prompt_id=simworld.task_index(self.task),
            tpv_camera=CameraModel.from_dict(self.meta["tpv_camera"]),
            wrist_camera=CameraModel.from_vector(self.arrays["wrist_camera"][t]),
            sensor_pose=_pose_from_matrix(self.arrays["sensor_pose"][t]),
        )


def episode_name(task: str, seed: int) -> str:
    return f"{task}_{seed:06d}"


def _pose_from_matrix(matrix: np.ndarray) -> Pose:
    matrix = np.asarray(matrix, dtype=np.float64)
    rotation = matrix[:3, :3]
    # f32 storage: re-orthonormalise before the strict Pose check
    u, _, vt = np.linalg.svd(rotation)
    return Pose(u @ vt, matrix[:3, 3])


def run_expert_episode(task: str, seed: int, max_steps: int = simworld.DEFAULT_MAX_STEPS,
                       expert: Optional[Expert] = None) -> Episode:
    """Roll out the expert from reset(task, seed) and collect every (observation, action) pair."""
    expert = expert or simworld.scripted_expert
    state = simworld.reset(task, seed, max_steps)
    frames: Dict[str, List[np.ndarray]] = {name: [] for name in MODALITIES}
    tpv_camera = None
    done = False
    while not done:
        obs = simworld.render(state)
        action = simworld.clip_action(expert(state))
        tpv_camera = obs.tpv_camera
        frames["tpv"].append(obs.tpv)
        frames["wrist"].append(obs.wrist)
        frames["tactile"].append(obs.tactile)
        frames["proprio"].append(obs.proprio)
        frames["action"].append(action)
        frames["sensor_pose"].append(obs.sensor_pose.matrix())
        frames["wrist_camera"].append(obs.wrist_camera.as_vector())
        frames["grasp_offset"].append(state.grasp_offset)
        frames["wrench"].append(state.wrench)
        state, done, _ = simworld.step(state, action)
    arrays = {name: np.stack(values).astype(np.float32) for name, values in frames.items()}
    meta = {
        "task": task,
        "seed": int(seed),
        "steps": len(frames["action"]),
        "success": bool(state.success),
        "sim_version": SIM_VERSION,
        "source": "sim",
        "tpv_camera": tpv_camera.to_dict(),
    }
    return Episode(task, int(seed), arrays, bool(state.success), meta)


def write_episode(root: Union[str, Path], episode: Episode) -> Path:
    directory = Path(root) / episode.name
    directory.mkdir(parents=True, exist_ok=True)
    for name, array in episode.arrays.items():
        write_tensor(directory / f"{name}.dtep", array)
    (directory / "meta.json").write_text(json.dumps(episode.meta, indent=2, sort_keys=True))
    return directory


def read_episode(directory: Union[str, Path], mmap: bool = False) -> Episode:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    arrays = {name: read_tensor(directory / f"{name}.dtep", mmap) for name in MODALITIES}
    return Episode(meta["task"], int(meta["seed"]), arrays, bool(meta["success"]), meta)


def write_manifest(root: Union[str, Path], config_hash: str = "") -> dict:
    """Rebuild manifest.json from the episode directories on disk."""
    root = Path(root)
    tasks: Dict[str, dict] = {}
    for meta_path in sorted(root.glob("*/meta.json")):
        meta = json.loads(meta_path.read_text())
        entry = tasks.setdefault(meta["task"], {"count": 0, "frames": 0, "episodes": []})
        entry["count"] += 1
        entry["frames"] += int(meta["steps"])
        entry["episodes"].append({"name": meta_path.parent.name, "steps": int(meta["steps"]),
                                  "source": meta.get("source", "sim")})
    manifest = {
        "version": 1,
        "sim_version": SIM_VERSION,
        "config_hash": config_hash,
        "fractions": list(ALLOWED_FRACTIONS),
        "tasks": tasks,
        "total": sum(entry["count"] for entry in tasks.values()),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _attempt(args: Tuple[str, int, int, Optional[Expert]]) -> Episode:
    task, seed, max_steps, expert = args
    return run_expert_episode(task, seed, max_steps, expert)


def record_episodes(
    root: Union[str, Path],
    task: str,
    n: int,
    seed0: int = 0,
    expert: Optional[Expert] = None,
    max_steps: int = simworld.DEFAULT_MAX_STEPS,
    config_hash: str = "",
    workers: int = 1,
    verbose: bool = True,
) -> Path:
    """
    Record `n` successful expert demonstrations of `task` into `root`.

    Seeds are tried in order seed0, seed0+1, ...; failed rollouts are dropped
    and replaced by the next seed.

    Args:
        root: dataset directory (created if missing)
        task: simulator task name
        n: number of successful episodes to keep
        seed0: first seed to try
        expert: callable(state) -> action, defaults to the privileged scripted expert
        max_steps: episode cap
        config_hash: stored in episode metadata and the manifest
        workers: parallel rollout processes (results are consumed in seed order)
        verbose: show progress

    Returns:
        The dataset directory
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    simworld.task_index(task)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    kept = attempts = 0
    next_seed = seed0
    progress = tqdm(total=n, desc=f"recording {task}", disable=not verbose)
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        while kept < n:
            seeds = list(range(next_seed, next_seed + max(1, (n - kept) if executor else 1)))
            next_seed += len(seeds)
            jobs = [(task, seed, max_steps, expert) for seed in seeds]
            results = executor.map(_attempt, jobs) if executor else map(_attempt, jobs)
            for episode in results:
                attempts += 1
                if episode.success and kept < n:
                    episode.meta["config_hash"] = config_hash
                    write_episode(root, episode)
                    kept += 1
                    progress.update(1)
                if attempts >= MIN_ATTEMPTS_FOR_ABORT and kept / attempts < MIN_EXPERT_RATE:
                    raise ExpertFailureError(
                        f"expert succeeded on {kept}/{attempts} {task} episodes "
                        f"(seeds {seed0}..{seed0 + attempts - 1}); below the {MIN_EXPERT_RATE:.0%} floor"
                    )
    finally:
        progress.close()
        if executor:
            executor.shutdown()
    write_manifest(root, config_hash)
    if verbose:
        print(f"✅ recorded {kept} {task} episodes ({attempts} attempts) into {root}")
    return root


@dataclass
class Batch:
    """Stacked training samples; images are [B, H, W, 3] float32 in [0, 1]."""

    tpv: torch.Tensor
    wrist: torch.Tensor
    tactile: torch.Tensor
    proprio: torch.Tensor
    prompt: torch.Tensor
    actions: torch.Tensor
    future_tactile: torch.Tensor
    future_wrist: torch.Tensor
    tpv_bbox: torch.Tensor
    wrist_bbox: torch.Tensor
    tpv_mask: torch.Tensor
    wrist_mask: torch.Tensor
    index: List[Tuple[int, int]]

    def __len__(self) -> int:
        return int(self.actions.shape[0])


class EpisodeDataset:
    """
    Read-only view over (a subset of) the episodes of a dataset directory.
    Sample indices are (episode position, time step) pairs.

    Episodes are memory-mapped on first use and kept in a least-recently-used
    cache of at most `cache_size` episodes. Views made by `subset` and `split`
    share the cache, so the bound holds for the whole dataset.
    """

    def __init__(self, root: Union[str, Path], episode_names: Optional[Sequence[str]] = None,
                 cache_size: int = DEFAULT_CACHE_EPISODES):
        if cache_size < 1:
            raise ValueError(f"cache_size must be >= 1, got {cache_size}")
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        if episode_names is None:
            episode_names = [entry["name"] for task in sorted(self.manifest["tasks"])
                             for entry in self.manifest["tasks"][task]["episodes"]]
        self.episode_names = list(episode_names)
        self.cache_size = cache_size
        self._lengths = {entry["name"]: int(entry["steps"]) for task in self.manifest["tasks"].values()
                         for entry in task["episodes"]}
        self._cache: "OrderedDict[str, Episode]" = OrderedDict()

    def __len__(self) -> int:
        return len(self.episode_names)

    def episode(self, position: int) -> Episode:
        name = self.episode_names[position]
        if name in self._cache:
            self._cache.move_to_end(name)
            return self._cache[name]
        episode = read_episode(self.root / name, mmap=True)
        self._cache[name] = episode
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return episode

    def length(self, position: int) -> int:
        """Step count from the manifest, without opening the episode."""
        name = self.episode_names[position]
        if name not in self._lengths:
            return self.episode(position).length
        return self._lengths[name]

    def cached(self) -> List[str]:
        """Names of the episodes currently held, least recently used first."""
        return list(self._cache)

    def episodes_for_task(self, task: str) -> List[str]:
        return [name for name in self.episode_names if name.rsplit("_", 1)[0] == task]

    def tasks(self) -> List[str]:
        return sorted({name.rsplit("_", 1)[0] for name in self.episode_names})

    def sample_index(self) -> List[Tuple[int, int]]:
        return [(position, t) for position in range(len(self)) for t in range(self.length(position))]

    def view(self, names: Sequence[str]) -> "EpisodeDataset":
        sub = EpisodeDataset.__new__(EpisodeDataset)
        sub.root, sub.manifest, sub._cache = self.root, self.manifest, self._cache
        sub.cache_size, sub._lengths = self.cache_size, self._lengths
        sub.episode_names = list(names)
        return sub


def _task_permutation(names: List[str], task: str, seed: int) -> List[str]:
    order = CounterRng(seed, (simworld.task_index(task), 7)).permutation(len(names))
    return [names[i] for i in order]


def subset(dataset: EpisodeDataset, fraction: float, seed: int = 0) -> EpisodeDataset:
    """Stratified, nested episode-level subsample (same seed => 20% ⊂ 40% ⊂ ... ⊂ 100%)."""
    if not any(abs(fraction - allowed) < 1e-9 for allowed in ALLOWED_FRACTIONS):
        raise ValueError(f"fraction must be one of {ALLOWED_FRACTIONS}, got {fraction}")
    if abs(fraction - 1.0) < 1e-9:
        return dataset
    keep = set()
    for task in dataset.tasks():
        names = sorted(dataset.episodes_for_task(task))
        keep.update(_task_permutation(names, task, seed)[:_round_half_up(fraction * len(names))])
    return dataset.view([name for name in dataset.episode_names if name in keep])


def split(dataset: EpisodeDataset, val_fraction: float, seed: int = 0) -> Tuple[EpisodeDataset, EpisodeDataset]:
    """Per-task train/validation split by episode."""
    val = set()
    for task in dataset.tasks():
        names = sorted(dataset.episodes_for_task(task))
        count = _round_half_up(val_fraction * len(names))
        if val_fraction > 0 and len(names) >= 2:
            count = min(max(count, 1), len(names) - 1)
        val.update(_task_permutation(names, task, seed + 1)[:count])
    train_names = [name for name in dataset.episode_names if name not in val]
    val_names = [name for name in dataset.episode_names if name in val]
    return dataset.view(train_names), dataset.view(val_names)


def action_chunk(actions: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """Actions t..t+H-1, padded by repeating the final action."""
    last = actions.shape[0] - 1
    steps = np.minimum(np.arange(t, t + horizon), last)
    return np.asarray(actions[steps])


def step_bboxes(episode: Episode, t: int, half_extents: Sequence[float]):
    tpv_cam = CameraModel.from_dict(episode.meta["tpv_camera"])
    wrist_cam = CameraModel.from_vector(episode.arrays["wrist_camera"][t])
    sensor = _pose_from_matrix(episode.arrays["sensor_pose"][t])
    return sensor_bbox(tpv_cam, sensor, half_extents), sensor_bbox(wrist_cam, sensor, half_extents)


def load_batch(
    dataset: EpisodeDataset,
    indices: Sequence[Tuple[int, int]],
    H: int,
    N: int,
    half_extents: Sequence[float] = simworld.SENSOR_HALF_EXTENTS,
    patch_px: int = 8,
) -> Batch:
    """
    Assemble a training batch.

    Args:
        dataset: episode view
        indices: (episode position, time step) pairs
        H: action chunk length
        N: prediction horizon for the future tactile/wrist frame
        half_extents: sensor box half-extents used for bbox projection
        patch_px: image patch size for the bbox token masks

    Returns:
        Batch of torch tensors
    """
    if H < 1 or N < 1:
        raise ValueError(f"H and N must be >= 1, got H={H}, N={N}")
    if len(indices) == 0:
        raise ValueError("empty batch")
    columns: Dict[str, List[np.ndarray]] = {name: [] for name in (
        "tpv", "wrist", "tactile", "proprio", "prompt", "actions", "future_tactile", "future_wrist",
        "tpv_bbox", "wrist_bbox", "tpv_mask", "wrist_mask")}
    for position, t in indices:
        if not 0 <= position < len(dataset):
            raise IndexError(f"episode position {position} out of range (0..{len(dataset) - 1})")
        episode = dataset.episode(position)
        if not 0 <= t < episode.length:
            raise IndexError(f"time step {t} out of range for {episode.name} (length {episode.length})")
        future = min(t + N, episode.length - 1)
        tpv_box, wrist_box = step_bboxes(episode, t, half_extents)
        grid = (episode.arrays["tpv"].shape[1] // patch_px, episode.arrays["tpv"].shape[2] // patch_px)
        columns["tpv"].append(episode.arrays["tpv"][t])
        columns["wrist"].append(episode.arrays["wrist"][t])
        columns["tactile"].append(episode.arrays["tactile"][t])
        columns["proprio"].append(episode.arrays["proprio"][t])
        columns["prompt"].append(np.array(simworld.task_index(episode.task)))
        columns["actions"].append(action_chunk(episode.arrays["action"], t, H))
        columns["future_tactile"].append(episode.arrays["tactile"][future])
        columns["future_wrist"].append(episode.arrays["wrist"][future])
        columns["tpv_bbox"].append(tpv_box.as_array())
        columns["wrist_bbox"].append(wrist_box.as_array())
        columns["tpv_mask"].append(bbox_token_mask(tpv_box, grid, patch_px))
        columns["wrist_mask"].append(bbox_token_mask(wrist_box, grid, patch_px))

    def stack(name, dtype=torch.float32):
        return torch.as_tensor(np.stack([np.asarray(v) for v in columns[name]]), dtype=dtype)

    return Batch(
        tpv=stack("tpv"), wrist=stack("wrist"), tactile=stack("tactile"), proprio=stack("proprio"),
        prompt=stack("prompt", torch.long), actions=stack("actions"),
        future_tactile=stack("future_tactile"), future_wrist=stack("future_wrist"),
        tpv_bbox=stack("tpv_bbox"), wrist_bbox=stack("wrist_bbox"),
        tpv_mask=stack("tpv_mask", torch.bool), wrist_mask=stack("wrist_mask", torch.bool),
        index=list(indices),
    )


def clip_index(dataset: EpisodeDataset, k: int, N: int) -> List[Tuple[int, int]]:
    """Samples (episode, t) whose context [t-k+1..t] and target t+N lie inside the episode."""
    index = []
    for position in range(len(dataset)):
        length = dataset.length(position)
        index.extend((position, t) for t in range(k - 1, length - N))
    return index


def load_tactile_clips(dataset: EpisodeDataset, indices: Sequence[Tuple[int, int]], k: int,
                       N: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Context frames [B, k, 32, 32, 3] and target frames [B, 32, 32, 3] for world-model pretraining."""
    contexts, targets = [], []
    for position, t in indices:
        tactile = dataset.episode(position).arrays["tactile"]
        if t - k + 1 < 0 or t + N >= tactile.shape[0]:
            raise IndexError(f"clip ({position}, {t}) does not fit k={k}, N={N}")
        contexts.append(np.asarray(tactile[t - k + 1:t + 1]))
        targets.append(np.asarray(tactile[t + N]))
    return torch.as_tensor(np.stack(contexts)), torch.as_tensor(np.stack(targets))


def action_statistics(dataset: EpisodeDataset) -> Tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std of expert actions."""
    actions = np.concatenate([np.asarray(dataset.episode(p).arrays["action"]) for p in range(len(dataset))])
    return actions.mean(axis=0), actions.std(axis=0)


def record_dataset(root: Union[str, Path], cfg: dict, verbose: bool = True) -> EpisodeDataset:
    """Record every configured task using the run config's data keys."""
    digest = run_config.config_hash(cfg)
    for task in cfg["tasks"]:
        record_episodes(root, task, cfg["episodes_per_task"], cfg["data_seed"],
                        max_steps=cfg["max_episode_steps"], config_hash=digest,
                        workers=cfg["workers"], verbose=verbose)
    return EpisodeDataset(root, cache_size=cfg["cache_episodes"])


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        record_episodes(tmp, "peg_in_hole", 2)
        data = EpisodeDataset(tmp)
        batch = load_batch(data, data.sample_index()[:4], H=8, N=5)
        print(f"✅ batch of {len(batch)}: actions {tuple(batch.actions.shape)}, tpv {tuple(batch.tpv.shape)}")
