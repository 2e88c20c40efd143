"""
Tests for closed-loop evaluation, dream quality reports and the acceptance
checks.

Run with:
    pytest test_evalharness.py -v
"""

import csv
import json

import numpy as np
import pytest
import torch

import simworld
from datastore import clip_index, load_batch
from encoders import ObsBatch
from evalharness import (
    EXPERT,
    MIN_COSINE_GAIN,
    RANDOM_POLICY_CEILING,
    EpisodeTrace,
    EvalReport,
    ExpertActor,
    check_ablation_ordering,
    check_dream_gain,
    check_heatmap_series,
    check_random_floor,
    check_scaling_curve,
    checkpoint_digest,
    dream_quality,
    episode_seed,
    evaluate,
    final_error_mm,
    heatmap_series,
    prediction_strip,
    rollout,
    scaling_study,
    seed_std,
)
from diffcore import load_checkpoint
from forecaster import forecasting_loss
from policy import build_policy, load_policy
from worldmodel import wm_embed


def ablation_rows(full, dream_only, hsa_only, vision_only, task="peg_in_hole"):
    rates = {"full": full, "dream_only": dream_only, "hsa_only": hsa_only, "vision_only": vision_only}
    return [{"variant": name, "task": task, "sr_mean": rate} for name, rate in rates.items()]


def curve(low, mid, high, sigma=2.0):
    return [{"fraction": 0.2, "sr_mean": low, "sr_std": sigma},
            {"fraction": 0.6, "sr_mean": mid, "sr_std": sigma},
            {"fraction": 1.0, "sr_mean": high, "sr_std": sigma}]


# ===========================================================================
# Rollouts
# ===========================================================================

class TestRollout:
    def test_episode_seeds_are_disjoint(self):
        seeds = {episode_seed(s, i) for s in range(3) for i in range(100)}
        assert len(seeds) == 300 and min(seeds) >= 1_000_000

    def test_final_error(self):
        state = simworld.reset("peg_in_hole", 0)
        state.grasp_offset = np.zeros(2)
        state.gripper_position[:2] = state.target_xy + np.array([0.003, 0.004])
        assert final_error_mm(state) == pytest.approx(5.0, abs=1e-6)
        tool = simworld.reset("tool_stabilize", 0)
        tool.tilt = np.array([0.0, 0.0])
        assert final_error_mm(tool) == 0.0

    def test_expert_rollout_is_deterministic(self):
        first = rollout(ExpertActor(), "peg_in_hole", episode_seed(0, 0))
        second = rollout(ExpertActor(), "peg_in_hole", episode_seed(0, 0))
        assert first == second
        assert isinstance(first, EpisodeTrace) and first.steps > 0

    def test_chunks_run_to_completion(self):
        calls = []

        def hold_still(observation, state):
            calls.append(state.step_index)
            return np.zeros((5, 7))

        trace = rollout(hold_still, "tool_stabilize", 0, max_steps=12)
        assert calls == [0, 5, 10]
        assert trace.steps == 12 and not trace.success and trace.slip_events == 0


# ===========================================================================
# evaluate
# ===========================================================================

class TestEvaluate:
    def test_expert_report(self):
        report = evaluate(EXPERT, "peg_in_hole", n_episodes=10, seeds=[0, 1], verbose=False)
        assert report.policy == "expert" and len(report.traces) == 20
        assert report.per_seed == [100.0 * sum(t.success for t in report.traces[k * 10:(k + 1) * 10]) / 10
                                   for k in range(2)]
        assert report.sr_mean == pytest.approx(np.mean(report.per_seed))
        assert report.sr_std == pytest.approx(np.std(report.per_seed, ddof=1))
        assert report.sr_mean >= 80.0

    def test_single_seed_has_no_std(self, tmp_path):
        report = evaluate(EXPERT, "tool_stabilize", n_episodes=2, seeds=[0], verbose=False)
        assert report.sr_std is None
        assert json.loads(report.save(tmp_path / "report.json").read_text())["sr_std"] is None

    def test_seed_std(self):
        assert seed_std([]) is None and seed_std([40.0]) is None
        assert seed_std([40.0, 60.0]) == pytest.approx(np.sqrt(200.0))

    @pytest.mark.parametrize("task", simworld.TASKS)
    def test_random_policy_floor(self, tiny_cfg, task):
        report = evaluate(build_policy(tiny_cfg), task, n_episodes=10, seeds=[0, 1], verbose=False)
        assert report.sr_mean <= RANDOM_POLICY_CEILING
        assert check_random_floor([report])[0]

    def test_blind_expert_runs(self):
        report = evaluate("expert-blind", "peg_in_hole", n_episodes=2, seeds=[0], verbose=False)
        assert report.policy == "expert-blind" and 0.0 <= report.sr_mean <= 100.0

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            evaluate(EXPERT, "juggling", n_episodes=1, seeds=[0], verbose=False)
        with pytest.raises(ValueError):
            evaluate(EXPERT, "peg_in_hole", n_episodes=0, seeds=[0], verbose=False)
        with pytest.raises(ValueError):
            evaluate(EXPERT, "peg_in_hole", n_episodes=1, seeds=[], verbose=False)

    def test_parallel_matches_serial(self):
        serial = evaluate(EXPERT, "peg_in_hole", n_episodes=3, seeds=[0], verbose=False)
        parallel = evaluate(EXPERT, "peg_in_hole", n_episodes=3, seeds=[0], workers=2, verbose=False)
        assert serial.to_dict(timing=False) == parallel.to_dict(timing=False)

    def test_save(self, tmp_path):
        report = evaluate(EXPERT, "peg_in_hole", n_episodes=1, seeds=[0], verbose=False)
        data = json.loads(report.save(tmp_path / "report.json").read_text())
        assert data["task"] == "peg_in_hole" and "wall_clock" in data
        assert data["traces"][0]["seed"] == episode_seed(0, 0)

    def test_policy_checkpoint(self, trained_run, tmp_path):
        stem = trained_run["stage2"]
        before = checkpoint_digest(stem)
        log = tmp_path / "inference.jsonl"
        report = evaluate(str(stem), "peg_in_hole", n_episodes=1, seeds=[0], max_steps=10, inference_log=log,
                          verbose=False)
        _, meta = load_checkpoint(stem)
        assert report.config_hash == meta["config_hash"] and report.policy == str(stem)
        assert checkpoint_digest(stem) == before
        records = [json.loads(line) for line in log.read_text().splitlines()]
        # one inference per 4-step chunk until the episode ends
        assert [r["step"] for r in records] == list(range(0, report.traces[0].steps, 4))
        assert all(len(r["final"]) == 4 and len(r["draft"]) == 4 for r in records)

    def test_policy_evaluation_is_deterministic(self, trained_run):
        runs = [evaluate(str(trained_run["stage2"]), "tool_stabilize", n_episodes=1, seeds=[1], max_steps=8,
                         pass_name=pass_name, verbose=False).to_dict(timing=False)
                for pass_name in ("final", "final", "draft")]
        assert runs[0] == runs[1]
        assert runs[2]["pass_name"] == "draft"


# ===========================================================================
# Dream reports
# ===========================================================================

class TestDreamReports:
    def test_dream_quality(self, trained_run, tiny_dataset, tiny_cfg):
        quality = dream_quality(trained_run["stage2"], tiny_dataset, tiny_cfg["horizon_n"], max_samples=16)
        assert quality["samples"] == 16
        assert quality["null_cosine"] == "n/a"
        assert quality["oracle_cosine"] == pytest.approx(1.0, abs=1e-5)
        assert -1.0 <= quality["cosine_mean"] <= 1.0
        assert quality["loss_w"] >= 0.0 and quality["loss_w_copy_forward"] >= 0.0

    def test_trained_forecaster_beats_init(self, trained_run, tiny_dataset, tiny_cfg):
        horizon = tiny_cfg["horizon_n"]
        _, meta = load_checkpoint(trained_run["stage2"])
        policy = load_policy(meta["snapshots"][0]).eval()
        init = dream_quality(policy, tiny_dataset, horizon, max_samples=8)

        batch = load_batch(tiny_dataset, clip_index(tiny_dataset, 1, horizon)[:8], policy.chunk_h, horizon)
        with torch.no_grad():
            out = policy.think_dream_act(ObsBatch.from_batch(batch))
            patches, pooled = policy.adapter(out.z)
            target = wm_embed(policy.world_model, batch.future_tactile)
        torch.manual_seed(0)
        optimizer = torch.optim.Adam(policy.forecaster.parameters(), lr=3e-3)
        for _ in range(400):
            optimizer.zero_grad()
            forecasting_loss(policy.forecaster(patches, out.a_draft, pooled), target).backward()
            optimizer.step()

        trained = dream_quality(policy, tiny_dataset, horizon, max_samples=8)
        assert trained["samples"] == init["samples"] == 8
        assert trained["cosine_mean"] - init["cosine_mean"] >= MIN_COSINE_GAIN
        assert check_dream_gain(init, trained)[0]

    def test_heatmap_series(self, trained_run, tiny_dataset, tiny_cfg, tmp_path):
        _, meta = load_checkpoint(trained_run["stage2"])
        maes = heatmap_series(meta["snapshots"], tiny_dataset, tiny_cfg["horizon_n"], tmp_path, samples=4)
        assert len(maes) == 3 and all(m >= 0.0 for m in maes)
        for name in ("dream_00.ppm", "dream_02.csv", "truth.ppm", "series.csv"):
            assert (tmp_path / name).exists(), name
        with open(tmp_path / "series.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [float(r["mae"]) for r in rows] == maes

    def test_heatmap_series_needs_snapshots(self, tiny_dataset, tmp_path):
        with pytest.raises(ValueError, match="snapshots"):
            heatmap_series([], tiny_dataset, 2, tmp_path)

    def test_prediction_strip(self, trained_run, tiny_dataset, tiny_cfg, tmp_path):
        path = prediction_strip(trained_run["stage2"], tiny_dataset, 0, tiny_cfg["horizon_n"], tmp_path)
        episode = tiny_dataset.episode(0)
        assert path.name == f"strip_{episode.name}.ppm" and path.read_bytes()[:2] == b"P6"
        with open(tmp_path / f"strip_{episode.name}.csv", newline="") as handle:
            assert len(list(csv.DictReader(handle))) == episode.length


class TestScalingStudy:
    def test_curve(self, trained_run, tiny_dataset, tiny_cfg, tmp_path):
        calls = []

        def fake_train(dataset, cfg, run_dir):
            calls.append((cfg["data_fraction"], cfg["seed"], run_dir.name))
            return trained_run["stage2"]

        cfg = dict(tiny_cfg, eval_episodes=1, eval_seeds=[0], max_episode_steps=8)
        rows = scaling_study([0.2, 1.0], cfg, tiny_dataset, fake_train, tmp_path, verbose=False)
        assert calls == [(0.2, 0, "fraction_0.2_seed0"), (1.0, 0, "fraction_1.0_seed0")]
        assert [row["fraction"] for row in rows] == [0.2, 1.0]
        assert all(row["sr_std"] is None for row in rows)
        lines = (tmp_path / "curve.csv").read_text().splitlines()
        assert lines[0] == "fraction,sr_mean,sr_std" and lines[1].endswith(",")

    def test_two_seeds_give_a_spread(self, trained_run, tiny_dataset, tiny_cfg, tmp_path):
        cfg = dict(tiny_cfg, eval_episodes=1, eval_seeds=[0, 1], max_episode_steps=8)
        rows = scaling_study([1.0], cfg, tiny_dataset, lambda *args: trained_run["stage2"], tmp_path, verbose=False)
        assert isinstance(rows[0]["sr_std"], float) and rows[0]["sr_std"] >= 0.0

    def test_bad_fraction_fails_before_training(self, tiny_cfg, tiny_dataset, tmp_path):
        def never(*args):
            raise AssertionError("training should not start")

        with pytest.raises(ValueError, match="fraction"):
            scaling_study([0.2, 0.5], tiny_cfg, tiny_dataset, never, tmp_path, verbose=False)


# ===========================================================================
# Acceptance checks
# ===========================================================================

class TestChecks:
    def test_ordering_holds(self):
        ok, problems = check_ablation_ordering(ablation_rows(90, 80, 70, 50))
        assert ok and problems == []

    def test_ordering_violations(self):
        ok, problems = check_ablation_ordering(ablation_rows(80, 78, 79, 50))
        assert not ok
        text = " ".join(problems)
        assert "dream_only" in text and "full - hsa_only" in text and "best ablation" in text

    def test_ordering_missing_variant(self):
        rows = ablation_rows(90, 80, 70, float("nan"))
        ok, problems = check_ablation_ordering(rows)
        assert not ok and "vision_only" in problems[0]
        assert not check_ablation_ordering(rows, task="tool_stabilize")[0]

    def test_scaling_curve(self):
        assert check_scaling_curve(curve(50, 70, 75))[0]
        ok, problems = check_scaling_curve(curve(50, 60, 75))
        assert not ok and "diminishing" in problems[0]
        ok, problems = check_scaling_curve(curve(50, 40, 40))
        assert not ok and "fell below" in problems[0]
        assert not check_scaling_curve(curve(50, 70, 75)[:2])[0]
        ok, problems = check_scaling_curve(curve(50, 70, 75, sigma=None))
        assert not ok and "2 seeds" in problems[0]

    def test_dream_gain(self):
        assert check_dream_gain({"cosine_mean": 0.1}, {"cosine_mean": 0.45})[0]
        ok, problems = check_dream_gain({"cosine_mean": 0.1}, {"cosine_mean": 0.3})
        assert not ok and "0.200" in problems[0]

    def test_random_floor(self):
        def report(task, rate):
            return EvalReport(task, "in-memory", "final", [0, 1], 10, [rate, rate], rate, 0.0)

        assert check_random_floor([report("peg_in_hole", 0.0), report("tool_stabilize", 5.0)])[0]
        ok, problems = check_random_floor([report("peg_in_hole", 0.0), report("tool_stabilize", 10.0)])
        assert not ok and len(problems) == 1 and "tool_stabilize" in problems[0]

    @pytest.mark.parametrize("maes,expected", [
        ([5.0, 4.0, 3.0, 2.0, 1.0], True),
        ([3.0, 2.0, 2.5, 1.0, 0.5, 0.4], True),
        ([1.0, 2.0, 3.0], False),
        ([1.0], False),
    ])
    def test_heatmap_series_check(self, maes, expected):
        assert check_heatmap_series(maes)[0] is expected

    def test_report_round_trip_fields(self):
        report = EvalReport("peg_in_hole", "expert", "final", [0], 1, [100.0], 100.0, None,
                            [EpisodeTrace(1, True, 10, 0.5, 0)])
        assert "wall_clock" not in report.to_dict(timing=False)
        assert report.to_dict()["traces"][0]["success"] is True
