"""
Tests for the training curriculum: schedules, loss assembly, checkpoints,
resume and the ablation runner.

The slow fixtures (tiny dataset and tiny trained run) live in conftest.py.

Run with:
    pytest test_training.py -v
"""

import csv
import json
import math

import numpy as np
import pytest
import torch

from datastore import load_batch
from diffcore import CounterRng, load_checkpoint, module_digest
from hsa import HsaConfig
from policy import build_policy, load_policy
from run_config import ConfigError
from training import (
    ABLATION_COLUMNS,
    ABLATIONS,
    METRIC_COLUMNS,
    FrozenWeightsMutatedError,
    TrainConfig,
    Trainer,
    TrainingDivergedError,
    compute_losses,
    lr_factor,
    read_metrics,
    run_ablation,
)
from worldmodel import load_world_model


def first_batch(dataset, cfg, size=4):
    return load_batch(dataset, dataset.sample_index()[:size], cfg["chunk_h"], cfg["horizon_n"])


# ===========================================================================
# Schedules and configuration
# ===========================================================================

class TestSchedule:
    def test_warmup_is_linear(self):
        assert [lr_factor(s, 100, 4, "cosine") for s in range(4)] == [0.25, 0.5, 0.75, 1.0]

    def test_cosine_decays_to_zero(self):
        assert lr_factor(10, 110, 10, "cosine") == pytest.approx(1.0)
        assert lr_factor(60, 110, 10, "cosine") == pytest.approx(0.5)
        assert lr_factor(110, 110, 10, "cosine") == pytest.approx(0.0, abs=1e-12)

    def test_constant(self):
        assert lr_factor(500, 1000, 0, "constant") == 1.0


class TestTrainConfig:
    def test_from_run_config(self, tiny_cfg):
        tcfg = TrainConfig.from_run_config(tiny_cfg, 2)
        assert tcfg.stage == "2" and tcfg.chunk_h == tiny_cfg["chunk_h"]
        assert tcfg.batch_size == 4 and tcfg.snapshots == 2

    def test_validation(self):
        with pytest.raises(ValueError, match="stage"):
            TrainConfig(stage="3")
        with pytest.raises(ValueError, match="non-negative"):
            TrainConfig(lambda_w=-1.0)

    def test_disable_hsa_zeroes_weight(self):
        assert TrainConfig(disable_hsa=True, lambda_hsa=0.5).effective_lambda_hsa == 0.0

    def test_ablation_variants(self):
        assert set(ABLATIONS) == {"full", "hsa_only", "dream_only", "vision_only"}
        assert ABLATIONS["vision_only"]["disable_tactile"] and ABLATIONS["vision_only"]["disable_dream"]


# ===========================================================================
# Loss assembly
# ===========================================================================

class TestComputeLosses:
    def test_stage1_has_no_forecasting_term(self, tiny_cfg, tiny_dataset):
        policy = build_policy(tiny_cfg)
        total, terms = compute_losses(policy, first_batch(tiny_dataset, tiny_cfg),
                                      TrainConfig.from_run_config(tiny_cfg, "1"), HsaConfig(), CounterRng(0))
        assert terms["loss_w"] == 0.0 and terms["loss_action_final"] == 0.0
        expected = terms["loss_action_draft"] + tiny_cfg["lambda_hsa"] * (terms["hsa_w"] + terms["hsa_tp"])
        assert float(total) == pytest.approx(expected, rel=1e-5)

    def test_stage2_sums_every_term(self, tiny_cfg, tiny_dataset):
        policy = build_policy(tiny_cfg)
        tcfg = TrainConfig.from_run_config(tiny_cfg, "2")
        total, terms = compute_losses(policy, first_batch(tiny_dataset, tiny_cfg), tcfg, HsaConfig(), CounterRng(0))
        assert terms["loss_w"] > 0.0 and terms["loss_action_final"] > 0.0
        expected = (terms["loss_action_draft"] + terms["loss_action_final"] + tcfg.lambda_w * terms["loss_w"]
                    + tcfg.lambda_hsa * (terms["hsa_w"] + terms["hsa_tp"]))
        assert float(total) == pytest.approx(expected, rel=1e-5)
        assert terms["loss_total"] == pytest.approx(float(total))

    def test_without_draft_supervision(self, tiny_cfg, tiny_dataset):
        policy = build_policy(tiny_cfg)
        tcfg = TrainConfig.from_run_config(dict(tiny_cfg, supervise_draft=False, lambda_hsa=0.0), "2")
        total, terms = compute_losses(policy, first_batch(tiny_dataset, tiny_cfg), tcfg, HsaConfig(), CounterRng(0))
        assert float(total) == pytest.approx(terms["loss_action_final"] + terms["loss_w"], rel=1e-5)

    def test_without_tactile_skips_alignment(self, tiny_cfg, tiny_dataset):
        cfg = dict(tiny_cfg, disable_tactile=True, disable_dream=True)
        _, terms = compute_losses(build_policy(cfg), first_batch(tiny_dataset, cfg),
                                  TrainConfig.from_run_config(cfg, "2"), HsaConfig(), CounterRng(0))
        assert terms["hsa_w"] == terms["hsa_tp"] == terms["loss_w"] == 0.0

    def test_non_finite_loss_is_fatal(self, tiny_cfg, tiny_dataset):
        batch = first_batch(tiny_dataset, tiny_cfg)
        batch.actions[0, 0, 0] = float("nan")
        with pytest.raises(TrainingDivergedError, match="non-finite"):
            compute_losses(build_policy(tiny_cfg), batch, TrainConfig.from_run_config(tiny_cfg, "1"), HsaConfig(),
                           CounterRng(0))


# ===========================================================================
# Curriculum runs
# ===========================================================================

class TestCurriculum:
    def test_outputs(self, trained_run, tiny_cfg):
        out = trained_run["dir"]
        for name in ("world_model.dtwt", "stage1.dtwt", "stage2.dtwt", "wm_history.csv",
                     "metrics_stage1.csv", "metrics_stage2.csv", "stage1_resume.dtwt"):
            assert (out / name).exists(), name
        with open(out / "wm_history.csv", newline="") as handle:
            assert len(list(csv.DictReader(handle))) == tiny_cfg["wm_epochs"]

    def test_metrics_rows(self, trained_run, tiny_cfg):
        rows = read_metrics(trained_run["dir"] / "metrics_stage2.csv")
        assert len(rows) == tiny_cfg["epochs"] * tiny_cfg["max_steps_per_epoch"]
        assert [row["step"] for row in rows] == list(range(len(rows)))
        assert all(math.isfinite(row["loss_total"]) and row["loss_w"] > 0 for row in rows)
        with open(trained_run["dir"] / "metrics_stage2.csv", newline="") as handle:
            assert tuple(next(csv.reader(handle))) == METRIC_COLUMNS

    def test_stage2_meta(self, trained_run):
        _, meta = load_checkpoint(trained_run["stage2"])
        assert meta["kind"] == "policy" and meta["stage"] == "2"
        assert meta["wm_checkpoint"] == str(trained_run["wm"])
        assert len(meta["val_episodes"]) == 2
        assert len(meta["snapshots"]) == 3
        assert meta["steps"] == 3

    def test_snapshots_start_untrained(self, trained_run):
        _, meta = load_checkpoint(trained_run["stage2"])
        first = load_policy(meta["snapshots"][0])
        stage1 = load_policy(trained_run["stage1"])
        _, first_meta = load_checkpoint(meta["snapshots"][0])
        assert first_meta["step"] == 0 and first_meta["val_episodes"] == meta["val_episodes"]
        assert module_digest(first.encoder) == module_digest(stage1.encoder)

    def test_world_model_untouched(self, trained_run):
        wm = load_world_model(trained_run["wm"])
        policy = load_policy(trained_run["stage2"])
        assert policy.world_model_digest() == wm.digest()
        _, meta = load_checkpoint(trained_run["stage2"])
        assert meta["world_model_digest"] == wm.digest()

    def test_check_frozen(self, tiny_cfg):
        with pytest.raises(FrozenWeightsMutatedError):
            Trainer._check_frozen(build_policy(tiny_cfg), "0" * 64)

    def test_stage2_needs_stage1(self, tiny_cfg, tiny_dataset, trained_run, tmp_path):
        trainer = Trainer(tiny_cfg, tmp_path, verbose=False)
        with pytest.raises(ConfigError, match="stage-1"):
            trainer.train_stage2(tiny_dataset, tmp_path / "missing", trained_run["wm"])

    def test_resume_without_state(self, tiny_cfg, tiny_dataset, trained_run, tmp_path):
        trainer = Trainer(tiny_cfg, tmp_path, verbose=False)
        with pytest.raises(ConfigError, match="nothing to resume"):
            trainer.train_stage1(tiny_dataset, trained_run["wm"], resume=True)

    def test_interrupted_run_resumes_identically(self, tiny_cfg, tiny_dataset, trained_run, tmp_path):
        straight = Trainer(tiny_cfg, tmp_path / "straight", verbose=False).train_stage1(tiny_dataset, trained_run["wm"])
        trainer = Trainer(tiny_cfg, tmp_path / "split", verbose=False)
        stopped = trainer.train_stage1(tiny_dataset, trained_run["wm"], stop_at_step=2)
        assert stopped.name == "stage1_resume"
        assert json.loads(stopped.with_suffix(".json").read_text())["global_step"] == 2
        resumed = trainer.train_stage1(tiny_dataset, trained_run["wm"], resume=True)
        assert module_digest(load_policy(resumed)) == module_digest(load_policy(straight))
        assert len(read_metrics(tmp_path / "split" / "metrics_stage1.csv")) == 3

    def test_same_seed_same_weights(self, tiny_cfg, tiny_dataset, trained_run, tmp_path):
        first = Trainer(tiny_cfg, tmp_path / "a", verbose=False).train_stage1(tiny_dataset, trained_run["wm"])
        assert module_digest(load_policy(first)) == module_digest(load_policy(trained_run["stage1"]))


# ===========================================================================
# Ablation runner
# ===========================================================================

class TestAblation:
    def test_rows_and_failures(self, tiny_cfg, tiny_dataset, trained_run, tmp_path):
        cfg = dict(tiny_cfg, eval_episodes=1, eval_seeds=[0], tasks=["peg_in_hole"], max_episode_steps=20)
        grid = [{"name": "vision_only"}, {"name": "full", "wm_size": "huge"}]
        rows = run_ablation(grid, cfg, tiny_dataset, tmp_path, trained_run["wm"], verbose=False)
        assert [row["variant"] for row in rows] == ["vision_only", "full_wm_size-huge"]
        ok, broken = rows
        assert ok["runs"] == 1 and ok["failed"] == 0 and 0.0 <= ok["sr_mean"] <= 100.0
        assert ok["sr_std"] is None
        assert broken["runs"] == 0 and broken["failed"] == 1 and "wm_size" in broken["error"]
        assert np.isnan(broken["sr_mean"])
        with open(tmp_path / "ablation.csv", newline="") as handle:
            reader = csv.DictReader(handle)
            assert tuple(reader.fieldnames) == ABLATION_COLUMNS
            assert len(list(reader)) == 2

    def test_empty_grid(self, tiny_cfg, tiny_dataset, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            run_ablation([], tiny_cfg, tiny_dataset, tmp_path)
