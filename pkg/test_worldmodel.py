"""
Tests for the tactile world model, its adapter and heatmap export.

Run with:
    pytest test_worldmodel.py -v
"""

import numpy as np
import pytest
import torch
from PIL import Image

from diffcore import ShapeError, count_parameters, module_digest
from worldmodel import (
    HEATMAP_SCALE,
    TACTILE_SHAPE,
    LatentEmbedding,
    TactileAdapter,
    TactileWorldModel,
    WmConfig,
    adapt_and_pool,
    embedding_spread,
    heatmap_export,
    heatmap_grid,
    load_world_model,
    normalized_mse,
    read_heatmap_csv,
    save_world_model,
    wm_embed,
    wm_pretrain,
)

SMALL = dict(dim=32, heads=4, context=2, horizon=2, epochs=1, batch_size=4)


@pytest.fixture
def model():
    torch.manual_seed(0)
    return TactileWorldModel(WmConfig(**SMALL))


def flat_gel():
    return np.full(TACTILE_SHAPE, 0.5, dtype=np.float32)


# ===========================================================================
# Configuration and loss
# ===========================================================================

class TestWmConfig:
    @pytest.mark.parametrize("kwargs", [
        {"size": "medium"}, {"horizon": 0}, {"context": 0}, {"ema_decay": 1.0},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            WmConfig(**kwargs)

    def test_sizes(self):
        assert WmConfig(size="large").depth > WmConfig(size="small").depth
        assert WmConfig().grid == (4, 4)

    def test_from_run_config(self, tiny_cfg):
        cfg = WmConfig.from_run_config(tiny_cfg)
        assert (cfg.dim, cfg.context, cfg.horizon) == (32, 2, 2)


class TestNormalizedMse:
    def test_scale_invariant(self):
        x = torch.randn(2, 16, 8)
        assert float(normalized_mse(3.0 * x, x)) == pytest.approx(0.0, abs=1e-10)

    def test_opposite_vectors(self):
        x = torch.randn(1, 4, 8)
        # |u - (-u)|^2 = 4 spread over 8 elements
        assert float(normalized_mse(x, -x)) == pytest.approx(0.5, rel=1e-5)

    def test_no_gradient_into_target(self):
        pred = torch.randn(1, 4, 8, requires_grad=True)
        target = torch.randn(1, 4, 8, requires_grad=True)
        normalized_mse(pred, target).backward()
        assert pred.grad is not None and target.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            normalized_mse(torch.zeros(1, 4, 8), torch.zeros(1, 5, 8))


# ===========================================================================
# Model
# ===========================================================================

class TestWorldModel:
    def test_predict_shape(self, model):
        out = model.predict(torch.rand(3, 2, 32, 32, 3))
        assert out.shape == (3, 16, 32)

    def test_wrong_context_length(self, model):
        with pytest.raises(ShapeError, match="context frames"):
            model.predict(torch.rand(1, 3, 32, 32, 3))

    def test_target_encoder_is_not_trainable(self, model):
        names = {id(p) for p in model.trainable_parameters()}
        assert all(id(p) not in names for p in model.target_encoder.parameters())
        assert all(not p.requires_grad for p in model.target_encoder.parameters())

    def test_ema_update(self, model):
        with torch.no_grad():
            for p in model.context_encoder.parameters():
                p.add_(1.0)
        before = [p.clone() for p in model.target_encoder.parameters()]
        model.ema_update(0.5)
        for old, target, online in zip(before, model.target_encoder.parameters(), model.context_encoder.parameters()):
            torch.testing.assert_close(target, 0.5 * old + 0.5 * online)

    def test_freeze_stays_in_eval(self, model):
        model.freeze()
        model.train()
        assert not model.training
        assert all(not p.requires_grad for p in model.parameters())

    def test_embed_single_and_batch(self, model):
        single = wm_embed(model, flat_gel())
        batch = wm_embed(model, np.stack([flat_gel(), flat_gel()]))
        assert single.patches.shape == (1, 16, 32) and single.pooled.shape == (1, 32)
        torch.testing.assert_close(batch.patches[1], single.patches[0])
        torch.testing.assert_close(single.pooled, single.patches.mean(dim=1))

    def test_embed_does_not_touch_parameters(self, model):
        before = module_digest(model)
        wm_embed(model, flat_gel())
        assert module_digest(model) == before

    def test_embed_rejects_wrong_shape(self, model):
        with pytest.raises(ShapeError):
            wm_embed(model, np.zeros((64, 64, 3), np.float32))

    def test_embedding_spread(self):
        same = torch.ones(4, 16, 8)
        assert embedding_spread(same) == pytest.approx(0.0, abs=1e-7)
        assert embedding_spread(torch.randn(4, 16, 8)) > 0.0

    def test_checkpoint_round_trip(self, model, tmp_path):
        model.freeze()
        save_world_model(model, tmp_path / "wm", {"note": "x"})
        loaded = load_world_model(tmp_path / "wm")
        assert loaded.frozen and loaded.config == model.config
        assert module_digest(loaded) == module_digest(model)

    def test_load_rejects_other_kind(self, tmp_path):
        from diffcore import save_checkpoint
        save_checkpoint(tmp_path / "other", torch.nn.Linear(2, 2), {"kind": "policy"})
        with pytest.raises(ValueError, match="not a world model"):
            load_world_model(tmp_path / "other")


class TestPretrain:
    def test_history_and_freeze(self, tiny_dataset):
        model, history = wm_pretrain(tiny_dataset, WmConfig(**SMALL), seed=0, verbose=False)
        assert model.frozen and len(history) == 1
        assert np.isfinite(history[0]["loss"]) and history[0]["spread"] >= 0.0

    def test_deterministic(self, tiny_dataset):
        first, _ = wm_pretrain(tiny_dataset, WmConfig(**SMALL), seed=3, verbose=False)
        second, _ = wm_pretrain(tiny_dataset, WmConfig(**SMALL), seed=3, verbose=False)
        assert module_digest(first) == module_digest(second)

    def test_shuffled_targets_differ(self, tiny_dataset):
        plain, _ = wm_pretrain(tiny_dataset, WmConfig(**SMALL), seed=3, verbose=False)
        shuffled, _ = wm_pretrain(tiny_dataset, WmConfig(**SMALL), seed=3, shuffled_targets=True, verbose=False)
        assert module_digest(plain) != module_digest(shuffled)

    def test_episodes_too_short(self, tiny_dataset):
        with pytest.raises(ValueError, match="longer than"):
            wm_pretrain(tiny_dataset, WmConfig(**dict(SMALL, horizon=10_000)), verbose=False)


# ===========================================================================
# Adapter and heatmaps
# ===========================================================================

class TestAdapter:
    def test_shapes_and_small_overhead(self, model):
        adapter = TactileAdapter(32, heads=4, dropout=0.0)
        z = LatentEmbedding.from_patches(torch.randn(2, 16, 32))
        patches, pooled = adapt_and_pool(z, adapter)
        assert patches.shape == (2, 16, 32) and pooled.shape == (2, 32)
        assert count_parameters(adapter) < count_parameters(model.context_encoder)

    def test_zero_alpha_is_identity(self):
        adapter = TactileAdapter(32, heads=4, dropout=0.0, alpha_init=0.0)
        z = LatentEmbedding.from_patches(torch.randn(2, 16, 32))
        patches, _ = adapt_and_pool(z, adapter)
        torch.testing.assert_close(patches, z.patches)

    def test_gradients_reach_adapter_not_world_model(self, model):
        model.freeze()
        adapter = TactileAdapter(32, heads=4, dropout=0.0)
        z = wm_embed(model, np.random.default_rng(0).uniform(0, 1, (2, *TACTILE_SHAPE)).astype(np.float32))
        _, pooled = adapt_and_pool(z, adapter, training=True)
        pooled.sum().backward()
        assert adapter.alpha.grad is not None
        assert all(p.grad is None for p in model.parameters())


class TestHeatmaps:
    def test_grid_values(self):
        patches = torch.zeros(16, 4)
        patches[5, 0] = 3.0
        patches[6, 1] = 4.0
        raw, normalised = heatmap_grid(patches)
        assert raw[1, 1] == 3.0 and raw[1, 2] == 4.0
        assert normalised.max() == 1.0 and normalised.min() == 0.0

    def test_constant_grid_normalises_to_zero(self):
        _, normalised = heatmap_grid(torch.ones(1, 16, 4))
        assert not normalised.any()

    def test_wrong_patch_count(self):
        with pytest.raises(ShapeError):
            heatmap_grid(torch.ones(15, 4))

    def test_export(self, tmp_path):
        patches = torch.arange(16, dtype=torch.float32)[:, None].repeat(1, 3)
        ppm, csv = heatmap_export(LatentEmbedding.from_patches(patches[None]), tmp_path / "map")
        assert ppm.read_bytes()[:2] == b"P6"
        image = Image.open(ppm)
        assert image.size == (4 * HEATMAP_SCALE, 4 * HEATMAP_SCALE)
        assert image.getpixel((0, 0)) == (0, 0, 0)
        assert image.getpixel((4 * HEATMAP_SCALE - 1, 4 * HEATMAP_SCALE - 1)) == (255, 255, 255)
        raw, _ = heatmap_grid(patches)
        np.testing.assert_array_equal(read_heatmap_csv(csv), raw)
