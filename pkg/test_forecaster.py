"""
Tests for the latent forecaster and its dream embeddings.

Run with:
    pytest test_forecaster.py -v
"""

import pytest
import torch
from torch.autograd import gradcheck

from diffcore import ShapeError
from forecaster import (
    DreamEmbedding,
    Forecaster,
    dream,
    dream_cosine,
    forecasting_loss,
    null_dream,
    oracle_dream,
)
from worldmodel import LatentEmbedding


@pytest.fixture
def forecaster():
    torch.manual_seed(0)
    return Forecaster(num_patches=16, dim=8, chunk_h=4, hidden=32)


def latent(batch=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return LatentEmbedding.from_patches(torch.randn(batch, 16, 8, generator=g))


class TestDreamEmbedding:
    def test_null_dream_is_zero(self):
        h = null_dream(16, 8, batch=3)
        assert h.is_null and h.norm() == 0.0
        assert h.patches.shape == (3, 16, 8) and h.pooled.shape == (3, 8)
        assert h.vision is None

    def test_null_dream_with_vision(self):
        h = null_dream(16, 8, vision_dim=5)
        assert h.vision.shape == (1, 5) and not h.vision.any()

    def test_unknown_provenance(self):
        with pytest.raises(ValueError, match="provenance"):
            DreamEmbedding(torch.zeros(1, 16, 8), torch.zeros(1, 8), "imagined")

    def test_oracle_wraps_target(self):
        z = latent()
        h = oracle_dream(z)
        assert h.provenance == "oracle" and h.patches is z.patches
        assert float(forecasting_loss(h, z)) == pytest.approx(0.0, abs=1e-10)


class TestForecaster:
    def test_output(self, forecaster):
        h = dream(latent(), torch.zeros(2, 4, 7), forecaster)
        assert h.provenance == "predicted" and not h.is_null
        assert h.patches.shape == (2, 16, 8)
        torch.testing.assert_close(h.pooled, h.patches.mean(dim=1))

    def test_chunk_changes_the_dream(self, forecaster):
        z = latent()
        still = dream(z, torch.zeros(2, 4, 7), forecaster)
        moving = dream(z, torch.full((2, 4, 7), 0.005), forecaster)
        assert not torch.allclose(still.patches, moving.patches)

    def test_shape_errors(self, forecaster):
        with pytest.raises(ShapeError, match="chunk"):
            forecaster(torch.zeros(2, 16, 8), torch.zeros(2, 3, 7))
        with pytest.raises(ShapeError, match="patches"):
            forecaster(torch.zeros(2, 15, 8), torch.zeros(2, 4, 7))

    def test_vision_head(self):
        f = Forecaster(16, 8, 4, hidden=32, vision_dim=6)
        h = f(torch.zeros(2, 16, 8), torch.zeros(2, 4, 7))
        assert h.vision.shape == (2, 6)

    def test_loss_trains_the_forecaster(self, forecaster):
        z, target = latent(seed=1), latent(seed=2)
        chunk = torch.zeros(2, 4, 7)
        optimizer = torch.optim.Adam(forecaster.parameters(), lr=1e-2)
        first = float(forecasting_loss(dream(z, chunk, forecaster), target))
        for _ in range(50):
            loss = forecasting_loss(dream(z, chunk, forecaster), target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        assert float(loss) < 0.5 * first


class TestDreamCosine:
    def test_null_has_no_cosine(self):
        assert dream_cosine(null_dream(16, 8), latent(batch=1)) is None

    def test_oracle_has_cosine_one(self):
        z = latent()
        torch.testing.assert_close(dream_cosine(oracle_dream(z), z), torch.ones(2))

    def test_negated_has_cosine_minus_one(self):
        z = latent()
        flipped = DreamEmbedding(-z.patches, -z.pooled)
        torch.testing.assert_close(dream_cosine(flipped, z), -torch.ones(2))


class TestForecastingLoss:
    def test_identity_is_exactly_zero(self):
        z = latent()
        assert float(forecasting_loss(oracle_dream(z), z)) == 0.0

    def test_opposite_unit_patches(self):
        target = torch.nn.functional.normalize(torch.randn(1, 2, 4), dim=-1)
        # every element differs by 2u, so the mean is 4 * sum(u^2) / (P * D) = 4 / D
        assert float(forecasting_loss(-target, target)) == pytest.approx(1.0, abs=1e-6)

    def test_matches_elementwise_oracle(self):
        g = torch.Generator().manual_seed(3)
        pred, target = torch.randn(2, 3, 5, generator=g), torch.randn(2, 3, 5, generator=g)
        expected = 0.0
        for b in range(2):
            for p in range(3):
                u = pred[b, p] / pred[b, p].norm()
                v = target[b, p] / target[b, p].norm()
                expected += float(((u - v) ** 2).sum())
        assert float(forecasting_loss(pred, target)) == pytest.approx(expected / 30, abs=1e-6)


# ===========================================================================
# Gradients (float64 finite differences)
# ===========================================================================

class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_dream(self, seed):
        torch.manual_seed(seed)
        f = Forecaster(num_patches=4, dim=3, chunk_h=2, hidden=8).double()
        patches = torch.randn(2, 4, 3, dtype=torch.float64, requires_grad=True)
        chunk = torch.randn(2, 2, 7, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda p, a: dream(LatentEmbedding.from_patches(p), a, f).patches, (patches, chunk),
                         eps=1e-6, atol=1e-6, rtol=1e-3)

    @pytest.mark.parametrize("seed", range(20))
    def test_forecasting_loss(self, seed):
        g = torch.Generator().manual_seed(seed)
        pred = torch.randn(2, 4, 3, generator=g, dtype=torch.float64, requires_grad=True)
        target = torch.randn(2, 4, 3, generator=g, dtype=torch.float64)
        assert gradcheck(lambda p: forecasting_loss(p, target), (pred,), eps=1e-6, atol=1e-6, rtol=1e-3)
