"""
Unit tests for the differentiable substrate.

Covers:
- counter RNG streams and dropout masks
- finite-checked ops and their gradients (float64 gradcheck)
- guarded AdamW
- DTWT checkpoints

Run with:
    pytest test_diffcore.py -v
"""

import numpy as np
import pytest
import torch
import torch.nn as nn
from torch.autograd import gradcheck

from diffcore import (
    AdamW,
    CheckpointError,
    CounterRng,
    Dropout,
    MultiHeadAttention,
    NoiseSource,
    NonFiniteError,
    ShapeError,
    TransformerBlock,
    adamw_step,
    check_finite,
    dropout,
    layernorm,
    load_checkpoint,
    load_into,
    load_parameters,
    matmul,
    module_digest,
    save_checkpoint,
    save_parameters,
    softmax,
    tensors_digest,
)

GRAD_INSTANCES = 20


def _gradcheck(fn, *inputs):
    return gradcheck(fn, inputs, eps=1e-6, atol=1e-6, rtol=1e-3)


# ===========================================================================
# CounterRng / NoiseSource
# ===========================================================================

class TestCounterRng:
    def test_same_path_same_draws(self):
        np.testing.assert_array_equal(CounterRng(3, (1, 2)).uniform(10), CounterRng(3, (1, 2)).uniform(10))

    def test_draws_do_not_depend_on_history(self):
        rng = CounterRng(3, (1,))
        first = rng.normal(5)
        rng.normal(100)
        np.testing.assert_array_equal(rng.normal(5), first)

    def test_split_streams_differ(self):
        rng = CounterRng(0)
        assert not np.array_equal(rng.split(0).uniform(8), rng.split(1).uniform(8))

    def test_split_matches_explicit_path(self):
        np.testing.assert_array_equal(CounterRng(5).split(2, 7).uniform(4), CounterRng(5, (2, 7)).uniform(4))

    def test_permutation_is_a_permutation(self):
        assert sorted(CounterRng(1).permutation(12).tolist()) == list(range(12))


class TestNoiseSource:
    def test_streams_reset_per_step(self):
        noise = NoiseSource(4)
        noise.set_step(10)
        first = [noise.next_rng().uniform(3) for _ in range(2)]
        noise.set_step(10)
        again = [noise.next_rng().uniform(3) for _ in range(2)]
        for a, b in zip(first, again):
            np.testing.assert_array_equal(a, b)

    def test_calls_within_a_step_differ(self):
        noise = NoiseSource(4)
        assert not np.array_equal(noise.next_rng().uniform(6), noise.next_rng().uniform(6))


# ===========================================================================
# Ops
# ===========================================================================

class TestSoftmax:
    def test_large_equal_logits(self):
        np.testing.assert_allclose(softmax(torch.tensor([1000.0, 1000.0])).numpy(), [0.5, 0.5])

    def test_rows_sum_to_one(self):
        out = softmax(torch.randn(4, 7, dtype=torch.float64), axis=-1)
        np.testing.assert_allclose(out.sum(-1).numpy(), np.ones(4), atol=1e-12)

    def test_nan_input_raises(self):
        with pytest.raises(NonFiniteError):
            softmax(torch.tensor([0.0, float("nan")]))

    def test_non_finite_output_raises(self, monkeypatch):
        monkeypatch.setattr(torch, "exp", lambda x: torch.zeros_like(x))
        with pytest.raises(NonFiniteError, match="softmax output"):
            softmax(torch.tensor([1.0, 2.0]))

    def test_extreme_spread_stays_finite(self):
        out = softmax(torch.tensor([-3e38, 0.0, 3e38]))
        np.testing.assert_array_equal(out.numpy(), [0.0, 0.0, 1.0])


class TestMatmul:
    def test_batched_product(self):
        a, b = torch.randn(2, 3, 4), torch.randn(2, 4, 5)
        np.testing.assert_allclose(matmul(a, b).numpy(), torch.bmm(a, b).numpy(), rtol=1e-6)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dims"):
            matmul(torch.zeros(2, 3), torch.zeros(4, 2))

    def test_batch_mismatch(self):
        with pytest.raises(ShapeError, match="batch dims"):
            matmul(torch.zeros(2, 3, 4), torch.zeros(3, 4, 5))

    def test_vector_rejected(self):
        with pytest.raises(ShapeError):
            matmul(torch.zeros(3), torch.zeros(3, 3))

    def test_overflow_raises(self):
        big = torch.full((1, 2), 3e38)
        with pytest.raises(NonFiniteError):
            matmul(big, torch.full((2, 1), 3e38))


class TestLayernorm:
    def test_zero_mean_unit_variance(self):
        out = layernorm(torch.randn(5, 16, dtype=torch.float64) * 3 + 2)
        np.testing.assert_allclose(out.mean(-1).numpy(), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(-1, unbiased=False).numpy(), 1.0, atol=1e-4)

    def test_gain_and_bias(self):
        x = torch.randn(2, 4, dtype=torch.float64)
        gain, bias = torch.full((4,), 2.0, dtype=torch.float64), torch.ones(4, dtype=torch.float64)
        np.testing.assert_allclose(layernorm(x, gain, bias).numpy(), (layernorm(x) * 2 + 1).numpy())


class TestDropout:
    def test_eval_is_identity(self):
        x = torch.randn(3, 4)
        assert dropout(x, 0.5, training=False) is x

    def test_same_stream_same_mask(self):
        x = torch.ones(64)
        a = dropout(x, 0.3, True, CounterRng(0, (1,)))
        b = dropout(x, 0.3, True, CounterRng(0, (1,)))
        np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_survivors_are_rescaled(self):
        out = dropout(torch.ones(1000), 0.5, True, CounterRng(2))
        assert set(np.unique(out.numpy()).tolist()) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [1.0, -0.1])
    def test_bad_probability(self, p):
        with pytest.raises(ValueError):
            dropout(torch.ones(3), p, True, CounterRng(0))
        with pytest.raises(ValueError):
            Dropout(p)

    def test_training_needs_stream(self):
        with pytest.raises(ValueError, match="rng"):
            dropout(torch.ones(3), 0.1, True)


def test_check_finite_passes_through():
    x = torch.ones(2)
    assert check_finite(x) is x


# ===========================================================================
# Gradients
# ===========================================================================

class TestGradients:
    @pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
    def test_matmul(self, seed):
        torch.manual_seed(seed)
        a = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
        b = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
        assert _gradcheck(matmul, a, b)

    @pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
    def test_layernorm(self, seed):
        torch.manual_seed(seed)
        x = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
        gain = torch.randn(6, dtype=torch.float64, requires_grad=True)
        bias = torch.randn(6, dtype=torch.float64, requires_grad=True)
        assert _gradcheck(layernorm, x, gain, bias)

    @pytest.mark.parametrize("seed", range(GRAD_INSTANCES))
    def test_attention(self, seed):
        torch.manual_seed(seed)
        attn = MultiHeadAttention(8, heads=2).double()
        q = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
        kv = torch.randn(2, 5, 8, dtype=torch.float64, requires_grad=True)
        assert _gradcheck(attn, q, kv)


# ===========================================================================
# Attention modules
# ===========================================================================

class TestAttention:
    def test_cross_attention_shape(self):
        attn = MultiHeadAttention(16, heads=4)
        assert attn(torch.randn(2, 3, 16), torch.randn(2, 9, 16)).shape == (2, 3, 16)

    def test_single_key_returns_its_value(self):
        torch.manual_seed(0)
        attn = MultiHeadAttention(8, heads=2)
        kv = torch.randn(1, 1, 8)
        expected = attn.out_proj(attn.v_proj(kv))
        out = attn(torch.randn(1, 4, 8), kv)
        torch.testing.assert_close(out, expected.expand(1, 4, 8))

    def test_duplicated_keys_change_nothing(self):
        torch.manual_seed(0)
        attn = MultiHeadAttention(8, heads=2)
        q, kv = torch.randn(1, 3, 8), torch.randn(1, 1, 8)
        torch.testing.assert_close(attn(q, kv.repeat(1, 2, 1)), attn(q, kv))

    def test_indivisible_heads(self):
        with pytest.raises(ShapeError):
            MultiHeadAttention(10, heads=4)

    def test_mismatched_inputs(self):
        attn = MultiHeadAttention(16, heads=4)
        with pytest.raises(ShapeError):
            attn(torch.randn(2, 3, 16), torch.randn(3, 3, 16))

    def test_block_dropout_replays_with_step(self):
        noise = NoiseSource(1)
        block = TransformerBlock(16, 4, dropout=0.5, noise=noise).train()
        x = torch.randn(2, 5, 16)
        noise.set_step(3)
        first = block(x)
        noise.set_step(3)
        np.testing.assert_array_equal(block(x).detach().numpy(), first.detach().numpy())


# ===========================================================================
# AdamW
# ===========================================================================

class TestAdamW:
    def test_counts_steps(self):
        layer = nn.Linear(2, 1)
        optimizer = AdamW(layer.parameters(), lr=0.1)
        layer(torch.ones(1, 2)).sum().backward()
        optimizer.step()
        assert optimizer.step_count == 1

    def test_zero_gradient_without_decay_is_a_no_op(self):
        p = torch.tensor([1.0, -2.0])
        (updated,) = adamw_step([p], [torch.zeros(2)], {}, lr=0.1, weight_decay=0.0)
        torch.testing.assert_close(updated, p)

    def test_first_step_moves_by_lr(self):
        (updated,) = adamw_step([torch.tensor([1.0], dtype=torch.float64)], [torch.tensor([1.0], dtype=torch.float64)],
                                {}, lr=0.1, weight_decay=0.0)
        assert float(updated) == pytest.approx(0.9, abs=1e-6)

    def test_quadratic_converges(self):
        p, state = torch.tensor([0.0]), {}
        for _ in range(100):
            (p,) = adamw_step([p], [2.0 * (p - 3.0)], state, lr=0.1, weight_decay=0.0)
        assert abs(float(p) - 3.0) < 0.1 and state["step"] == 100

    def test_matches_guarded_optimizer(self):
        torch.manual_seed(0)
        layer = nn.Linear(3, 2)
        params = [p.detach().clone() for p in layer.parameters()]
        optimizer = AdamW(layer.parameters(), lr=0.01, weight_decay=0.1)
        state = {}
        for _ in range(3):
            optimizer.zero_grad()
            layer(torch.randn(4, 3)).pow(2).sum().backward()
            params = adamw_step(params, [p.grad for p in layer.parameters()], state, lr=0.01, weight_decay=0.1)
            optimizer.step()
        for mine, theirs in zip(params, layer.parameters()):
            torch.testing.assert_close(mine, theirs.detach(), rtol=1e-5, atol=1e-6)

    def test_functional_step_rejects_bad_gradients(self):
        with pytest.raises(NonFiniteError):
            adamw_step([torch.zeros(2)], [torch.tensor([1.0, float("inf")])], {})
        with pytest.raises(ShapeError):
            adamw_step([torch.zeros(2)], [torch.zeros(3)], {})

    def test_rejects_nan_gradient(self):
        layer = nn.Linear(2, 1)
        optimizer = AdamW(layer.parameters())
        before = module_digest(layer)
        layer.weight.grad = torch.full_like(layer.weight, float("nan"))
        with pytest.raises(NonFiniteError):
            optimizer.step()
        assert module_digest(layer) == before
        assert optimizer.step_count == 0


# ===========================================================================
# Checkpoints
# ===========================================================================

class TestCheckpoints:
    def test_parameters_round_trip(self, tmp_path):
        tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(1.5, dtype=np.float32)}
        save_parameters(tmp_path / "p.dtwt", tensors)
        loaded = load_parameters(tmp_path / "p.dtwt")
        assert sorted(loaded) == ["a.weight", "b"]
        np.testing.assert_array_equal(loaded["a.weight"], tensors["a.weight"])
        assert loaded["b"].shape == ()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dtwt"
        path.write_bytes(b"NOPE" + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="magic"):
            load_parameters(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.dtwt"
        save_parameters(path, {"w": np.ones((4, 4), dtype=np.float32)})
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_parameters(path)

    def test_module_checkpoint_with_exclusion(self, tmp_path):
        model = nn.Sequential(nn.Linear(3, 3), nn.Linear(3, 2))
        save_checkpoint(tmp_path / "m", model, {"note": "x"}, exclude_prefixes=("1.",))
        tensors, meta = load_checkpoint(tmp_path / "m")
        assert set(tensors) == {"0.weight", "0.bias"}
        assert meta["note"] == "x" and meta["digest"] == tensors_digest(tensors)

        fresh = nn.Sequential(nn.Linear(3, 3), nn.Linear(3, 2))
        load_into(fresh, tensors, strict=False)
        np.testing.assert_array_equal(fresh[0].weight.detach().numpy(), model[0].weight.detach().numpy())
        with pytest.raises(CheckpointError, match="mismatch"):
            load_into(fresh, tensors, strict=True)

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "m", nn.Linear(3, 3))
        tensors, _ = load_checkpoint(tmp_path / "m")
        with pytest.raises(CheckpointError, match="shape"):
            load_into(nn.Linear(3, 4), tensors)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent")
