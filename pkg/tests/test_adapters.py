import numpy as np
import pytest

from malora import autodiff as ad
from malora.adapters import (
    base_forward,
    init_asylora,
    init_lora,
    lora_forward,
    lora_param_count,
    merge_delta,
)
from malora.errors import ConfigError, ShapeError
from malora.harness import AdamW
from malora.linalg import Rng


def _forward(layer, x, train=False, gen=None):
    tape = ad.Tape()
    return lora_forward(layer, tape.const(x), tape, train, gen).value


class TestLoraForward:
    def test_fresh_layer_equals_base_exactly(self):
        rng = Rng(0)
        layer = init_lora(rng.normal((5, 7)), rank=3, rng=rng.child(1))
        x = rng.normal((4, 7))
        assert np.array_equal(_forward(layer, x), base_forward(layer, x))

    def test_full_rank_matches_dense_weight_sum(self):
        rng = Rng(1)
        m = n = 6
        layer = init_lora(rng.normal((m, n)), rank=min(m, n), rng=rng.child(1),
                          alpha=float(min(m, n)))
        layer.b[:] = rng.child(2).normal(layer.b.shape)
        x = rng.normal((3, n))
        dense = x @ (layer.base_w + layer.b.T @ layer.a).T
        assert np.abs(_forward(layer, x) - dense).max() < 1e-12 * np.abs(dense).max()

    def test_delta_linear_in_alpha(self):
        rng = Rng(2)
        layer = init_lora(rng.normal((5, 7)), rank=2, rng=rng.child(1), alpha=4.0)
        layer.b[:] = rng.child(2).normal(layer.b.shape)
        x = rng.normal((4, 7))
        base = base_forward(layer, x)
        d1 = _forward(layer, x) - base
        layer.alpha = 8.0
        d2 = _forward(layer, x) - base
        assert np.abs(d2 - 2.0 * d1).max() < 1e-12 * max(np.abs(d2).max(), 1.0)

    def test_input_width_checked(self):
        rng = Rng(3)
        layer = init_lora(rng.normal((5, 7)), rank=2, rng=rng.child(1))
        with pytest.raises(ShapeError):
            _forward(layer, rng.normal((4, 6)))

    def test_alpha_defaults_to_twice_rank(self):
        layer = init_lora(Rng(0).normal((4, 4)), rank=3, rng=Rng(1))
        assert layer.alpha == 6.0


class TestMergeDelta:
    def test_zero_at_init(self):
        layer = init_lora(Rng(0).normal((5, 7)), rank=3, rng=Rng(1))
        assert np.array_equal(merge_delta(layer), np.zeros((5, 7)))

    def test_rank_one_outer_product(self):
        layer = init_lora(Rng(0).normal((3, 4)), rank=1, rng=Rng(1), alpha=1.0)
        layer.a[:] = 0.0
        layer.a[0, 0] = 1.0
        layer.b[0, 0] = 1.0
        expected = np.zeros((3, 4))
        expected[0, 0] = 1.0
        assert np.array_equal(merge_delta(layer), expected)

    def test_consistency_with_forward(self):
        rng = Rng(4)
        layer = init_lora(rng.normal((6, 9)), rank=3, rng=rng.child(1))
        layer.b[:] = rng.child(2).normal(layer.b.shape)
        x = rng.normal((5, 9))
        lhs = _forward(layer, x) - base_forward(layer, x)
        rhs = x @ merge_delta(layer).T
        assert np.abs(lhs - rhs).max() < 1e-12 * max(np.abs(rhs).max(), 1.0)


class TestParamCount:
    def test_plain_4096_rank_64(self):
        trainable, frozen = lora_param_count(4096, 4096, 64)
        assert trainable == 524_288
        assert frozen == 0

    def test_asymmetric_equal_budget(self):
        trainable, frozen = lora_param_count(4096, 4096, 64, asy=True)
        assert trainable == 524_288  # equals the plain count at this square site
        assert frozen == 524_288

    def test_rank_zero_rejected(self):
        with pytest.raises(ConfigError):
            lora_param_count(4, 4, 0)


class TestAsymmetricMode:
    def test_rank_doubled_and_down_frozen(self):
        layer = init_asylora(Rng(0).normal((6, 8)), base_rank=2, rng=Rng(1))
        assert layer.rank == 4
        assert layer.a_frozen
        assert layer.a.shape == (4, 8)
        specs = {name: trainable for name, _, trainable in layer.param_specs()}
        assert not specs[f"{layer.name}.a"]
        assert specs[f"{layer.name}.b"]

    def test_down_projection_bitwise_constant_across_steps(self):
        rng = Rng(5)
        layer = init_asylora(rng.normal((6, 8)), base_rank=2, rng=rng.child(1))
        a_before = layer.a.copy()
        b_init = layer.b.copy()
        x = rng.normal((10, 8))
        target = rng.normal((10, 6))
        params = {n: arr for n, arr, tr in layer.param_specs() if tr}
        opt = AdamW(params)
        for _ in range(5):
            tape = ad.Tape()
            loss = ad.mse_loss(lora_forward(layer, tape.const(x), tape), target)
            opt.step(tape.backward(loss), 1e-2)
        assert np.array_equal(layer.a, a_before)
        assert not np.array_equal(layer.b, b_init)


def test_zero_init_neutrality_is_exact_not_approximate():
    rng = Rng(6)
    for asy in (False, True):
        base = rng.normal((5, 5))
        layer = (init_asylora if asy else init_lora)(base, 2, rng.child(int(asy)))
        x = rng.normal((3, 5))
        diff = _forward(layer, x) - base_forward(layer, x)
        assert np.array_equal(diff, np.zeros_like(diff))
