import numpy as np
import pytest

from malora import adapters, autodiff as ad, moe
from malora.errors import ConfigError
from malora.harness import AdamW
from malora.linalg import Rng, svd_thin

from conftest import make_malora_layer, make_molora_layer


def _fwd(layer, x, forward):
    tape = ad.Tape()
    y, stats = forward(layer, tape.const(x), tape)
    return y.value, stats


def _dense_molora_oracle(layer, x, stats):
    # all-experts dense evaluation times the masked gate matrix (numpy only)
    p = stats.probs.value
    gates = np.where(stats.mask, p, 0.0)
    y = x @ layer.base_w.T
    for t in range(layer.n_experts):
        out_t = (layer.alpha / layer.rank) * (x @ layer.downs[t].T) @ layer.ups[t]
        y += gates[:, t : t + 1] * out_t
    return y


class TestGeometry:
    def test_paper_main_config(self):
        assert moe.derive_geometry(8, 8, 0.5) == (32, 12)

    def test_lambda_one_degenerates(self):
        assert moe.derive_geometry(8, 8, 1.0) == (64, 8)

    def test_small_preset_lambda_back_derivation(self):
        geom = moe.MaloraGeometry.explicit(8, 8, shared_rank=22, expanded_rank=8)
        assert abs(geom.lam - 0.34375) < 1e-12
        assert round(geom.lam, 2) == 0.34

    def test_lambda_validation(self):
        with pytest.raises(ConfigError):
            moe.derive_geometry(8, 8, 0.0)
        with pytest.raises(ConfigError):
            moe.derive_geometry(8, 8, 1.5)

    def test_round_half_up(self):
        # lam * r * N = 5.5 -> 6 under half-up rounding
        d, r_bar = moe.derive_geometry(1, 11, 0.5)
        assert d == 6
        assert r_bar == 1 + 1  # (1 - 0.5) * 1 = 0.5 -> 1

    def test_rank_cap_invariant(self):
        with pytest.raises(ConfigError):
            moe.MaloraGeometry.explicit(4, 4, shared_rank=3, expanded_rank=5)

    def test_top_k_invariant(self):
        with pytest.raises(ConfigError):
            moe.MaloraGeometry.explicit(2, 4, shared_rank=8, expanded_rank=4, top_k=3)

    def test_bound_ratio(self):
        assert abs(moe.bound_ratio(12, 8) - np.sqrt(1.5)) < 1e-15
        assert moe.bound_ratio(8, 8) == 1.0
        assert abs(moe.bound_ratio(16, 8) - np.sqrt(2.0)) < 1e-15


class TestMoloraForward:
    def test_init_neutrality_exact(self):
        layer = make_molora_layer(live=False)
        x = Rng(10).normal((6, 7))
        y, _ = _fwd(layer, x, moe.molora_forward)
        assert np.array_equal(y, adapters.base_forward(layer, x))

    def test_single_expert_reduces_to_lora(self):
        rng = Rng(11)
        base = rng.normal((5, 7))
        layer = moe.init_molora(base, 1, 3, 1, rng.child(1), alpha=6.0)
        layer.ups[0][:] = rng.child(2).normal(layer.ups[0].shape)
        lora = adapters.LoraLayer(
            base_w=base, a=layer.downs[0].copy(), b=layer.ups[0].copy(),
            rank=3, alpha=6.0, name="ref",
        )
        x = rng.normal((4, 7))
        y_moe, _ = _fwd(layer, x, moe.molora_forward)
        tape = ad.Tape()
        y_lora = adapters.lora_forward(lora, tape.const(x), tape).value
        assert np.abs(y_moe - y_lora).max() < 1e-12 * max(np.abs(y_lora).max(), 1.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_all_experts_oracle(self, seed):
        layer = make_molora_layer(seed=seed, n_experts=4, rank=2, top_k=2, n=9, m=6)
        x = Rng(100 + seed).normal((8, 9))
        y, stats = _fwd(layer, x, moe.molora_forward)
        dense = _dense_molora_oracle(layer, x, stats)
        assert np.abs(y - dense).max() < 1e-11 * max(np.abs(dense).max(), 1.0)

    def test_identical_expert_init_flag(self):
        layer = make_molora_layer(identical=True, live=False)
        for t in range(1, layer.n_experts):
            assert np.array_equal(layer.downs[t], layer.downs[0])


class TestMaloraInit:
    def test_expert_zero_reconstruction(self):
        geom = moe.MaloraGeometry.from_lambda(3, 2, 0.5, beta=2.0, in_dim=11, out_dim=5)
        rng = Rng(21)
        k0 = moe.kaiming_uniform(geom.shared_rank, 11, Rng(21))  # same stream start
        s_a, coeffs = moe.malora_init(geom, rng)
        recon = coeffs[0] @ s_a
        assert np.abs(recon - k0[: geom.expanded_rank]).max() < 1e-10

    def test_beta_cancels_in_product(self):
        for beta in (1.0, 4.0):
            geom = moe.MaloraGeometry.from_lambda(3, 2, 0.5, beta=beta, in_dim=11, out_dim=5)
            s_a, coeffs = moe.malora_init(geom, Rng(5))
            if beta == 1.0:
                ref = [c @ s_a for c in coeffs]
            else:
                for t, c in enumerate(coeffs):
                    assert np.abs(c @ s_a - ref[t]).max() < 1e-12

    def test_norms_scale_with_beta(self):
        geoms = [moe.MaloraGeometry.from_lambda(3, 2, 0.5, beta=b, in_dim=11, out_dim=5)
                 for b in (1.0, 3.0)]
        (s1, c1), (s3, c3) = (moe.malora_init(g, Rng(5)) for g in geoms)
        assert abs(np.linalg.norm(s3) - 3.0 * np.linalg.norm(s1)) < 1e-12 * np.linalg.norm(s3)
        n1 = np.sqrt(sum(np.linalg.norm(c) ** 2 for c in c1))
        n3 = np.sqrt(sum(np.linalg.norm(c) ** 2 for c in c3))
        assert abs(n3 - n1 / 3.0) < 1e-12 * n1

    def test_shared_rank_must_fit_input_dim(self):
        geom = moe.MaloraGeometry.from_lambda(4, 4, 1.0, in_dim=8, out_dim=8)
        with pytest.raises(ConfigError):
            moe.malora_init(geom, Rng(0))  # d = 16 > n = 8


class TestMaloraForward:
    def test_init_neutrality_exact(self):
        layer = make_malora_layer(live=False)
        x = Rng(10).normal((6, 7))
        y, _ = _fwd(layer, x, moe.malora_forward)
        assert np.array_equal(y, adapters.base_forward(layer, x))

    def test_single_expert_dense_triple_product(self):
        rng = Rng(31)
        base = rng.normal((5, 9))
        geom = moe.MaloraGeometry.explicit(1, 4, shared_rank=4, expanded_rank=3, top_k=1)
        layer = moe.init_malora(base, geom, rng.child(1))
        layer.ups[0][:] = rng.child(2).normal(layer.ups[0].shape)
        x = rng.normal((6, 9))
        y, _ = _fwd(layer, x, moe.malora_forward)
        scale = layer.alpha / geom.expanded_rank
        delta = layer.ups[0].T @ layer.coeffs[0] @ layer.s_a
        dense = x @ base.T + scale * (x @ delta.T)  # single expert: gate = 1
        assert np.abs(y - dense).max() < 1e-11 * max(np.abs(dense).max(), 1.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_all_experts_oracle(self, seed):
        layer = make_malora_layer(seed=seed, n_experts=4, base_rank=2, n=9, m=6)
        x = Rng(200 + seed).normal((8, 9))
        y, stats = _fwd(layer, x, moe.malora_forward)
        p = stats.probs.value
        gates = np.where(stats.mask, p, 0.0)
        dense = x @ layer.base_w.T
        for t in range(layer.n_experts):
            dense += gates[:, t : t + 1] * (x @ layer.expert_delta(t).T)
        assert np.abs(y - dense).max() < 1e-11 * max(np.abs(dense).max(), 1.0)

    def test_decompose_b_matches_its_own_dense_oracle(self):
        flags = moe.AblationFlags(decompose_b_side=True)
        layer = make_malora_layer(seed=5, flags=flags, n_experts=3, n=9, m=8)
        x = Rng(300).normal((7, 9))
        y, stats = _fwd(layer, x, moe.malora_forward)
        p = stats.probs.value
        gates = np.where(stats.mask, p, 0.0)
        dense = x @ layer.base_w.T
        for t in range(layer.n_experts):
            dense += gates[:, t : t + 1] * (x @ layer.expert_delta(t).T)
        assert np.abs(y - dense).max() < 1e-11 * max(np.abs(dense).max(), 1.0)

    def test_delta_rank_capped_by_expanded_rank(self):
        layer = make_malora_layer(seed=7, n_experts=3, base_rank=2, n=16, m=12)
        r_bar = layer.geometry.expanded_rank
        for t in range(layer.n_experts):
            sigma = svd_thin(layer.expert_delta(t)).sigma
            assert (sigma[r_bar:] < 1e-9 * sigma[0]).all()

    def test_without_shared_subspace_rank_capped_at_d_over_n(self):
        flags = moe.AblationFlags(shared_subspace_enabled=False)
        layer = make_malora_layer(seed=8, flags=flags, n_experts=4, base_rank=2,
                                  lam=0.5, n=16, m=12)
        d_per = layer.geometry.shared_rank // layer.n_experts
        assert layer.downs[0].shape == (d_per, 16)
        for t in range(layer.n_experts):
            sigma = svd_thin(layer.expert_delta(t)).sigma
            assert (sigma[d_per:] < 1e-9 * sigma[0]).all()

    def test_param_count_preserved_without_shared_subspace(self):
        base_kwargs = dict(seed=9, n_experts=4, base_rank=2, lam=0.5, n=16, m=12)
        shared = make_malora_layer(**base_kwargs)
        split = make_malora_layer(flags=moe.AblationFlags(shared_subspace_enabled=False),
                                  **base_kwargs)
        # down-side total is d*n in both variants
        assert shared.s_a.size == sum(d.size for d in split.downs)


class TestFreezeFlags:
    @pytest.mark.parametrize("flag", ["freeze_s_a", "freeze_p_t"])
    def test_frozen_matrices_bitwise_constant_under_training(self, flag):
        flags = moe.AblationFlags(**{flag: True})
        layer = make_malora_layer(seed=13, flags=flags)
        frozen_names = {n for n, _, tr in layer.param_specs() if not tr}
        assert frozen_names
        before = {n: a.copy() for n, a, _ in layer.param_specs()}
        x = Rng(14).normal((12, 7))
        target = Rng(15).normal((12, 5))
        params = {n: a for n, a, tr in layer.param_specs() if tr}
        opt = AdamW(params)
        for _ in range(4):
            tape = ad.Tape()
            y, stats = moe.malora_forward(layer, tape.const(x), tape)
            loss = ad.add(ad.mse_loss(y, target), moe.balance_loss(stats, 0.01))
            opt.step(tape.backward(loss), 1e-2)
        for name, arr, trainable in layer.param_specs():
            if name in frozen_names:
                assert np.array_equal(arr, before[name]), name
            elif not np.array_equal(arr, before[name]):
                break
        else:
            pytest.fail("no trainable parameter moved")

    def test_decompose_b_requires_shared_subspace(self):
        with pytest.raises(ConfigError):
            make_malora_layer(flags=moe.AblationFlags(
                decompose_b_side=True, shared_subspace_enabled=False))


class TestConcatSpectrumOfInit:
    def test_fresh_init_has_exactly_d_nonzero_singular_values(self):
        layer = make_malora_layer(seed=17, n_experts=4, base_rank=2, n=24, m=10, live=False)
        stacked = np.vstack([layer.effective_down(t) for t in range(4)])
        sigma = svd_thin(stacked).sigma
        d = layer.geometry.shared_rank
        assert (sigma[:d] > 1e-10 * sigma[0]).all()
        assert (sigma[d:] < 1e-10 * sigma[0]).all()
