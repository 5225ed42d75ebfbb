import pytest

from malora import moe
from malora.cli import SITE_PRESETS
from malora.errors import ConfigError

SITES_7B = SITE_PRESETS["llama2-7b-linear-sites"]["sites"]
BASE_7B = SITE_PRESETS["llama2-7b-linear-sites"]["base_params"]
SQUARE = [(4096, 4096)]


class TestParamBudget:
    def test_molora_square_site(self):
        out = moe.param_budget("molora", SQUARE, moe.BudgetConfig(r=8, n_experts=8))
        assert out["adapter_trainable"] == 524_288
        assert out["router_trainable"] == 32_768

    def test_malora_small_square_site(self):
        out = moe.param_budget(
            "malora", SQUARE, moe.BudgetConfig(r=8, n_experts=8, d=22, r_bar=8)
        )
        # 22*4096 + 8*8*(22 + 4096)
        assert out["adapter_trainable"] == 353_664
        molora = moe.param_budget("molora", SQUARE, moe.BudgetConfig(r=8, n_experts=8))
        reduction = 1 - out["adapter_trainable"] / molora["adapter_trainable"]
        assert 0.30 <= reduction <= 0.35

    def test_malora_vs_double_rank_molora(self):
        malora = moe.param_budget(
            "malora", SQUARE, moe.BudgetConfig(r=8, n_experts=8, d=32, r_bar=12)
        )
        molora16 = moe.param_budget("molora", SQUARE, moe.BudgetConfig(r=16, n_experts=8))
        assert malora["adapter_trainable"] == 527_360
        assert molora16["adapter_trainable"] == 1_048_576
        reduction = 1 - malora["adapter_trainable"] / molora16["adapter_trainable"]
        assert abs(reduction - 0.497) < 0.003

    def test_coefficient_share_below_one_percent(self):
        cfg = moe.BudgetConfig(r=8, n_experts=8, d=32, r_bar=12)
        out = moe.param_budget("malora", SQUARE, cfg)
        coeff = cfg.n_experts * cfg.r_bar * cfg.d
        assert coeff == 3_072
        assert coeff / out["adapter_trainable"] < 0.01

    def test_empty_site_list(self):
        out = moe.param_budget("malora", [], moe.BudgetConfig())
        assert out == {
            "adapter_trainable": 0,
            "router_trainable": 0,
            "trainable": 0,
            "frozen": 0,
        }

    def test_percent_of_base_at_7b_preset(self):
        molora = moe.param_budget("molora", SITES_7B, moe.BudgetConfig(r=8, n_experts=8), BASE_7B)
        small = moe.param_budget(
            "malora", SITES_7B, moe.BudgetConfig(r=8, n_experts=8, d=22, r_bar=8), BASE_7B
        )
        main = moe.param_budget(
            "malora", SITES_7B, moe.BudgetConfig(r=8, n_experts=8, d=32, r_bar=12), BASE_7B
        )
        lora = moe.param_budget("lora", SITES_7B, moe.BudgetConfig(r=64), BASE_7B)
        assert abs(molora["percent_of_base"] - 2.2) < 0.1
        assert abs(small["percent_of_base"] - 1.6) < 0.1
        assert abs(main["percent_of_base"] - 2.3) < 0.1
        assert abs(lora["percent_of_base"] - 2.1) < 0.1

    def test_asymmetric_methods_count_frozen_downs(self):
        out = moe.param_budget("asylora", [(10, 20)], moe.BudgetConfig(r=4))
        assert out["trainable"] == 2 * 4 * 10
        assert out["frozen"] == 2 * 4 * 20
        moasy = moe.param_budget("moasylora", [(10, 20)], moe.BudgetConfig(r=4, n_experts=3))
        assert moasy["adapter_trainable"] == 3 * 2 * 4 * 10
        assert moasy["frozen"] == 3 * 2 * 4 * 20
        assert moasy["router_trainable"] == 3 * 20

    def test_freeze_flags_move_counts(self):
        cfg = moe.BudgetConfig(r=8, n_experts=8, d=32, r_bar=12, freeze_s_a=True)
        out = moe.param_budget("malora", SQUARE, cfg)
        assert out["frozen"] == 32 * 4096
        assert out["adapter_trainable"] == 527_360 - 32 * 4096

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            moe.param_budget("dora", SQUARE, moe.BudgetConfig())


class TestFlopBudget:
    CFG = moe.BudgetConfig(r=8, n_experts=8, top_k=2, d=32, r_bar=12)

    def test_molora_per_row(self):
        out = moe.flop_budget("molora", [(4096, 4096)], self.CFG, batch=1)
        assert out["adapter_per_row"] == 2 * (8 * 4096 + 4096 * 8)

    def test_malora_unamortized_exceeds_molora_at_lambda_one(self):
        cfg = moe.BudgetConfig(r=8, n_experts=8, top_k=2, d=64, r_bar=8)
        malora = moe.flop_budget("malora", [(1024, 1024)], cfg, batch=1)
        molora = moe.flop_budget("molora", [(1024, 1024)], cfg, batch=1)
        assert malora["adapter_per_row"] >= molora["adapter_per_row"]

    def test_shared_projection_amortizes_over_batch(self):
        one = moe.flop_budget("malora", [(1024, 1024)], self.CFG, batch=1)
        many = moe.flop_budget("malora", [(1024, 1024)], self.CFG, batch=64)
        d_n = 32 * 1024
        assert one["adapter_per_row"] - many["adapter_per_row"] == pytest.approx(
            d_n - d_n / 64
        )

    def test_zero_k_is_projection_only(self):
        cfg = moe.BudgetConfig(r=8, n_experts=8, top_k=0, d=32, r_bar=12)
        out = moe.flop_budget("malora", [(1024, 1024)], cfg, batch=1)
        assert out["adapter_per_row"] == 32 * 1024

    def test_bench_config_ordering(self):
        flops = {
            m: moe.flop_budget(m, [(1024, 1024)], self.CFG, batch=64)["adapter_per_row"]
            for m in ("lora", "molora", "malora")
        }
        assert flops["lora"] <= flops["malora"] < flops["molora"]

    def test_batch_validation(self):
        with pytest.raises(ConfigError):
            moe.flop_budget("malora", SQUARE, self.CFG, batch=0)
