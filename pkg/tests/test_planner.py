"""Cost model arithmetic and layout search against a brute-force oracle."""

import numpy as np
import pytest

from advshield.arch import DEFAULT_ARCH, parse_arch
from advshield.errors import InfeasiblePlanError, ValidationError
from advshield.planner import (
    DefensePlan,
    ResourceBudget,
    check_plan,
    latency_model,
    load_budget,
    omp_cost,
    omp_cycles,
    omp_memory_words,
    plan,
    profile_costs,
    render_plan,
    save_budget,
    save_plan,
)

from oracles import grid_plan

SMALL_ARCH = "1x8x8-4C3-MP2-16FC-4FC"


def small_profile(omp_params=(16, 24, 4)):
    return profile_costs(SMALL_ARCH, omp_params)


def easy_budget(**overrides):
    base = dict(latency_s=1.0, dsp_slices=64, memory_words=10 ** 6,
                dsp_per_pu=4, cycles_per_mac=1.0, clock_hz=1e8)
    base.update(overrides)
    return ResourceBudget(**base)


class TestProfileCosts:

    def test_single_dense_layer(self):
        profile = profile_costs(parse_arch("10FC", input_shape=(10,)),
                                omp_params=(1, 1, 1))
        assert profile.total_macs == 100
        assert profile.max_weight == 110

    def test_first_conv_macs(self):
        profile = profile_costs("1x28x28-20C5-MP2-50C5-MP2-500FC-10FC")
        assert profile.layers[0].macs == 20 * 24 * 24 * 25

    def test_reference_net_totals(self):
        profile = profile_costs(DEFAULT_ARCH)
        assert profile.max_weight == 800 * 500 + 500 == 400500
        assert profile.total_macs == 2293000
        assert profile.max_activation_pair == 14400

    def test_layer_table(self):
        profile = profile_costs(DEFAULT_ARCH)
        kinds = [c.kind for c in profile.layers]
        assert kinds == ["ConvToken", "PoolToken", "ConvToken", "PoolToken",
                        "FCToken", "FCToken"]
        macs = [c.macs for c in profile.layers]
        assert macs == [288000, 0, 1600000, 0, 400000, 5000]
        assert sum(macs) == profile.total_macs
        # Widest adjacent activation pair straddles the first pool layer.
        pairs = [c.in_size + c.out_size for c in profile.layers]
        assert max(pairs) == pairs[1] == 11520 + 2880

    def test_pool_layers_cost_nothing(self):
        profile = profile_costs(DEFAULT_ARCH)
        for cost in profile.layers:
            if cost.kind == "PoolToken":
                assert cost.macs == 0 and cost.weight_params == 0

    def test_rejects_non_arch(self):
        with pytest.raises(ValidationError):
            profile_costs(42)


class TestOmpCost:

    def test_reference_cycles(self):
        assert omp_cycles(64, 225, 8) == 64 * (8 * 225 + 64) == 119296

    def test_zero_sparsity(self):
        assert omp_cycles(64, 225, 0) == 0

    def test_doubling_atoms_scales_kl_term(self):
        n, l, k = 32, 100, 6
        assert omp_cycles(n, 2 * l, k) - omp_cycles(n, l, k) == n * k * l

    def test_seconds_conversion(self):
        assert omp_cost(64, 225, 8, cycles_per_mac=2.0, clock_hz=1e6) == \
            pytest.approx(2.0 * 119296 / 1e6)

    def test_dictionary_words(self):
        assert omp_memory_words(64, 225) == 14400


class TestLatencyModel:

    def test_sequential_scales_with_defenders(self):
        profile = small_profile()
        budget = easy_budget()
        omp_s = omp_cost(profile.omp_n, profile.omp_l, profile.omp_k,
                         budget.cycles_per_mac, budget.clock_hz)
        one = latency_model(profile, 2, 1, "sequential", budget)
        two = latency_model(profile, 2, 2, "sequential", budget)
        assert two - omp_s == pytest.approx(2 * (one - omp_s))

    def test_parallel_independent_of_defenders(self):
        profile = small_profile()
        budget = easy_budget()
        assert latency_model(profile, 3, 1, "parallel", budget) == \
            latency_model(profile, 3, 7, "parallel", budget)

    def test_doubling_units_halves_dnn_term(self):
        profile = small_profile()
        budget = easy_budget()
        omp_s = omp_cost(profile.omp_n, profile.omp_l, profile.omp_k,
                         budget.cycles_per_mac, budget.clock_hz)
        one = latency_model(profile, 1, 1, "parallel", budget) - omp_s
        two = latency_model(profile, 2, 1, "parallel", budget) - omp_s
        assert two == pytest.approx(one / 2)

    def test_rejects_bad_layout(self):
        with pytest.raises(ValidationError):
            latency_model(small_profile(), 1, 1, "striped", easy_budget())


class TestPlanSearch:

    def test_no_dsp_budget_is_infeasible(self):
        with pytest.raises(InfeasiblePlanError) as err:
            plan(easy_budget(dsp_slices=0), small_profile())
        assert err.value.binding == "dsp"

    def test_forced_single_unit_single_defender(self):
        profile = small_profile()
        budget = easy_budget(dsp_slices=4, dsp_per_pu=4)
        mem_pu = profile.max_weight + profile.max_activation_pair
        budget = easy_budget(
            dsp_slices=4, dsp_per_pu=4,
            memory_words=mem_pu + omp_memory_words(profile.omp_n,
                                                   profile.omp_l))
        result = plan(budget, profile)
        assert (result.n_def, result.n_pu) == (1, 1)

    def test_plans_satisfy_constraints(self):
        rng = np.random.default_rng(0)
        profile = small_profile()
        found = 0
        for _ in range(80):
            budget = random_budget(rng)
            try:
                result = plan(budget, profile)
            except InfeasiblePlanError:
                continue
            found += 1
            assert check_plan(result, budget, profile) == []
        assert found >= 10

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(1)
        profile = small_profile()
        feasible = 0
        for _ in range(60):
            budget = random_budget(rng)
            expected = grid_plan(budget, profile)
            if expected is None:
                with pytest.raises(InfeasiblePlanError):
                    plan(budget, profile)
                continue
            feasible += 1
            result = plan(budget, profile)
            assert result.n_def == expected["n_def"]
            assert result.n_pu == expected["n_pu"]
            assert result.layout == expected["layout"]
        assert feasible >= 10

    def test_monotone_in_budgets(self):
        rng = np.random.default_rng(2)
        profile = small_profile()
        compared = 0
        for _ in range(60):
            budget = random_budget(rng)
            try:
                before = plan(budget, profile).n_def
            except InfeasiblePlanError:
                before = 0
            grown = ResourceBudget(
                budget.latency_s * float(rng.uniform(1, 3)),
                int(budget.dsp_slices * rng.integers(1, 3)),
                int(budget.memory_words * rng.integers(1, 3)),
                budget.dsp_per_pu, budget.cycles_per_mac, budget.clock_hz,
                budget.dsp_per_pe)
            try:
                after = plan(grown, profile).n_def
            except InfeasiblePlanError:
                after = 0
            assert after >= before
            compared += 1
        assert compared == 60

    def test_binding_order_memory_before_latency(self):
        profile = small_profile()
        # Memory cannot host even one unit and latency is hopeless too;
        # the report must name memory, the earlier constraint.
        budget = easy_budget(memory_words=10, latency_s=1e-12)
        with pytest.raises(InfeasiblePlanError) as err:
            plan(budget, profile)
        assert err.value.binding == "memory"

    def test_latency_binding_reported(self):
        profile = small_profile()
        budget = easy_budget(latency_s=1e-12)
        with pytest.raises(InfeasiblePlanError) as err:
            plan(budget, profile)
        assert err.value.binding == "latency"

    def test_parallel_preferred_on_ties(self):
        # Generous latency: parallel reaches the same defender count as
        # sequential and must win the tie.
        result = plan(easy_budget(), small_profile())
        assert result.layout == "parallel"

    def test_reported_usage_matches_budget_fields(self):
        budget = easy_budget()
        profile = small_profile()
        result = plan(budget, profile)
        assert result.usage["dsp_budget"] == budget.dsp_slices
        assert result.usage["memory_budget"] == budget.memory_words
        assert result.usage["dsp_used"] == \
            result.n_def * result.n_pu * budget.dsp_per_pu
        assert result.usage["latency_s"] == result.predicted_latency

    def test_check_plan_flags_corruption(self):
        budget = easy_budget()
        profile = small_profile()
        result = plan(budget, profile)
        assert check_plan(result, budget, profile) == []
        bloated = DefensePlan(result.n_def * 100, result.n_pu, result.n_pe,
                              result.layout, result.predicted_latency,
                              result.usage)
        problems = check_plan(bloated, budget, profile)
        assert problems and any("dsp" in p for p in problems)


def random_budget(rng):
    """Budgets sized to keep the oracle grid within 64x64."""
    dsp_per_pu = int(rng.integers(1, 6))
    return ResourceBudget(
        latency_s=float(10.0 ** rng.uniform(-6, -1)),
        dsp_slices=int(rng.integers(0, dsp_per_pu * 64 + 1)),
        memory_words=int(rng.integers(0, 2 * 10 ** 5)),
        dsp_per_pu=dsp_per_pu,
        cycles_per_mac=float(rng.uniform(0.5, 4.0)),
        clock_hz=float(rng.uniform(1e7, 2e8)),
    )


class TestBudgetSerialization:

    def test_round_trip(self, tmp_path):
        budget = easy_budget(dsp_per_pe=2)
        path = tmp_path / "budget.json"
        save_budget(budget, path)
        assert load_budget(path) == budget

    def test_pe_width_defaults_to_one(self, tmp_path):
        path = tmp_path / "budget.json"
        doc = easy_budget().to_dict()
        doc.pop("dsp_per_pe")
        path.write_text(__import__("json").dumps(doc))
        assert load_budget(path).dsp_per_pe == 1

    def test_plan_round_trip(self, tmp_path):
        result = plan(easy_budget(), small_profile())
        path = tmp_path / "plan.json"
        save_plan(result, path)
        loaded = DefensePlan.from_dict(
            __import__("json").loads(path.read_text()))
        assert loaded == result

    def test_budget_validation(self):
        with pytest.raises(ValidationError):
            easy_budget(latency_s=-1.0)
        with pytest.raises(ValidationError):
            easy_budget(clock_hz=0.0)
        with pytest.raises(ValidationError):
            easy_budget(dsp_per_pu=0)
        # Zero for a consumable budget is legal and simply infeasible.
        easy_budget(dsp_slices=0)
        easy_budget(memory_words=0)


def test_render_plan_mentions_every_budget():
    result = plan(easy_budget(), small_profile())
    text = render_plan(result)
    for needle in ("defenders", "processing units", "layout", "latency",
                   "dsp", "memory", "sparse-recovery"):
        assert needle in text
