import numpy as np
import pytest

from prosumer_gne import algorithms as alg
from prosumer_gne.economics import ExactCommunityCost, QuadraticCommunityCost, Tariff
from prosumer_gne.game import Market
from prosumer_gne.harness import ExperimentConfig, generate_scenario
from prosumer_gne.model import (BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid,
                                idle_decisions, power_corridor)


def lone(T=4, seed=0, tariff=None):
    rng = np.random.default_rng(seed)
    grid = TimeGrid(T=T)
    tariff = tariff or Tariff(rng.uniform(0.15, 0.3, T), rng.uniform(0, 0.1, T))
    pro = ProsumerConfig(BatteryParams.from_efficiency(2.0, 1.0), rng.normal(size=T), 1.0)
    return Scenario(grid, [pro], tariff, CouplingConstraints.none(1, grid))


class TestStopping:
    def test_zero_iterations(self, small_scenario):
        state, trace = alg.run("pfb", small_scenario, alg.StoppingRule(max_iter=0))
        assert len(trace) == 0
        np.testing.assert_array_equal(state.x, idle_decisions(small_scenario))

    def test_relative_change(self, small_scenario):
        rule = alg.StoppingRule(max_iter=300, rel_sigma_tol=1e-5)
        _, trace = alg.run("pfb", small_scenario, rule)
        assert len(trace) < 300
        s = trace.sigma
        assert abs(s[-1] - s[-2]) <= 1e-5 * abs(s[-2])

    def test_invalid(self):
        with pytest.raises(ValueError):
            alg.StoppingRule(max_iter=-1)
        with pytest.raises(ValueError):
            alg.StoppingRule(rel_sigma_tol=0)

    def test_unknown_algorithm(self, small_scenario):
        with pytest.raises(ValueError):
            alg.run("gd", small_scenario)

    def test_trace_csv(self, small_scenario, tmp_path):
        _, trace = alg.run("admm", small_scenario, alg.StoppingRule(max_iter=5))
        trace.to_csv(tmp_path / "t.csv")
        back = alg.ConvergenceTrace.from_csv(tmp_path / "t.csv")
        assert back.records == trace.records


class TestPfb:
    def test_stationary_fixed_point(self):
        sc = lone()
        sc = Scenario(sc.grid, sc.prosumers, Tariff.flat(0.0, 0.0, 4), sc.coupling)
        market = Market(sc, QuadraticCommunityCost(0.0))
        state = alg.IterateState.initial(sc)
        new = alg.pfb_step(state, market=market)
        np.testing.assert_allclose(new.x, state.x, atol=1e-9)

    def test_loose_corridor_keeps_zero_price(self, small_scenario):
        sc = small_scenario
        cc = power_corridor(sc.n_agents, sc.grid, sc.baselines, -1e3, 1e3)
        sc = Scenario(sc.grid, sc.prosumers, sc.tariff, cc)
        state, _ = alg.run("pfb", sc, alg.StoppingRule(max_iter=20))
        assert np.all(state.lambda_a == 0)

    def test_gate_freezes_rows(self, small_scenario):
        market = Market(small_scenario)
        m = market.m
        state, _ = alg.run("pfb", small_scenario, alg.StoppingRule(max_iter=5), gate=False)
        # a large import price makes charging agents pay more than their share
        price = np.where(np.arange(m) < m // 2, 5.0, 0.0)
        state = alg.IterateState(state.x, state.lambda_ex, state.y_agg, price, state.y_a)
        new = alg.pfb_step(state, market=market, gate=True)
        frozen = new.gated_steps
        assert frozen > 0
        mask = alg._gate_mask(market, state.battery(), state.lambda_a, True)
        rows = ~mask[market.row_step]
        assert new.lambda_a[rows].tobytes() == state.lambda_a[rows].tobytes()

    def test_bad_step(self, small_scenario):
        with pytest.raises(ValueError):
            alg.pfb_step(alg.IterateState.initial(small_scenario), small_scenario, alpha_step=0)


class TestAdmm:
    def test_single_agent_standalone(self):
        sc = lone(T=4, seed=3)
        state, _ = alg.run("admm", sc, alg.StoppingRule(max_iter=3000, rel_sigma_tol=1e-12),
                           community=ExactCommunityCost(sc.tariff))
        assert alg.sigma(state.x, sc) == pytest.approx(alg.standalone_costs(sc)[0], abs=1e-5)

    def test_flat_tariff_no_coupling_is_standalone(self):
        cfg = ExperimentConfig(n_agents=3, grid=TimeGrid(T=6, dt=4.0))
        base = generate_scenario(cfg, 5)
        flat = Tariff.flat(0.5, 0.5, 6)
        sc = Scenario(base.grid, base.prosumers, flat, CouplingConstraints.none(3, base.grid))
        state, _ = alg.run("admm", sc, alg.StoppingRule(max_iter=2000, rel_sigma_tol=1e-12))
        own = alg.base_case_costs(state.x, sc)
        np.testing.assert_allclose(own, alg.standalone_costs(sc), atol=1e-5)

    def test_bad_rho(self, small_scenario):
        with pytest.raises(ValueError):
            alg.admm_step(alg.IterateState.initial(small_scenario), small_scenario, rho=0)

    def test_price_scaling(self):
        st = alg.IterateState(np.zeros((4, 9)), np.zeros(3), np.zeros(3), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(alg.coupling_price("admm", st, 0.5), 0.5)
        np.testing.assert_allclose(alg.coupling_price("pfb", st, 0.5), 1.0)


class TestCentral:
    def test_single_agent(self):
        sc = lone(T=5, seed=1)
        assert alg.centralized_reference(sc).sigma == pytest.approx(alg.standalone_costs(sc)[0], abs=1e-8)

    def test_selfish_is_concatenation(self, small_scenario):
        sc = small_scenario
        sc = Scenario(sc.grid, sc.prosumers, sc.tariff, CouplingConstraints.none(sc.n_agents, sc.grid))
        cen = alg.centralized_reference(sc, objective="selfish")
        assert cen.objective == pytest.approx(alg.standalone_costs(sc).sum(), abs=1e-7)

    def test_lower_bound(self, small_scenario):
        cen = alg.centralized_reference(small_scenario)
        state, _ = alg.run("pfb", small_scenario, alg.StoppingRule(max_iter=30))
        assert alg.sigma(state.x, small_scenario) >= cen.sigma - 1e-6

    def test_infeasible(self, small_scenario):
        sc = small_scenario
        cc = power_corridor(sc.n_agents, sc.grid, sc.baselines, 50.0, 60.0)
        with pytest.raises(Exception):
            alg.centralized_reference(Scenario(sc.grid, sc.prosumers, sc.tariff, cc))

    def test_unknown_objective(self, small_scenario):
        with pytest.raises(ValueError):
            alg.centralized_reference(small_scenario, objective="x")


class TestPBest:
    def test_identical(self):
        out = alg.p_best({"pfb": -2.0, "admm": -2.0})
        assert out["gaps"] == {"pfb": 1.0, "admm": 1.0}

    def test_better_one(self):
        out = alg.p_best({"pfb": -2.0, "admm": -1.9})
        assert out["gaps"]["pfb"] == 1.0 and out["gaps"]["admm"] > 1.0

    def test_positive_costs(self):
        out = alg.p_best({"pfb": 2.0, "admm": 2.2})
        assert out["gaps"]["admm"] == pytest.approx(1.1)

    def test_empty(self):
        with pytest.raises(ValueError):
            alg.p_best({})


class TestIr:
    def test_mechanism_minus_base_is_share_plus_payment(self, small_scenario, rng):
        sc = small_scenario
        x = rng.uniform(size=(sc.n_agents, 2 * sc.grid.T)) * 0.01
        price = rng.uniform(size=sc.coupling.m)
        from prosumer_gne.economics import community_surplus, coupling_payments
        e = community_surplus(x, sc.baselines, sc.tariff, sc.grid.dt).sum()
        pay = coupling_payments(price, sc.coupling.a_mat, sc.coupling.row_step, x, sc.grid.T).sum(axis=1)
        diff = alg.mechanism_costs(x, price, sc) - alg.base_case_costs(x, sc)
        np.testing.assert_allclose(diff, sc.alpha * e + pay)
