import numpy as np
import pytest

from prosumer_gne.economics import Tariff, energy_cost
from prosumer_gne.model import (BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid,
                                assemble_local_constraints, augment_epigraph, build_batch_matrices,
                                idle_decisions, net_community_power, power_corridor, simulate_soc,
                                summation_matrix)


def battery(**kw):
    d = dict(a_state=1.0, b_charge=0.95, b_discharge=1 / 0.95, e_min=0.0, e_max=4.0,
             p_in_max=1.0, p_out_max=1.0, e0=2.0)
    d.update(kw)
    return BatteryParams(**d)


class TestBatchMatrices:
    def test_single_step(self):
        lam, gam = build_batch_matrices(battery(), TimeGrid(T=1))
        np.testing.assert_allclose(lam, [1.0])
        np.testing.assert_allclose(gam, [[0.95, -1 / 0.95]])

    def test_lossless_integrator(self):
        _, gam = build_batch_matrices(battery(b_charge=1.0, b_discharge=1.0), TimeGrid(T=2))
        np.testing.assert_allclose(gam, [[1, -1, 0, 0], [1, -1, 1, -1]])

    def test_decay_entry(self):
        bat = battery(a_state=0.99)
        _, gam = build_batch_matrices(bat, TimeGrid(T=3))
        assert gam[2, 0] == pytest.approx(0.99 ** 2 * 0.95)

    def test_matches_recurrence(self, rng):
        for _ in range(100):
            bat = battery(a_state=rng.uniform(0.9, 1.0), b_charge=rng.uniform(0.8, 1.0),
                          b_discharge=rng.uniform(1.0, 1.2), e0=rng.uniform(0, 4))
            T = int(rng.integers(1, 8))
            x = rng.uniform(0, 1, size=2 * T)
            lam, gam = build_batch_matrices(bat, TimeGrid(T=T))
            np.testing.assert_allclose(lam * bat.e0 + gam @ x, simulate_soc(bat, x), atol=1e-12)


class TestLocalConstraints:
    def test_row_count(self):
        a_c, b_c = assemble_local_constraints(ProsumerConfig(battery(), np.zeros(5)), TimeGrid(T=5))
        assert a_c.shape == (30, 10) and b_c.shape == (30,)

    def test_idle_feasible(self):
        a_c, b_c = assemble_local_constraints(ProsumerConfig(battery(), np.zeros(3)), TimeGrid(T=3))
        assert np.all(a_c @ np.zeros(6) <= b_c)

    def test_full_charge_from_full_violates(self):
        bat = battery(e0=4.0)
        a_c, b_c = assemble_local_constraints(ProsumerConfig(bat, np.zeros(1)), TimeGrid(T=1))
        assert np.any(a_c @ np.array([1.0, 0.0]) > b_c)

    def test_rejection_sampling_agrees_with_simulation(self, rng):
        bat = battery(e0=1.0, e_max=2.0)
        T = 4
        a_c, b_c = assemble_local_constraints(ProsumerConfig(bat, np.zeros(T)), TimeGrid(T=T))
        for _ in range(1000):
            x = rng.uniform(0, 1.2, size=2 * T)
            soc = simulate_soc(bat, x)
            direct = np.all(x <= 1.0) and np.all(soc >= -1e-12) and np.all(soc <= 2.0 + 1e-12)
            assert direct == bool(np.all(a_c @ x <= b_c + 1e-12))

    def test_per_step_energy_floor(self):
        bat = battery(e0=0.5, e_min=np.array([0.0, 0.0, 2.0]), e_max=4.0)
        a_c, b_c = assemble_local_constraints(ProsumerConfig(bat, np.zeros(3)), TimeGrid(T=3))
        assert np.any(a_c @ np.zeros(6) > b_c)
        x = np.array([1, 0, 0.6, 0, 0, 0.0])
        assert np.all(a_c @ x <= b_c + 1e-12)

    @pytest.mark.parametrize("kw", [dict(e_min=2.0, e_max=1.0), dict(e0=5.0), dict(p_in_max=0.0),
                                    dict(a_state=1.5), dict(b_charge=-1.0)])
    def test_invalid_battery(self, kw):
        with pytest.raises(ValueError):
            battery(**kw)


class TestEpigraph:
    def tariff(self, T):
        return Tariff.flat(0.2, 0.05, T)

    def test_zero_net_power(self):
        a_c, b_c = assemble_local_constraints(ProsumerConfig(battery(), np.zeros(2)), TimeGrid(T=2))
        a_t, b_t, l = augment_epigraph(a_c, b_c, self.tariff(2), np.zeros(2))
        assert a_t.shape == (16, 6)
        assert np.all(a_t @ np.zeros(6) <= b_t)
        assert l @ np.zeros(6) == 0

    def test_positive_branch(self):
        a_c, b_c = assemble_local_constraints(ProsumerConfig(battery(), np.zeros(1)), TimeGrid(T=1))
        a_t, b_t, l = augment_epigraph(a_c, b_c, self.tariff(1), np.array([1.0]))
        # idle battery, z = +1: the buying row binds at y = 0.2
        lo = np.max(-(b_t[-2:] - a_t[-2:, :2] @ np.zeros(2)))
        assert lo == pytest.approx(0.2)

    def test_envelope_equals_energy_cost(self, rng):
        T = 5
        tariff = Tariff(rng.uniform(0.15, 0.3, T), rng.uniform(0.0, 0.1, T))
        base = rng.normal(size=T)
        a_c, b_c = assemble_local_constraints(ProsumerConfig(battery(), base), TimeGrid(T=T))
        a_t, b_t, l = augment_epigraph(a_c, b_c, tariff, base)
        for _ in range(20):
            x = rng.uniform(0, 0.3, size=2 * T)
            z = x[0::2] - x[1::2] + base
            # fix the battery part and minimise over y only
            rows = a_t[-2 * T:]
            y_min = np.max((b_t[-2 * T:] - rows[:, :2 * T] @ x).reshape(2, T) * -1, axis=0)
            assert y_min.sum() == pytest.approx(energy_cost(z, tariff).sum(), abs=1e-12)


class TestAggregation:
    def test_single(self):
        s = summation_matrix(1, TimeGrid(T=1))
        np.testing.assert_allclose(s @ [3.0, 1.0], [2.0])

    def test_cancel(self):
        s = summation_matrix(2, TimeGrid(T=1))
        np.testing.assert_allclose(s @ [1.0, 0, 0, 1.0], [0.0])

    def test_loop_oracle(self, rng):
        n, T = 3, 2
        x = rng.normal(size=(n, 2 * T))
        s = summation_matrix(n, TimeGrid(T=T))
        loop = [sum(x[i, 2 * t] - x[i, 2 * t + 1] for i in range(n)) for t in range(T)]
        np.testing.assert_allclose(s @ x.ravel(), loop)

    def test_net_power_constant(self):
        base = np.array([[2.0, 2.0], [3.0, 3.0]])
        np.testing.assert_allclose(net_community_power(np.zeros((2, 4)), base), [5, 5])

    def test_net_power_offset(self):
        base = np.array([[1.0, -0.5]])
        x = np.array([[0, 1.0, 0.5, 0]])
        np.testing.assert_allclose(net_community_power(x, base), [0, 0])

    def test_net_power_loop(self, rng):
        base = rng.normal(size=(4, 3))
        x = rng.uniform(size=(4, 6))
        loop = [sum(x[i, 2 * t] - x[i, 2 * t + 1] + base[i, t] for i in range(4)) for t in range(3)]
        np.testing.assert_allclose(net_community_power(x, base), loop)


class TestScenario:
    def test_round_trip(self, small_scenario, tmp_path):
        path = tmp_path / "s.json"
        small_scenario.save(path)
        back = Scenario.load(path)
        assert back.to_json() == small_scenario.to_json()

    def test_alpha_normalised(self):
        grid = TimeGrid(T=2)
        pros = [ProsumerConfig(battery(), np.zeros(2), a) for a in (1.0, 3.0)]
        sc = Scenario(grid, pros, Tariff.flat(0.2, 0.05, 2), CouplingConstraints.none(2, grid))
        np.testing.assert_allclose(sc.alpha, [0.25, 0.75])

    def test_bad_schema(self):
        with pytest.raises(ValueError):
            Scenario.from_dict({"schema": "other"})

    def test_corridor_rows(self):
        grid = TimeGrid(T=3)
        base = np.ones((2, 3))
        cc = power_corridor(2, grid, base, -1.0, 1.5)
        assert cc.m == 6
        x = np.zeros(12)
        # idle aggregate is 2 > 1.5, so the upper rows are violated
        assert np.all((cc.a_mat @ x > cc.b_vec)[:3])

    def test_idle_decisions_cost(self, small_scenario):
        xt = idle_decisions(small_scenario)
        T = small_scenario.grid.T
        cost = energy_cost(small_scenario.baselines, small_scenario.tariff, small_scenario.grid.dt)
        np.testing.assert_allclose(xt[:, 2 * T:], cost)
