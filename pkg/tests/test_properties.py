import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prosumer_gne.economics import (Tariff, community_surplus, energy_cost, ir_gate,
                                    smooth_cost_gradient)
from prosumer_gne.model import BatteryParams, TimeGrid, build_batch_matrices, simulate_soc
from prosumer_gne.qp import QpProblem, project_nonneg, qp_kkt_residual, solve_qp

finite = st.floats(-10, 10, allow_nan=False)


@st.composite
def tariffs(draw, steps):
    sell = draw(arrays(float, steps, elements=st.floats(0, 0.2)))
    spread = draw(arrays(float, steps, elements=st.floats(0, 0.3)))
    return Tariff(sell + spread, sell)


@st.composite
def markets(draw):
    n = draw(st.integers(1, 5))
    T = draw(st.integers(1, 6))
    x = draw(arrays(float, (n, 2 * T), elements=st.floats(0, 2)))
    base = draw(arrays(float, (n, T), elements=finite))
    return x, base, draw(tariffs(T))


@given(markets())
def test_surplus_nonpositive(m):
    x, base, tariff = m
    assert np.all(community_surplus(x, base, tariff) <= 1e-12)


@given(markets())
def test_cost_is_max_of_pieces(m):
    _, base, tariff = m
    c = energy_cost(base, tariff)
    np.testing.assert_allclose(c, np.maximum(tariff.p_buy * base, tariff.p_sell * base))


@given(st.integers(1, 8).flatmap(lambda T: st.tuples(arrays(float, T, elements=finite), tariffs(T))),
       st.floats(0.1, 100))
def test_surrogate_within_tariffs(zt, k):
    z, tariff = zt
    g = smooth_cost_gradient(z, tariff, k)
    assert np.all(g >= tariff.p_sell - 1e-15) and np.all(g <= tariff.p_buy + 1e-15)


@given(arrays(float, st.integers(0, 20), elements=finite))
def test_projection_idempotent(v):
    p = project_nonneg(v)
    assert np.all(p >= 0)
    np.testing.assert_array_equal(project_nonneg(p), p)


@given(st.integers(1, 4), st.integers(1, 5), st.data())
def test_gate_matches_loop(n, T, data):
    alpha = data.draw(arrays(float, n, elements=st.floats(0, 1)))
    e = data.draw(arrays(float, T, elements=finite))
    pay = data.draw(arrays(float, (n, T), elements=finite))
    mask = ir_gate(alpha, e, pay)
    for t in range(T):
        assert mask[t] == all(alpha[i] * e[t] + pay[i, t] <= 1e-12 for i in range(n))


@given(st.integers(1, 10), st.floats(0.8, 1.0), st.floats(0.5, 1.0), st.floats(1.0, 1.5), st.data())
def test_batch_matrices_match_recurrence(T, a, bc, bd, data):
    bat = BatteryParams(a, bc, bd, 0.0, 10.0, 1.0, 1.0, data.draw(st.floats(0, 10)))
    x = data.draw(arrays(float, 2 * T, elements=st.floats(0, 1)))
    lam, gam = build_batch_matrices(bat, TimeGrid(T=T))
    np.testing.assert_allclose(lam * bat.e0 + gam @ x, simulate_soc(bat, x), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_box_qp_certified(n, seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-2, 0, n)
    hi = lo + rng.uniform(0.1, 3, n)
    a = np.vstack([-np.eye(n), np.eye(n), rng.normal(size=(2, n))])
    b = np.concatenate([-lo, hi, rng.uniform(1, 2, 2) + np.abs(rng.normal(size=(2, n))) @ np.maximum(-lo, hi)])
    p = QpProblem(rng.uniform(0, 2, n), rng.normal(size=n), a, b)
    sol = solve_qp(p)
    assert sol.status == "optimal"
    scale = 1 + np.max(np.abs(p.lin)) + np.max(np.abs(b))
    assert max(qp_kkt_residual(p, sol.x_opt, sol.dual).values()) <= 1e-8 * scale
