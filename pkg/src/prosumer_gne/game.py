"""
Game-level quantities: value functions, game map, social cost and KKT residuals.

Agent i values a joint action as

    v_i(x) = c(z_i) + alpha_i * e(x),   e(x) = C(sum_j z_j) - sum_j c(z_j)

where ``c`` is the tariff cost of one agent's net power ``z_i`` and ``C`` the
community cost model (the tanh surrogate by default). Over the epigraph
decision ``[x_i; y_i]`` the own cost is ``sum(y_i)``, so the game map block of
agent i is ``[alpha_i D^T C'(Z); (1 - alpha_i) 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qp
from .economics import (ExactCommunityCost, SmoothCommunityCost, community_surplus,
                        energy_cost, net_power, smooth_cost, smooth_cost_gradient)
from .model import Scenario, agent_polytopes, net_community_power


def default_community(scenario: Scenario, exact: bool = False):
    if exact:
        return ExactCommunityCost(scenario.tariff, scenario.grid.dt)
    return SmoothCommunityCost(scenario.tariff, scenario.k_steepness, scenario.grid.dt)


def spread_steps(g):
    """Map a per-step gradient (..., T) onto interleaved decisions (..., 2T) via D^T."""
    g = np.asarray(g, dtype=float)
    out = np.empty(g.shape[:-1] + (2 * g.shape[-1],))
    out[..., 0::2] = g
    out[..., 1::2] = -g
    return out


class Market:
    """Per-scenario constant data shared by the game and the algorithms."""

    def __init__(self, scenario: Scenario, community=None):
        self.scenario = scenario
        self.community = community if community is not None else default_community(scenario)
        self.n = scenario.n_agents
        self.T = scenario.grid.T
        self.dt = scenario.grid.dt
        self.alpha = scenario.alpha
        self.baselines = scenario.baselines
        self.total_baseline = self.baselines.sum(axis=0)
        self.g_loc, self.h_loc = agent_polytopes(scenario)
        cc = scenario.coupling
        self.m = cc.m
        # (N, m, 2T) coupling block of each agent
        self.a_agent = cc.a_mat.reshape(self.m, self.n, 2 * self.T).transpose(1, 0, 2).copy()
        self.b = np.asarray(cc.b_vec)
        self.row_step = np.asarray(cc.row_step)
        # active sets of the last solve per call site, used as warm starts
        self._active = {}

    def coupling_value(self, x) -> np.ndarray:
        """A x for battery decisions of shape (N, 2T)."""
        return np.einsum("imk,ik->m", self.a_agent, x)

    def coupling_grad(self, mu) -> np.ndarray:
        """A_i^T mu for every agent, shape (N, 2T)."""
        return np.einsum("imk,m->ik", self.a_agent, mu)

    def aggregate(self, x) -> np.ndarray:
        return net_community_power(x, self.baselines)

    def solve(self, problems, what: str):
        sols = qp.solve_qp_batch(problems, active=self._active.get(what))
        for i, s in enumerate(sols):
            if s.status != qp.OPTIMAL:
                self._active.pop(what, None)
                raise qp.QpError(f"{what}: subproblem of agent {i} returned {s.status}")
        self._active[what] = [qp.active_rows(p, s) for p, s in zip(problems, sols)]
        return np.stack([s.x_opt for s in sols])

    def project(self, v, step: float = 1.0, grad=None, what: str = "projection"):
        """Per-agent ``argmin grad^T u + |u - v|^2 / (2 step)`` over the epigraph sets."""
        v = np.asarray(v, dtype=float)
        grad = np.zeros_like(v) if grad is None else grad
        problems = [qp.local_pfb_problem((self.g_loc[i], self.h_loc[i]), grad[i], v[i], step)
                    for i in range(self.n)]
        return self.solve(problems, what)


def _own_cost(z, scenario: Scenario, smooth: bool):
    if smooth:
        return smooth_cost(z, scenario.tariff, scenario.k_steepness) * scenario.grid.dt
    return energy_cost(z, scenario.tariff, scenario.grid.dt)


def _own_grad(z, scenario: Scenario, smooth: bool):
    t = scenario.tariff
    if smooth:
        g = smooth_cost_gradient(z, t, scenario.k_steepness)
    else:
        g = np.where(z >= 0, t.p_buy, t.p_sell)
    return g * scenario.grid.dt


def value_functions(x, scenario: Scenario, community=None, smooth_own: bool = False) -> np.ndarray:
    """``v_i`` of every agent at battery decisions ``x`` (N, 2T)."""
    community = community if community is not None else default_community(scenario)
    x = np.asarray(x, dtype=float).reshape(scenario.n_agents, -1)
    z = net_power(x) + scenario.baselines
    own = _own_cost(z, scenario, smooth_own).sum(axis=1)
    surplus = community.value(z.sum(axis=0)).sum() - own.sum()
    return own + scenario.alpha * surplus


def game_map(x, scenario: Scenario, community=None, smooth_own: bool = False) -> np.ndarray:
    """Pseudogradient ``[d v_i / d x_i]_i`` on battery decisions, shape (N, 2T).

    With the exact tariff the own-cost part is the one-sided derivative
    taken from the importing branch at ``z_i = 0``.
    """
    community = community if community is not None else default_community(scenario)
    x = np.asarray(x, dtype=float).reshape(scenario.n_agents, -1)
    z = net_power(x) + scenario.baselines
    alpha = scenario.alpha[:, None]
    per_step = (1.0 - alpha) * _own_grad(z, scenario, smooth_own) + alpha * community.grad(z.sum(axis=0))
    return spread_steps(per_step)


def epigraph_game_map(xt, market: Market) -> np.ndarray:
    """Game map on epigraph decisions (N, 3T), used by the forward-backward step."""
    xt = np.asarray(xt, dtype=float)
    T = market.T
    z_agg = market.aggregate(xt[:, :2 * T])
    alpha = market.alpha[:, None]
    fx = spread_steps(alpha * market.community.grad(z_agg)[None, :])
    fy = np.broadcast_to(1.0 - alpha, (market.n, T))
    return np.hstack([fx, fy])


def sigma(x, scenario: Scenario) -> float:
    """Social cost ``sum_i c(z_i) + e(x)`` with the exact tariff.

    Accepts battery decisions (N, 2T) or epigraph decisions (N, 3T).
    """
    x = np.asarray(x, dtype=float).reshape(scenario.n_agents, -1)[:, :2 * scenario.grid.T]
    dt = scenario.grid.dt
    z = net_power(x) + scenario.baselines
    own = energy_cost(z, scenario.tariff, dt).sum()
    return float(own + community_surplus(x, scenario.baselines, scenario.tariff, dt).sum())


def monotonicity_probe(scenario: Scenario, n_samples: int, rng_seed=None, community=None,
                       smooth_own: bool = False, batch: int = 1000) -> float:
    """Smallest ``<x - y, F(x) - F(y)>`` over random pairs in the box hull of the feasible sets.

    A value below about ``-1e-8`` exhibits a pair at which the game map is
    not monotone.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng_seed)
    T = scenario.grid.T
    ub = np.stack([p.battery.power_bounds(T) for p in scenario.prosumers])
    worst = np.inf
    done = 0
    while done < n_samples:
        k = min(batch, n_samples - done)
        xs = rng.uniform(size=(k,) + ub.shape) * ub
        ys = rng.uniform(size=(k,) + ub.shape) * ub
        for x, y in zip(xs, ys):
            fx = game_map(x, scenario, community, smooth_own)
            fy = game_map(y, scenario, community, smooth_own)
            worst = min(worst, float(np.sum((x - y) * (fx - fy))))
        done += k
    return worst


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    primal: float
    complementarity: float
    dual_sign: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity, self.dual_sign)


def kkt_residual(xt, lambda_a, scenario: Scenario = None, market: Market = None) -> KktResidual:
    """Residuals of the variational GNE conditions at ``(xt, lambda_a)``.

    ``xt`` holds epigraph decisions (N, 3T) and ``lambda_a`` the coupling
    prices. Stationarity is the projected-gradient residual
    ``|xt - P_X[xt - (F(xt) + A^T lambda_a)]|_inf``.
    """
    if market is None:
        market = Market(scenario)
    xt = np.asarray(xt, dtype=float)
    mu = np.asarray(lambda_a, dtype=float)
    T = market.T
    x = xt[:, :2 * T]
    grad = epigraph_game_map(xt, market)
    if market.m:
        grad[:, :2 * T] += market.coupling_grad(mu)
    proj = market.project(xt - grad, what="kkt projection")
    stat = float(np.max(np.abs(xt - proj)))
    if market.m:
        slack = market.b - market.coupling_value(x)
        primal = float(np.max(np.maximum(-slack, 0.0)))
        comp = float(np.max(np.abs(mu * slack)))
        sign = float(max(0.0, -mu.min()))
    else:
        primal = comp = sign = 0.0
    return KktResidual(stat, primal, comp, sign)
