"""
Equilibrium-seeking loops: preconditioned forward-backward (pFB) and the
alpha-weighted exchange ADMM, both with the individual-rationality gate on
the coupling prices, plus the centralized welfare reference.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import qp
from .economics import community_surplus, coupling_payments, energy_cost, ir_gate, net_power
from .game import Market, epigraph_game_map, kkt_residual, sigma
from .model import Scenario, agent_polytopes, assemble_local_constraints, idle_decisions

logger = logging.getLogger(__name__)

ALGORITHMS = ("pfb", "admm")
PUNISH_FACTOR = 1e-3


@dataclass(frozen=True)
class IterateState:
    """Iterates shared by both algorithms.

    ``x`` stacks the epigraph decisions of all agents, shape (N, 3T). The
    exchange variables ``lambda_ex`` and ``y_agg`` are only used by ADMM, as
    is ``y_a``. For ADMM ``lambda_a`` is the scaled dual; the coupling price
    is ``lambda_a / (N rho)``.
    """

    x: np.ndarray
    lambda_ex: np.ndarray
    y_agg: np.ndarray
    lambda_a: np.ndarray
    y_a: np.ndarray
    iter: int = 0
    gated_steps: int = 0

    @classmethod
    def initial(cls, scenario: Scenario) -> "IterateState":
        T, m = scenario.grid.T, scenario.coupling.m
        return cls(x=idle_decisions(scenario), lambda_ex=np.zeros(T), y_agg=np.zeros(T),
                   lambda_a=np.zeros(m), y_a=np.zeros(m))

    def battery(self) -> np.ndarray:
        return self.x[:, : 2 * (self.x.shape[1] // 3)]


@dataclass(frozen=True)
class StoppingRule:
    """Stop on small relative change of the social cost, or after ``max_iter``.

    The sigma test is only armed from iteration ``min_iter`` on, so a start
    where nothing moves yet cannot end the run. With ``residual_tol`` set, it
    additionally requires all KKT residuals below that value.
    """

    max_iter: int = 200
    rel_sigma_tol: float = 1e-5
    residual_tol: float | None = None
    min_iter: int = 10

    def __post_init__(self):
        if self.max_iter < 0 or self.min_iter < 1:
            raise ValueError("max_iter must be >= 0 and min_iter >= 1")
        if not self.rel_sigma_tol > 0:
            raise ValueError("rel_sigma_tol must be positive")

    def satisfied(self, iteration: int, rel_change: float, residual: float) -> bool:
        if iteration < self.min_iter or rel_change > self.rel_sigma_tol:
            return False
        return self.residual_tol is None or residual <= self.residual_tol


@dataclass
class TraceRecord:
    iter: int
    sigma: float
    stat_res: float
    primal_res: float
    comp_res: float
    dx_inf: float
    gate_frozen_steps: int
    wall_ms: float


TRACE_COLUMNS = [f.name for f in fields(TraceRecord)]


@dataclass
class ConvergenceTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def sigma(self) -> np.ndarray:
        return self.column("sigma")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([repr(getattr(r, c)) for c in TRACE_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        types = {f.name: f.type for f in fields(TraceRecord)}
        recs = [TraceRecord(**{k: (int(v) if types[k] == "int" else float(v)) for k, v in row.items()})
                for row in rows]
        return cls(recs)


class StepError(RuntimeError):
    """An iteration failed; carries the state and trace reached so far."""

    def __init__(self, msg, state=None, trace=None):
        super().__init__(msg)
        self.state = state
        self.trace = trace
        self.state = state
        self.trace = trace


def _gate_mask(market: Market, x, price, gate: bool):
    """Per-step boolean: true where coupling prices may be updated."""
    if not gate or market.m == 0:
        return np.ones(market.T, dtype=bool)
    sc = market.scenario
    surplus = community_surplus(x, market.baselines, sc.tariff, market.dt)
    pay = coupling_payments(price, sc.coupling.a_mat, market.row_step, x, market.T)
    return ir_gate(market.alpha, surplus, pay)


def pfb_step(state: IterateState, scenario: Scenario = None, alpha_step: float = 0.1,
             beta_step: float = 0.1, gate: bool = True, market: Market = None) -> IterateState:
    """One preconditioned forward-backward iteration.

    Primal: every agent projects ``x_i - alpha_step (F_i(x) + A_i^T lambda_a)``
    onto its own polyhedron. Dual: reflected ascent
    ``lambda_a <- max(0, lambda_a + beta_step (2 A x' - A x - b))``, with the
    rows of gated steps kept at their previous value.
    """
    if alpha_step <= 0 or beta_step <= 0:
        raise ValueError("step sizes must be positive")
    market = market or Market(scenario)
    T = market.T
    xt = state.x
    x = xt[:, :2 * T]
    grad = epigraph_game_map(xt, market)
    if market.m:
        grad[:, :2 * T] += market.coupling_grad(state.lambda_a)
    try:
        xt_new = market.project(xt, step=alpha_step, grad=grad, what="pfb projection")
    except qp.QpError as err:
        raise StepError(f"pfb iteration {state.iter + 1}: {err}") from err

    lam = state.lambda_a
    frozen = 0
    if market.m:
        mask = _gate_mask(market, x, lam, gate)
        frozen = int((~mask).sum())
        ax_old = market.coupling_value(x)
        ax_new = market.coupling_value(xt_new[:, :2 * T])
        cand = qp.project_nonneg(lam + beta_step * (2 * ax_new - ax_old - market.b))
        lam = np.where(mask[market.row_step], cand, lam)
    return replace(state, x=xt_new, lambda_a=lam, iter=state.iter + 1, gated_steps=frozen)


def admm_step(state: IterateState, scenario: Scenario = None, rho: float = 0.1,
              gate: bool = True, market: Market = None, punish: bool = True) -> IterateState:
    """One alpha-weighted exchange ADMM iteration.

    Agents solve, in parallel,

        min  (1 - alpha_i) sum(y_i) + l_p^T x_i
             + alpha_i/(2 rho) |D x_i - r_i|^2 + 1/(2 rho) |A_i x_i - r_a,i|^2

    with ``r_i = D x_i^k - (S x^k - y^k + lambda^k)/N`` and
    ``r_a,i = A_i x_i^k - (A x^k - y_a^k + lambda_a^k)/N``. The coordinator
    then takes the proximal step of the community cost for ``y`` with
    parameter ``N rho`` (the sharing form of the agent penalty), updates the
    exchange dual, projects ``A x + lambda_a`` onto ``{u <= b}`` and moves the
    coupling dual on the steps the IR gate leaves open. The coupling price is
    ``lambda_a / (N rho)``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    market = market or Market(scenario)
    sc = market.scenario
    n, T, dt = market.n, market.T, market.dt
    x = state.battery()
    alpha = market.alpha

    d_x = x[:, 0::2] - x[:, 1::2]
    sx = d_x.sum(axis=0)
    r = d_x - (sx - state.y_agg + state.lambda_ex)[None, :] / n

    d_mat = np.kron(np.eye(T), [1.0, -1.0])
    own_w = np.maximum(1.0 - alpha, 1e-6)
    punish_w = PUNISH_FACTOR * float(np.mean(sc.tariff.p_buy)) * dt

    if market.m:
        ax = market.coupling_value(x)
        ra = np.einsum("imk,ik->im", market.a_agent, x) - ((ax - state.y_a + state.lambda_a) / n)[None, :]

    problems = []
    for i in range(n):
        refs = [(alpha[i], d_mat, r[i])]
        if market.m:
            refs.append((1.0, market.a_agent[i], ra[i]))
        extra = None
        if punish:
            # discharge is discouraged where the reference asks for net charging
            extra = np.zeros(3 * T)
            extra[1:2 * T:2] = np.where(r[i] > 0, punish_w, 0.0)
        problems.append(qp.local_prox_problem((market.g_loc[i], market.h_loc[i]), refs, extra,
                                              rho=rho, own_weight=own_w[i]))
    try:
        xt_new = market.solve(problems, "admm agent update")
    except qp.QpError as err:
        raise StepError(f"admm iteration {state.iter + 1}: {err}") from err

    x_new = xt_new[:, :2 * T]
    sx_new = (x_new[:, 0::2] - x_new[:, 1::2]).sum(axis=0)
    total = market.total_baseline
    y_new = market.community.prox(sx_new + state.lambda_ex + total, n * rho) - total
    lam_new = state.lambda_ex + sx_new - y_new

    lam_a, y_a = state.lambda_a, state.y_a
    frozen = 0
    if market.m:
        mask = _gate_mask(market, x, coupling_price("admm", state, rho), gate)
        frozen = int((~mask).sum())
        ax_new = market.coupling_value(x_new)
        y_a = np.minimum(ax_new + state.lambda_a, market.b)
        cand = state.lambda_a + ax_new - y_a
        lam_a = np.where(mask[market.row_step], cand, state.lambda_a)
    return replace(state, x=xt_new, lambda_ex=lam_new, y_agg=y_new, lambda_a=lam_a,
                   y_a=y_a, iter=state.iter + 1, gated_steps=frozen)


def coupling_price(algorithm: str, state: IterateState, rho: float) -> np.ndarray:
    """Coupling multipliers in cost units (ADMM stores them scaled by N rho)."""
    if algorithm == "admm":
        return state.lambda_a / (state.x.shape[0] * rho)
    return state.lambda_a


def run(algorithm: str, scenario: Scenario, stopping: StoppingRule = None, rng_seed=None,
        rho: float = 0.1, gate: bool = True, community=None, x0=None):
    """Iterate one algorithm until the stopping rule fires.

    Both loops are deterministic; ``rng_seed`` is accepted for interface
    symmetry with the experiment harness and only seeds a randomised start
    when ``x0 == "random"``.

    Returns
    -------
    state : IterateState
    trace : ConvergenceTrace
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    stopping = stopping or StoppingRule()
    market = Market(scenario, community)
    state = IterateState.initial(scenario)
    if isinstance(x0, str) and x0 == "random":
        rng = np.random.default_rng(rng_seed)
        T = scenario.grid.T
        ub = np.stack([p.battery.power_bounds(T) for p in scenario.prosumers])
        guess = np.hstack([rng.uniform(size=ub.shape) * ub, state.x[:, 2 * T:]])
        state = replace(state, x=market.project(guess))
    elif x0 is not None:
        state = replace(state, x=np.asarray(x0, dtype=float))
    trace = ConvergenceTrace()
    sigma_prev = sigma(state.x, scenario)
    T = scenario.grid.T
    for _ in range(stopping.max_iter):
        t0 = time.perf_counter()
        try:
            if algorithm == "pfb":
                new = pfb_step(state, alpha_step=rho, beta_step=rho, gate=gate, market=market)
            else:
                new = admm_step(state, rho=rho, gate=gate, market=market)
        except StepError as err:
            err.state, err.trace = state, trace
            raise
        wall = (time.perf_counter() - t0) * 1e3
        price = coupling_price(algorithm, new, rho)
        res = kkt_residual(new.x, price, market=market)
        s = sigma(new.x, scenario)
        dx = float(np.max(np.abs(new.x[:, :2 * T] - state.x[:, :2 * T])))
        trace.append(TraceRecord(new.iter, s, res.stationarity, res.primal, res.complementarity,
                                 dx, new.gated_steps, wall))
        state = new
        rel = abs(s - sigma_prev) / max(abs(sigma_prev), 1e-12)
        sigma_prev = s
        if stopping.satisfied(new.iter, rel, res.max()):
            break
    return state, trace


# --------------------------------------------------------------------------
# centralized references and normalisation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CentralSolution:
    x: np.ndarray
    sigma: float
    objective: float
    lambda_a: np.ndarray
    status: str


def _block_diag(blocks):
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def centralized_reference(scenario: Scenario, tol: float = 1e-8, objective: str = "welfare") -> CentralSolution:
    """Welfare optimum of the sharing problem, solved as one LP.

    ``objective="welfare"`` minimises the exact community cost of the
    aggregate (equal to sum of own costs plus surplus) subject to all local
    and coupling constraints. ``objective="selfish"`` drops the surplus and
    minimises the plain sum of own costs.

    Raises
    ------
    qp.QpError
        If the coupling constraints leave no feasible point.
    """
    n, T, dt = scenario.n_agents, scenario.grid.T, scenario.grid.dt
    cc = scenario.coupling
    tariff = scenario.tariff
    if objective == "welfare":
        local = [assemble_local_constraints(p, scenario.grid) for p in scenario.prosumers]
        a_loc = _block_diag([a for a, _ in local])
        b_loc = np.concatenate([b for _, b in local])
        nx = 2 * n * T
        s_mat = np.tile(np.kron(np.eye(T), [1.0, -1.0]), (1, n))
        total = scenario.baselines.sum(axis=0)
        pb, ps = tariff.p_buy * dt, tariff.p_sell * dt
        eye = np.eye(T)
        a_env = np.vstack([np.hstack([pb[:, None] * s_mat, -eye]),
                           np.hstack([ps[:, None] * s_mat, -eye])])
        b_env = np.concatenate([-pb * total, -ps * total])
        a = np.vstack([np.hstack([a_loc, np.zeros((a_loc.shape[0], T))]),
                       a_env,
                       np.hstack([cc.a_mat, np.zeros((cc.m, T))])])
        b = np.concatenate([b_loc, b_env, cc.b_vec])
        lin = np.concatenate([np.zeros(nx), np.ones(T)])
        sol = qp.solve_qp(qp.QpProblem(np.zeros(nx + T), lin, a, b), tol=tol)
        x = sol.x_opt[:nx].reshape(n, 2 * T)
        lam = sol.dual[-cc.m:] if cc.m else np.zeros(0)
    elif objective == "selfish":
        g, h = agent_polytopes(scenario)
        a_loc = _block_diag(list(g))
        nx = 3 * n * T
        cols = np.concatenate([np.arange(i * 3 * T, i * 3 * T + 2 * T) for i in range(n)])
        a_cpl = np.zeros((cc.m, nx))
        a_cpl[:, cols] = cc.a_mat
        a = np.vstack([a_loc, a_cpl])
        b = np.concatenate([h.reshape(-1), cc.b_vec])
        lin = np.tile(np.concatenate([np.zeros(2 * T), np.ones(T)]), n)
        sol = qp.solve_qp(qp.QpProblem(np.zeros(nx), lin, a, b), tol=tol)
        x = sol.x_opt.reshape(n, 3 * T)[:, :2 * T]
        lam = sol.dual[-cc.m:] if cc.m else np.zeros(0)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if sol.status == qp.INFEASIBLE:
        raise qp.QpError("centralized problem infeasible: coupling constraints cannot be met")
    if sol.status != qp.OPTIMAL:
        logger.warning("centralized reference ended with status %s", sol.status)
    return CentralSolution(x=x, sigma=sigma(x, scenario), objective=sol.obj,
                           lambda_a=lam, status=sol.status)


def standalone_costs(scenario: Scenario) -> np.ndarray:
    """Each agent's optimal own energy cost when operating alone (no community, no coupling)."""
    g, h = agent_polytopes(scenario)
    T = scenario.grid.T
    lin = np.concatenate([np.zeros(2 * T), np.ones(T)])
    problems = [qp.QpProblem(np.zeros(3 * T), lin, g[i], h[i]) for i in range(scenario.n_agents)]
    sols = qp.solve_qp_batch(problems)
    return np.array([s.obj for s in sols])


def p_best(results: dict, central: float | None = None) -> dict:
    """Normalise final social costs by the best one.

    Parameters
    ----------
    results : dict
        Algorithm name -> final sigma.
    central : float, optional
        Centralized optimum. Values are shifted by ``ref - |ref|`` before
        dividing, with ``ref`` the central optimum when given and the best
        result otherwise, so that ratios stay at or above 1 for negative
        costs. The shift is returned.

    Returns
    -------
    dict with keys ``p_best``, ``shift``, ``gaps`` (shifted ratios) and
    ``raw`` (unshifted ratios).
    """
    if not results:
        raise ValueError("need at least one result")
    best = min(results.values())
    ref = best if central is None else central
    shift = ref - abs(ref)
    denom = best - shift
    gaps = {k: (v - shift) / denom if denom != 0 else 1.0 for k, v in results.items()}
    raw = {k: v / best if best != 0 else 1.0 for k, v in results.items()}
    return {"p_best": best, "shift": shift, "gaps": gaps, "raw": raw}


def base_case_costs(x, scenario: Scenario) -> np.ndarray:
    """What each agent would pay on its own tariff for the same schedule, outside the community."""
    x = np.asarray(x, dtype=float).reshape(scenario.n_agents, -1)[:, :2 * scenario.grid.T]
    z = net_power(x) + scenario.baselines
    return energy_cost(z, scenario.tariff, scenario.grid.dt).sum(axis=1)


def mechanism_costs(x, price, scenario: Scenario) -> np.ndarray:
    """What each agent pays in the market: own tariff cost, surplus share and coupling charges.

    Individual rationality over the horizon holds for agent i when this is
    at most :func:`base_case_costs`, i.e. ``alpha_i sum_t e_t + payments_i <= 0``.
    """
    x = np.asarray(x, dtype=float).reshape(scenario.n_agents, -1)[:, :2 * scenario.grid.T]
    dt = scenario.grid.dt
    e = community_surplus(x, scenario.baselines, scenario.tariff, dt).sum()
    pay = coupling_payments(price, scenario.coupling.a_mat, scenario.coupling.row_step,
                            x, scenario.grid.T).sum(axis=1)
    return base_case_costs(x, scenario) + scenario.alpha * e + pay
