"""
Synthetic scenario generation and batch experiments.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as alg
from . import qp
from .economics import RepartitionHistory, Tariff, compute_alpha
from .game import kkt_residual
from .model import (BatteryParams, ProsumerConfig, Scenario, TimeGrid, agent_polytopes,
                    idle_decisions, power_corridor)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticProfileSpec:
    """Shape of the synthetic residential profiles.

    Loads are a two-peak daily curve (morning and evening) on a night floor,
    with multiplicative lognormal noise. PV peak power is a uniform multiple
    of the mean load power drawn from ``pv_multiplier``.
    """

    daily_energy: tuple = (6.0, 14.0)
    morning_peak: float = 7.5
    evening_peak: float = 19.0
    peak_width: float = 1.5
    base_fraction: float = 0.35
    pv_multiplier: tuple = (2.0, 10.0)
    pv_sunrise: float = 6.0
    pv_sunset: float = 20.0
    noise: float = 0.25
    history_days: int = 7
    power_hours: float = 2.0
    soc0: float = 0.5
    eta: float = 0.95

    def __post_init__(self):
        lo, hi = self.pv_multiplier
        if not 0 < lo <= hi:
            raise ValueError("pv_multiplier range must be positive and ordered")


@dataclass(frozen=True)
class ExperimentConfig:
    n_sims: int = 50
    n_agents: int = 10
    grid: TimeGrid = field(default_factory=TimeGrid)
    rho: float = 0.1
    algorithms: tuple = ("pfb", "admm", "central")
    seed: int = 0
    output: str | None = None
    max_iter: int = 200
    rel_sigma_tol: float = 1e-5
    k_steepness: float = 10.0
    corridor: float = 1.1
    profile: SyntheticProfileSpec = field(default_factory=SyntheticProfileSpec)
    workers: int = 1
    gate: bool = True

    def __post_init__(self):
        if self.n_sims < 1 or self.n_agents < 1:
            raise ValueError("n_sims and n_agents must be >= 1")
        if not self.algorithms:
            raise ValueError("at least one algorithm is required")
        bad = set(self.algorithms) - {"pfb", "admm", "central"}
        if bad:
            raise ValueError(f"unknown algorithms {sorted(bad)}")
        if self.rho <= 0 or self.max_iter < 0 or self.workers < 1:
            raise ValueError("rho must be positive, max_iter >= 0 and workers >= 1")
        object.__setattr__(self, "algorithms", tuple(self.algorithms))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algorithms"] = list(self.algorithms)
        d["grid"] = {"T": self.grid.T, "dt": self.grid.dt}
        d["profile"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["profile"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["grid"] = TimeGrid(**d["grid"])
        d["profile"] = SyntheticProfileSpec(**{k: tuple(v) if isinstance(v, list) else v
                                               for k, v in d["profile"].items()})
        d["algorithms"] = tuple(d["algorithms"])
        return cls(**d)

    def sim_seed(self, sim: int) -> int:
        """Scenario seed of simulation ``sim``, derived from the batch seed."""
        return int(np.random.SeedSequence([self.seed, sim]).generate_state(1)[0])


def _load_shape(hours, spec: SyntheticProfileSpec):
    def bump(center):
        d = (hours - center + 12) % 24 - 12
        return np.exp(-0.5 * (d / spec.peak_width) ** 2)
    return spec.base_fraction + bump(spec.morning_peak) + 1.3 * bump(spec.evening_peak)


def _pv_shape(hours, spec: SyntheticProfileSpec):
    span = spec.pv_sunset - spec.pv_sunrise
    phase = np.clip((hours - spec.pv_sunrise) / span, 0.0, 1.0)
    return np.sin(np.pi * phase) ** 2


def draw_pv_multiplier(rng, spec: SyntheticProfileSpec) -> float:
    lo, hi = spec.pv_multiplier
    return lo + (hi - lo) * rng.uniform()


def _day(rng, grid: TimeGrid, spec, daily_energy, pv_mult):
    """One day of load and PV power (kW) at the grid resolution."""
    hours = (np.arange(grid.T) + 0.5) * grid.dt * 24.0 / (grid.T * grid.dt)
    shape = _load_shape(hours, spec)
    noise = rng.lognormal(mean=-0.5 * spec.noise ** 2, sigma=spec.noise, size=grid.T)
    load = shape * noise
    day_hours = grid.T * grid.dt
    load *= daily_energy / (load.sum() * grid.dt) * day_hours / 24.0
    mean_power = daily_energy / 24.0
    pv = pv_mult * mean_power * _pv_shape(hours, spec)
    cloud = np.clip(rng.normal(1.0, 0.1), 0.6, 1.2)
    return load, pv * cloud


def _agent(rng, grid, spec):
    lo, hi = spec.daily_energy
    daily = rng.uniform(lo, hi)
    mult = draw_pv_multiplier(rng, spec)
    load, pv = _day(rng, grid, spec, daily, mult)
    history = [np.abs(np.subtract(*_day(rng, grid, spec, daily, mult)))
               for _ in range(spec.history_days)]
    return load, pv, np.concatenate(history)


def generate_scenario(config: ExperimentConfig, seed: int) -> Scenario:
    """Random community following the sizing rules of the study.

    Deterministic in ``(config, seed)``. Powers are in per-unit of the peak
    absolute aggregate baseline, so the idle community sits inside the
    ``[-corridor, corridor]`` power band. Tariffs are in per-unit of the
    highest buying price of the horizon.
    """
    grid = config.grid
    spec = config.profile
    rng = np.random.default_rng(seed)
    loads, pvs, hists = [], [], []
    for i in range(config.n_agents):
        sub = 0
        while True:
            load, pv, hist = _agent(np.random.default_rng([seed, i, sub]), grid, spec)
            if load.sum() > 0:
                break
            sub += 1
            logger.info("agent %d of seed %d: degenerate draw, resampling (sub-seed %d)", i, seed, sub)
        loads.append(load)
        pvs.append(pv)
        hists.append(hist)
    baselines = np.array(loads) - np.array(pvs)
    base_power = np.max(np.abs(baselines.sum(axis=0)))
    baselines = baselines / base_power

    alpha = compute_alpha(RepartitionHistory(np.array(hists)))

    prosumers = []
    for i in range(config.n_agents):
        excess = np.clip(pvs[i] - loads[i], 0.0, None).sum() * grid.dt / base_power
        capacity = max(excess, 0.1 * loads[i].sum() * grid.dt / base_power)
        bat = BatteryParams.from_efficiency(capacity, capacity / spec.power_hours, dt=grid.dt,
                                            eta_charge=spec.eta, eta_discharge=spec.eta,
                                            soc0=spec.soc0)
        prosumers.append(ProsumerConfig(bat, baselines[i], alpha[i]))

    hours = (np.arange(grid.T) + 0.5) * 24.0 / grid.T
    peak = ((hours >= 7) & (hours < 22)).astype(float)
    p_buy = 0.18 + 0.08 * peak + rng.uniform(0.0, 0.02, grid.T)
    p_sell = 0.05 + rng.uniform(0.0, 0.02, grid.T)
    price_base = p_buy.max()
    tariff = Tariff(p_buy / price_base, p_sell / price_base)
    coupling = power_corridor(config.n_agents, grid, baselines, -config.corridor, config.corridor)
    return Scenario(grid, prosumers, tariff, coupling, config.k_steepness)


def validate_scenario(scenario: Scenario, atol: float = 1e-9) -> None:
    """Check the batch invariants: weights sum to one, the idle point is feasible.

    Raises
    ------
    ValueError
        Naming the first violated invariant.
    """
    if abs(scenario.alpha.sum() - 1.0) > 1e-12:
        raise ValueError("repartition weights do not sum to one")
    if scenario.coupling.m == 0:
        raise ValueError("scenario has no coupling rows")
    idle = idle_decisions(scenario)
    g, h = agent_polytopes(scenario)
    local = np.einsum("imk,ik->im", g, idle) - h
    if np.max(local) > atol:
        raise ValueError("idle point violates a local constraint")
    T = scenario.grid.T
    if np.max(scenario.coupling.a_mat @ idle[:, :2 * T].reshape(-1) - scenario.coupling.b_vec) > atol:
        raise ValueError("idle point violates a coupling row")


# --------------------------------------------------------------------------
# batch experiments
# --------------------------------------------------------------------------

@dataclass
class SimResult:
    """Outcome of one simulation of a batch.

    Dictionaries are keyed by algorithm name. ``gaps`` are the normalised
    final social costs (shifted so they stay >= 1 for negative costs),
    ``raw_gaps`` the plain ratios ``sigma / p_best``. ``ir_excess`` holds,
    per agent, mechanism cost minus the base-case cost of the same schedule
    on the agent's own tariff (positive = worse off than outside the
    community); ``standalone_excess`` compares with the agent's optimal
    schedule when alone. ``simultaneous`` is the largest
    ``min(P_in, P_out)`` relative to the power rating, over agents and steps.
    """

    sim: int
    seed: int
    status: str = "ok"
    error: str | None = None
    sigma: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    converged_at: dict = field(default_factory=dict)
    kkt: dict = field(default_factory=dict)
    gaps: dict = field(default_factory=dict)
    raw_gaps: dict = field(default_factory=dict)
    p_best: float | None = None
    shift: float | None = None
    central_sigma: float | None = None
    ir_excess: dict = field(default_factory=dict)
    standalone_excess: dict = field(default_factory=dict)
    simultaneous: dict = field(default_factory=dict)
    agreement: float | None = None
    overlap: dict = field(default_factory=dict)
    wall_s: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "traces"}
        return d


@dataclass
class BatchReport:
    config: ExperimentConfig
    sims: list = field(default_factory=list)
    bands: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return [s for s in self.sims if s.status != "ok"]

    def median_gap(self, algorithm: str) -> float:
        vals = [s.gaps[algorithm] for s in self.sims if algorithm in s.gaps]
        return float(np.median(vals)) if vals else float("nan")


def simultaneous_operation(x, scenario: Scenario) -> float:
    """Largest ``min(P_in, P_out) / power bound`` over agents and steps."""
    T = scenario.grid.T
    x = np.asarray(x, dtype=float).reshape(scenario.n_agents, -1)[:, :2 * T]
    ub = np.stack([p.battery.power_bounds(T) for p in scenario.prosumers])
    both = np.minimum(x[:, 0::2], x[:, 1::2])
    scale = np.minimum(ub[:, 0::2], ub[:, 1::2])
    return float(np.max(both / scale))


def _converged_at(trace: alg.ConvergenceTrace, sigma0: float, tol: float, min_iter: int):
    """First iteration whose relative sigma change is <= tol, or None."""
    sig = np.concatenate([[sigma0], trace.sigma])
    for k in range(1, len(sig)):
        if k >= min_iter and abs(sig[k] - sig[k - 1]) <= tol * max(abs(sig[k - 1]), 1e-12):
            return k
    return None


def _normalised(trace_sigma, p_best, shift):
    return (np.asarray(trace_sigma) - shift) / (p_best - shift)


def run_scenario(config: ExperimentConfig, sim: int) -> SimResult:
    """Generate and solve one simulation of a batch. Never raises on solver failures."""
    seed = config.sim_seed(sim)
    res = SimResult(sim=sim, seed=seed)
    try:
        scenario = generate_scenario(config, seed)
        validate_scenario(scenario)
        stopping = alg.StoppingRule(max_iter=config.max_iter, rel_sigma_tol=config.rel_sigma_tol)
        sigma0 = alg.sigma(idle_decisions(scenario), scenario)
        standalone = alg.standalone_costs(scenario)
        states = {}
        for name in config.algorithms:
            t0 = time.perf_counter()
            if name == "central":
                cen = alg.centralized_reference(scenario)
                res.central_sigma = cen.sigma
                res.wall_s[name] = time.perf_counter() - t0
                continue
            state, trace = alg.run(name, scenario, stopping, rho=config.rho, gate=config.gate)
            res.wall_s[name] = time.perf_counter() - t0
            states[name] = state
            res.traces[name] = trace
            res.sigma[name] = float(trace.sigma[-1]) if len(trace) else sigma0
            res.iterations[name] = len(trace)
            res.converged_at[name] = _converged_at(trace, sigma0, config.rel_sigma_tol, stopping.min_iter)
            price = alg.coupling_price(name, state, config.rho)
            res.kkt[name] = asdict(kkt_residual(state.x, price, scenario))
            res.simultaneous[name] = simultaneous_operation(state.x, scenario)
            cost = alg.mechanism_costs(state.x, price, scenario)
            res.ir_excess[name] = (cost - alg.base_case_costs(state.x, scenario)).tolist()
            res.standalone_excess[name] = (cost - standalone).tolist()
        if res.sigma:
            pb = alg.p_best(res.sigma)
            res.p_best, res.shift = pb["p_best"], pb["shift"]
            res.gaps, res.raw_gaps = pb["gaps"], pb["raw"]
            if res.central_sigma is not None:
                res.overlap = {k: v - res.central_sigma for k, v in res.sigma.items()}
        if "pfb" in states and "admm" in states:
            T = scenario.grid.T
            res.agreement = float(np.max(np.abs(states["pfb"].x[:, :2 * T] - states["admm"].x[:, :2 * T])))
    except (qp.QpError, alg.StepError, ValueError, np.linalg.LinAlgError) as err:
        res.status, res.error = "failed", f"{type(err).__name__}: {err}"
        logger.warning("simulation %d (seed %d) quarantined: %s", sim, seed, res.error)
    return res


def _bands(sims, algorithms, length):
    """Median and quartiles of normalised sigma trajectories, padded with the final value."""
    out = {}
    for name in algorithms:
        rows = []
        for s in sims:
            if s.status != "ok" or name not in s.traces or s.p_best is None:
                continue
            traj = _normalised(s.traces[name].sigma, s.p_best, s.shift)
            if traj.size == 0:
                continue
            rows.append(np.concatenate([traj, np.full(max(length - traj.size, 0), traj[-1])])[:length])
        if rows:
            q25, med, q75 = np.percentile(np.array(rows), [25, 50, 75], axis=0)
            out[name] = {"median": med.tolist(), "q25": q25.tolist(), "q75": q75.tolist()}
    return out


def run_experiment(config: ExperimentConfig) -> BatchReport:
    """Run ``n_sims`` generated scenarios with every requested algorithm.

    Failing scenarios are quarantined and listed in the report; the batch
    always completes. With ``workers > 1`` scenarios run in separate
    processes; results are identical to a serial run apart from wall times.
    """
    sims = range(config.n_sims)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_scenario, [config] * config.n_sims, sims))
    else:
        results = [run_scenario(config, s) for s in sims]
    iterative = [a for a in config.algorithms if a != "central"]
    length = max([len(t) for r in results for t in r.traces.values()], default=0)
    report = BatchReport(config=config, sims=results, bands=_bands(results, iterative, length))
    for r in report.failures:
        logger.warning("failed simulation %d: %s", r.sim, r.error)
    return report


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

TABULAR_COLUMNS = ["sim", "seed", "algorithm"] + alg.TRACE_COLUMNS + ["normalised_sigma"]
REPORT_SCHEMA = "prosumer-gne/batch-report"


def _trace_to_dict(trace: alg.ConvergenceTrace) -> dict:
    return {c: trace.column(c).tolist() for c in alg.TRACE_COLUMNS}


def _trace_from_dict(d: dict) -> alg.ConvergenceTrace:
    n = len(d["iter"])
    return alg.ConvergenceTrace([alg.TraceRecord(**{c: d[c][k] for c in alg.TRACE_COLUMNS}) for k in range(n)])


def export_report(report: BatchReport, path, format: str = "structured") -> Path:
    """Write a batch report.

    ``structured`` writes one JSON document holding the configuration,
    per-simulation summaries, traces and bands; :func:`load_report` reads it
    back into an equal report. ``tabular`` writes a CSV with one row per
    (simulation, algorithm, iteration), ready for plotting.
    """
    path = Path(path)
    if format == "structured":
        doc = {
            "schema": REPORT_SCHEMA,
            "config": report.config.to_dict(),
            "sims": [dict(s.summary(), traces={k: _trace_to_dict(t) for k, t in s.traces.items()})
                     for s in report.sims],
            "bands": report.bands,
        }
        path.write_text(json.dumps(doc, indent=1))
    elif format == "tabular":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TABULAR_COLUMNS)
            for s in report.sims:
                for name, trace in s.traces.items():
                    norm = (_normalised(trace.sigma, s.p_best, s.shift) if s.p_best is not None
                            else np.full(len(trace), np.nan))
                    for rec, g in zip(trace.records, norm):
                        w.writerow([s.sim, s.seed, name] + [repr(getattr(rec, c)) for c in alg.TRACE_COLUMNS]
                                   + [repr(float(g))])
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def load_report(path) -> BatchReport:
    """Read a structured report written by :func:`export_report`."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"{path}: not a batch report")
    sims = []
    for d in doc["sims"]:
        traces = {k: _trace_from_dict(t) for k, t in d.pop("traces").items()}
        sims.append(SimResult(**d, traces=traces))
    return BatchReport(ExperimentConfig.from_dict(doc["config"]), sims, doc["bands"])


def load_tabular(path) -> dict:
    """Read a tabular export into ``{(sim, algorithm): ConvergenceTrace}``."""
    out = {}
    types = {c: (int if c in ("iter", "gate_frozen_steps") else float) for c in alg.TRACE_COLUMNS}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["sim"]), row["algorithm"])
            rec = alg.TraceRecord(**{c: types[c](row[c]) for c in alg.TRACE_COLUMNS})
            out.setdefault(key, alg.ConvergenceTrace()).append(rec)
    return out


def ir_stress_scenario(seed: int = 7, n_agents: int = 4, grid: TimeGrid | None = None,
                       ready_step: int = 6, ready_soc: float = 0.9, import_cap: float = 0.0) -> Scenario:
    """Tight-corridor instance on which unrestricted coupling prices break IR.

    Agent 0 must raise its battery from 10% to ``ready_soc`` by step
    ``ready_step`` (a departure requirement), while the import corridor is
    closed to the idle aggregate over the same steps. Its charging can only
    happen if others discharge, so the coupling price rises and agent 0 pays
    more than its share of the community surplus. ``import_cap`` scales the
    idle aggregate to give the corridor's upper bound on those steps.
    """
    grid = grid or TimeGrid()
    if not 0 < ready_step < grid.T:
        raise ValueError("ready_step must lie inside the horizon")
    base = generate_scenario(ExperimentConfig(n_agents=n_agents, grid=grid), seed)
    prosumers = list(base.prosumers)
    bat = prosumers[0].battery
    cap = float(np.max(bat.e_max))
    e_min = np.where(np.arange(grid.T) >= ready_step - 1, ready_soc * cap, 0.0)
    ev = BatteryParams(bat.a_state, bat.b_charge, bat.b_discharge, e_min, bat.e_max,
                       bat.p_in_max, bat.p_out_max, 0.1 * cap)
    prosumers[0] = ProsumerConfig(ev, prosumers[0].baseline, prosumers[0].alpha)
    baselines = np.stack([p.baseline for p in prosumers])
    upper = np.full(grid.T, 1.1)
    upper[:ready_step] = import_cap * baselines.sum(axis=0)[:ready_step]
    coupling = power_corridor(n_agents, grid, baselines, -1.1, upper)
    return Scenario(grid, prosumers, base.tariff, coupling, base.k_steepness)
