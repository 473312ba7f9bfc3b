"""
Prosumer, battery and coupling-constraint types and their matrix assembly.

Each agent decides ``x_i = [P_in_1, P_out_1, ..., P_in_T, P_out_T]``; the
epigraph-augmented decision is ``[x_i; y_i]`` with ``y_i`` (length T) an upper
envelope of the agent's per-step energy cost. Stacked decisions are handled
as arrays with one row per agent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .economics import Tariff

SCHEMA = "prosumer-gne/scenario"
SCHEMA_VERSION = 1


def _frozen(a, ndim=None) -> np.ndarray:
    a = np.array(a, dtype=float)
    if ndim is not None and a.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    T: int = 24
    dt: float = 1.0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError("T must be a positive integer")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "dt", float(self.dt))


@dataclass(frozen=True)
class BatteryParams:
    """Linear battery model ``s_{t+1} = a s_t + b_charge P_in - b_discharge P_out``.

    ``p_in_max`` and ``p_out_max`` may be scalars or per-step vectors, and so
    may the energy bounds ``e_min`` and ``e_max`` (bounds on the charge at
    the end of each step, e.g. a departure requirement).
    """

    a_state: float
    b_charge: float
    b_discharge: float
    e_min: float | np.ndarray
    e_max: float | np.ndarray
    p_in_max: float | np.ndarray
    p_out_max: float | np.ndarray
    e0: float

    def __post_init__(self):
        for name in ("a_state", "b_charge", "b_discharge", "e0"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("p_in_max", "p_out_max", "e_min", "e_max"):
            v = getattr(self, name)
            if np.ndim(v) == 0:
                object.__setattr__(self, name, float(v))
            else:
                object.__setattr__(self, name, _frozen(v, 1))
        for name in ("p_in_max", "p_out_max"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive")
        e_min, e_max = np.asarray(self.e_min), np.asarray(self.e_max)
        if np.any(e_min < 0) or np.any(e_min >= e_max):
            raise ValueError("need 0 <= e_min < e_max")
        if not 0 <= self.e0 <= np.max(e_max):
            raise ValueError("initial charge e0 outside [0, e_max]")
        if np.ndim(self.e_min) == 0 and np.ndim(self.e_max) == 0 and not self.e_min <= self.e0:
            raise ValueError("initial charge e0 below e_min")
        if not 0 < self.a_state <= 1:
            raise ValueError("a_state must lie in (0, 1]")
        if self.b_charge <= 0 or self.b_discharge <= 0:
            raise ValueError("charge/discharge coefficients must be positive")

    @classmethod
    def from_efficiency(cls, capacity, power, dt=1.0, eta_charge=0.95,
                        eta_discharge=0.95, soc0=0.5, a_state=1.0, e_min=0.0):
        """Battery of a given capacity and symmetric power rating."""
        return cls(a_state=a_state, b_charge=eta_charge * dt,
                   b_discharge=dt / eta_discharge, e_min=e_min, e_max=capacity,
                   p_in_max=power, p_out_max=power,
                   e0=e_min + soc0 * (capacity - e_min))

    def power_bounds(self, steps: int) -> np.ndarray:
        """Upper bounds on the interleaved decision vector, length 2T."""
        ub = np.empty(2 * steps)
        ub[0::2] = np.broadcast_to(self.p_in_max, steps)
        ub[1::2] = np.broadcast_to(self.p_out_max, steps)
        return ub

    def to_dict(self):
        d = {}
        for k in ("a_state", "b_charge", "b_discharge", "e_min", "e_max",
                  "p_in_max", "p_out_max", "e0"):
            v = getattr(self, k)
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d


@dataclass(frozen=True)
class ProsumerConfig:
    battery: BatteryParams
    baseline: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "baseline", _frozen(self.baseline, 1))
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


@dataclass(frozen=True)
class CouplingConstraints:
    """Shared constraints ``a_mat x <= b_vec`` on the stacked battery decisions.

    ``row_step`` assigns every row to the time step it constrains; the IR
    gate freezes prices step by step.
    """

    a_mat: np.ndarray
    b_vec: np.ndarray
    row_step: np.ndarray = field(default=None)

    def __post_init__(self):
        b = _frozen(np.reshape(self.b_vec, -1))
        a = _frozen(self.a_mat, 2)
        if a.shape[0] != b.shape[0]:
            raise ValueError("a_mat and b_vec row counts differ")
        steps = np.zeros(b.shape[0], dtype=int) if self.row_step is None else np.asarray(self.row_step, dtype=int)
        if steps.shape != b.shape:
            raise ValueError("row_step must have one entry per row")
        steps.flags.writeable = False
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_vec", b)
        object.__setattr__(self, "row_step", steps)

    @property
    def m(self) -> int:
        return self.b_vec.shape[0]

    @classmethod
    def none(cls, n_agents: int, grid: TimeGrid) -> "CouplingConstraints":
        return cls(np.zeros((0, 2 * n_agents * grid.T)), np.zeros(0), np.zeros(0, dtype=int))


@dataclass(frozen=True)
class Scenario:
    """A full game instance. ``alpha`` weights are normalised to sum to one."""

    grid: TimeGrid
    prosumers: tuple
    tariff: Tariff
    coupling: CouplingConstraints
    k_steepness: float = 10.0

    def __post_init__(self):
        prosumers = tuple(self.prosumers)
        if not prosumers:
            raise ValueError("a scenario needs at least one prosumer")
        T = self.grid.T
        if len(self.tariff) != T:
            raise ValueError("tariff length differs from the horizon")
        for p in prosumers:
            if p.baseline.shape != (T,):
                raise ValueError("baseline length differs from the horizon")
        if self.coupling.a_mat.shape[1] != 2 * len(prosumers) * T:
            raise ValueError("coupling matrix must have 2*N*T columns")
        if np.any((self.coupling.row_step < 0) | (self.coupling.row_step >= T)):
            raise ValueError("coupling row_step outside the horizon")
        alpha = np.array([p.alpha for p in prosumers])
        total = alpha.sum()
        # all-zero weights: symmetric split
        alpha = alpha / total if total > 0 else np.full(len(prosumers), 1.0 / len(prosumers))
        prosumers = tuple(ProsumerConfig(p.battery, p.baseline, a) for p, a in zip(prosumers, alpha))
        object.__setattr__(self, "prosumers", prosumers)
        object.__setattr__(self, "k_steepness", float(self.k_steepness))

    @property
    def n_agents(self) -> int:
        return len(self.prosumers)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([p.alpha for p in self.prosumers])

    @property
    def baselines(self) -> np.ndarray:
        return np.stack([p.baseline for p in self.prosumers])

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "grid": {"T": self.grid.T, "dt": self.grid.dt},
            "prosumers": [
                {"battery": p.battery.to_dict(), "baseline": p.baseline.tolist(), "alpha": p.alpha}
                for p in self.prosumers
            ],
            "tariff": {"p_buy": self.tariff.p_buy.tolist(), "p_sell": self.tariff.p_sell.tolist()},
            "coupling": {
                "a_mat": self.coupling.a_mat.tolist(),
                "b_vec": self.coupling.b_vec.tolist(),
                "row_step": self.coupling.row_step.tolist(),
            },
            "k_steepness": self.k_steepness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"not a scenario document (schema={d.get('schema')!r})")
        if d.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario version {d.get('version')!r}")
        grid = TimeGrid(**d["grid"])
        prosumers = [
            ProsumerConfig(BatteryParams(**p["battery"]), np.array(p["baseline"]), p["alpha"])
            for p in d["prosumers"]
        ]
        c = d["coupling"]
        a = np.array(c["a_mat"], dtype=float).reshape(len(c["b_vec"]), 2 * len(prosumers) * grid.T)
        return cls(grid=grid, prosumers=prosumers,
                   tariff=Tariff(d["tariff"]["p_buy"], d["tariff"]["p_sell"]),
                   coupling=CouplingConstraints(a, c["b_vec"], c["row_step"]),
                   k_steepness=d["k_steepness"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# matrix assembly
# --------------------------------------------------------------------------

def build_batch_matrices(battery: BatteryParams, grid: TimeGrid):
    """Batch form of the battery dynamics, ``soc = lambda_mat * e0 + gamma_mat @ x``.

    Row t gives the state of charge at the end of step t.

    Returns
    -------
    lambda_mat : ndarray, shape (T,)
    gamma_mat : ndarray, shape (T, 2T)
    """
    T = grid.T
    a = battery.a_state
    powers = a ** np.arange(T + 1)
    lambda_mat = powers[1:].copy()
    gamma_mat = np.zeros((T, 2 * T))
    for t in range(T):
        decay = powers[t - np.arange(t + 1)]
        gamma_mat[t, 0:2 * t + 2:2] = decay * battery.b_charge
        gamma_mat[t, 1:2 * t + 2:2] = -decay * battery.b_discharge
    return lambda_mat, gamma_mat


def simulate_soc(battery: BatteryParams, x) -> np.ndarray:
    """Step-by-step state of charge for decisions ``x`` (length 2T)."""
    x = np.asarray(x, dtype=float)
    soc = np.empty(x.shape[0] // 2)
    s = battery.e0
    for t in range(soc.shape[0]):
        s = battery.a_state * s + battery.b_charge * x[2 * t] - battery.b_discharge * x[2 * t + 1]
        soc[t] = s
    return soc


def assemble_local_constraints(prosumer: ProsumerConfig, grid: TimeGrid):
    """Agent polyhedron ``a_c x <= b_c``: power boxes and energy bounds.

    Rows are ``[-I; I; -Gamma; Gamma]`` (lower power, upper power, lower
    energy, upper energy), 6T in total.
    """
    T = grid.T
    bat = prosumer.battery
    lam, gam = build_batch_matrices(bat, grid)
    eye = np.eye(2 * T)
    a_c = np.vstack([-eye, eye, -gam, gam])
    b_c = np.concatenate([
        np.zeros(2 * T),
        bat.power_bounds(T),
        -bat.e_min + lam * bat.e0,
        bat.e_max - lam * bat.e0,
    ])
    return a_c, b_c


def step_sum_matrix(steps: int) -> np.ndarray:
    """D = I_T kron [1, -1]: net battery power per step."""
    return np.kron(np.eye(steps), [1.0, -1.0])


def augment_epigraph(a_c, b_c, tariff: Tariff, baseline, dt: float = 1.0):
    """Add the cost-envelope variables ``y`` to an agent polyhedron.

    The extra rows force ``y_t >= p_t dt (D x + baseline)_t`` for both the
    buying and the selling price, so ``sum(y)`` equals the agent's energy
    cost when minimised.

    Returns
    -------
    a_tilde : ndarray, shape (rows + 2T, 3T)
    b_tilde : ndarray
    l : ndarray, shape (3T,)
        Selects ``sum(y)``.
    """
    baseline = np.asarray(baseline, dtype=float)
    T = baseline.shape[0]
    d = step_sum_matrix(T)
    pb = tariff.p_buy * dt
    ps = tariff.p_sell * dt
    eye = np.eye(T)
    a_y = np.vstack([
        np.hstack([pb[:, None] * d, -eye]),
        np.hstack([ps[:, None] * d, -eye]),
    ])
    b_y = np.concatenate([-pb * baseline, -ps * baseline])
    a_tilde = np.vstack([np.hstack([a_c, np.zeros((a_c.shape[0], T))]), a_y])
    b_tilde = np.concatenate([b_c, b_y])
    l = np.concatenate([np.zeros(2 * T), np.ones(T)])
    return a_tilde, b_tilde, l


def summation_matrix(n: int, grid: TimeGrid) -> np.ndarray:
    """S = [D, ..., D]: net battery power of the whole community per step."""
    if n < 1:
        raise ValueError("need at least one agent")
    return np.tile(step_sum_matrix(grid.T), (1, n))


def net_community_power(x, baselines) -> np.ndarray:
    """Aggregate net power ``S x + sum_i baseline_i``."""
    baselines = np.atleast_2d(np.asarray(baselines, dtype=float))
    x = np.asarray(x, dtype=float).reshape(baselines.shape[0], -1)
    return (x[:, 0::2] - x[:, 1::2]).sum(axis=0) + baselines.sum(axis=0)


def agent_polytopes(scenario: Scenario):
    """Epigraph polyhedra of all agents, stacked.

    Returns
    -------
    a_tilde : ndarray, shape (N, 8T, 3T)
    b_tilde : ndarray, shape (N, 8T)
    """
    a_all, b_all = [], []
    for p in scenario.prosumers:
        a_c, b_c = assemble_local_constraints(p, scenario.grid)
        a_t, b_t, _ = augment_epigraph(a_c, b_c, scenario.tariff, p.baseline, scenario.grid.dt)
        a_all.append(a_t)
        b_all.append(b_t)
    return np.stack(a_all), np.stack(b_all)


def idle_decisions(scenario: Scenario) -> np.ndarray:
    """Idle batteries with the cost envelope tight at the baseline, shape (N, 3T)."""
    T, dt = scenario.grid.T, scenario.grid.dt
    base = scenario.baselines
    y = np.where(base >= 0, scenario.tariff.p_buy * base, scenario.tariff.p_sell * base) * dt
    return np.hstack([np.zeros((scenario.n_agents, 2 * T)), y])


# --------------------------------------------------------------------------
# coupling-constraint generators
# --------------------------------------------------------------------------

def power_corridor(n: int, grid: TimeGrid, baselines, lower=-1.1, upper=1.1) -> CouplingConstraints:
    """Rows encoding ``lower <= S x + sum(baselines) <= upper`` at every step."""
    s_mat = summation_matrix(n, grid)
    total = np.asarray(baselines, dtype=float).reshape(n, -1).sum(axis=0)
    a = np.vstack([s_mat, -s_mat])
    b = np.concatenate([upper - total, total - lower])
    steps = np.concatenate([np.arange(grid.T), np.arange(grid.T)])
    return CouplingConstraints(a, b, steps)


def voltage_rows(n: int, grid: TimeGrid, baselines, sensitivity, v_nominal=1.0,
                 v_min=0.95, v_max=1.05) -> CouplingConstraints:
    """Linearised voltage band at one node, ``v = v_nominal + sum_i s_i z_i``.

    ``sensitivity`` holds one (positive) voltage drop per unit of net
    consumption for each agent.
    """
    T = grid.T
    sens = np.asarray(sensitivity, dtype=float).reshape(n)
    d = step_sum_matrix(T)
    rows = np.hstack([-s * d for s in sens])
    base_drop = -(sens[:, None] * np.asarray(baselines, dtype=float).reshape(n, T)).sum(axis=0)
    # v = v_nominal + base_drop + rows x
    a = np.vstack([rows, -rows])
    b = np.concatenate([v_max - v_nominal - base_drop, v_nominal + base_drop - v_min])
    steps = np.concatenate([np.arange(T), np.arange(T)])
    return CouplingConstraints(a, b, steps)


def stack_constraints(*blocks: CouplingConstraints) -> CouplingConstraints:
    return CouplingConstraints(
        np.vstack([b.a_mat for b in blocks]),
        np.concatenate([b.b_vec for b in blocks]),
        np.concatenate([b.row_step for b in blocks]),
    )
