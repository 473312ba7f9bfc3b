"""
Tariffs, energy costs, community surplus and the individual-rationality gate.

Decision arrays follow the package-wide layout: one row per agent, columns
interleaved as ``[P_in_1, P_out_1, ..., P_in_T, P_out_T]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Tariff:
    """Buying and selling prices per step (currency/kWh)."""

    p_buy: np.ndarray
    p_sell: np.ndarray

    def __post_init__(self):
        p_buy = _frozen(np.atleast_1d(self.p_buy))
        p_sell = _frozen(np.atleast_1d(self.p_sell))
        if p_buy.shape != p_sell.shape or p_buy.ndim != 1:
            raise ValueError("p_buy and p_sell must be vectors of equal length")
        if np.any(p_sell < 0) or np.any(p_buy < p_sell):
            raise ValueError("tariffs must satisfy p_buy >= p_sell >= 0")
        object.__setattr__(self, "p_buy", p_buy)
        object.__setattr__(self, "p_sell", p_sell)

    @classmethod
    def flat(cls, p_buy: float, p_sell: float, steps: int) -> "Tariff":
        return cls(np.full(steps, p_buy), np.full(steps, p_sell))

    def __len__(self):
        return self.p_buy.shape[0]

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.p_buy, self.p_sell]),
                   delimiter=",", header="buy,sell", comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "Tariff":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1])


def net_power(x) -> np.ndarray:
    """Battery net power ``P_in - P_out`` per step, shape (..., T)."""
    x = np.asarray(x, dtype=float)
    return x[..., 0::2] - x[..., 1::2]


def energy_cost(z, tariff: Tariff, dt: float = 1.0) -> np.ndarray:
    """Per-step cost of net power ``z``: buy price when importing, sell price otherwise."""
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, tariff.p_buy * z, tariff.p_sell * z) * dt


def community_surplus(x, baselines, tariff: Tariff, dt: float = 1.0) -> np.ndarray:
    """Per-step surplus of pooling the agents behind one connection point.

    ``e_t = c(sum_i z_it) - sum_i c(z_it)`` with ``z_i`` the net power of
    agent i (battery plus baseline). Nonpositive whenever ``p_buy >= p_sell``.

    Parameters
    ----------
    x : ndarray, shape (N, 2T)
        Battery decisions.
    baselines : ndarray, shape (N, T)
        Uncontrollable net power of each agent.
    tariff : Tariff
    dt : float

    Returns
    -------
    ndarray, shape (T,)
    """
    z = net_power(np.atleast_2d(x)) + np.atleast_2d(baselines)
    return energy_cost(z.sum(axis=0), tariff, dt) - energy_cost(z, tariff, dt).sum(axis=0)


def smooth_cost_gradient(z_agg, tariff: Tariff, k: float) -> np.ndarray:
    """Derivative of the smooth tariff surrogate, between ``p_sell`` and ``p_buy``."""
    if k <= 0:
        raise ValueError("steepness k must be positive")
    z_agg = np.asarray(z_agg, dtype=float)
    spread = tariff.p_buy - tariff.p_sell
    return spread * (np.tanh(k * z_agg) + 1.0) / 2.0 + tariff.p_sell


def smooth_cost(z_agg, tariff: Tariff, k: float) -> np.ndarray:
    """Antiderivative of :func:`smooth_cost_gradient`, zero at ``z = 0``."""
    z = np.asarray(z_agg, dtype=float)
    # log(cosh(kz)) without overflow
    logcosh = np.logaddexp(k * z, -k * z) - np.log(2.0)
    spread = tariff.p_buy - tariff.p_sell
    return tariff.p_sell * z + spread * (z + logcosh / k) / 2.0


def smooth_cost_curvature(z_agg, tariff: Tariff, k: float) -> np.ndarray:
    z = np.asarray(z_agg, dtype=float)
    return (tariff.p_buy - tariff.p_sell) * k / (2.0 * np.cosh(np.clip(k * z, -350, 350)) ** 2)


# --------------------------------------------------------------------------
# community cost models: cost of the aggregate net power at the coupling point
# --------------------------------------------------------------------------

class SmoothCommunityCost:
    """Tanh-smoothed tariff cost of the community aggregate (per step, times dt)."""

    exact = False

    def __init__(self, tariff: Tariff, k: float, dt: float = 1.0):
        self.tariff, self.k, self.dt = tariff, float(k), float(dt)

    def value(self, z):
        return smooth_cost(z, self.tariff, self.k) * self.dt

    def grad(self, z):
        return smooth_cost_gradient(z, self.tariff, self.k) * self.dt

    def prox(self, v, rho):
        """Per-step ``argmin_z value(z) + (z - v)^2 / (2 rho)``."""
        v = np.asarray(v, dtype=float)
        # the minimiser lies in [v - rho*max_grad, v - rho*min_grad]
        lo = v - rho * self.tariff.p_buy * self.dt
        hi = v - rho * self.tariff.p_sell * self.dt
        z = 0.5 * (lo + hi)
        for _ in range(100):
            f = z - v + rho * self.grad(z)
            pos = f > 0
            hi = np.where(pos, z, hi)
            lo = np.where(pos, lo, z)
            fp = 1.0 + rho * self.dt * smooth_cost_curvature(z, self.tariff, self.k)
            zn = z - f / fp
            # Newton inside the bracket, bisection otherwise
            zn = np.where((zn > lo) & (zn < hi), zn, 0.5 * (lo + hi))
            if np.max(np.abs(zn - z), initial=0.0) < 1e-15:
                z = zn
                break
            z = zn
        return z


class ExactCommunityCost:
    """Piecewise-linear tariff cost of the community aggregate."""

    exact = True

    def __init__(self, tariff: Tariff, dt: float = 1.0):
        self.tariff, self.dt = tariff, float(dt)

    def value(self, z):
        return energy_cost(z, self.tariff, self.dt)

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(z >= 0, self.tariff.p_buy, self.tariff.p_sell) * self.dt

    def prox(self, v, rho):
        v = np.asarray(v, dtype=float)
        up = rho * self.tariff.p_buy * self.dt
        down = rho * self.tariff.p_sell * self.dt
        return np.where(v > up, v - up, np.where(v < down, v - down, 0.0))


class QuadraticCommunityCost:
    """``weight/2 * z^2`` per step; gives an affine game map for small oracle instances."""

    exact = False

    def __init__(self, weight, dt: float = 1.0):
        self.weight, self.dt = np.asarray(weight, dtype=float), float(dt)

    def value(self, z):
        return 0.5 * self.weight * np.asarray(z, dtype=float) ** 2 * self.dt

    def grad(self, z):
        return self.weight * np.asarray(z, dtype=float) * self.dt

    def prox(self, v, rho):
        return np.asarray(v, dtype=float) / (1.0 + rho * self.weight * self.dt)


# --------------------------------------------------------------------------
# repartition and individual rationality
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RepartitionHistory:
    """Past absolute net power per agent, shape (N, tau)."""

    window: np.ndarray

    def __post_init__(self):
        w = _frozen(np.atleast_2d(self.window))
        if w.shape[1] < 1:
            raise ValueError("history window must contain at least one step")
        if np.any(w < 0):
            raise ValueError("history entries are absolute powers and must be >= 0")
        object.__setattr__(self, "window", w)


def compute_alpha(history: RepartitionHistory) -> np.ndarray:
    """Share of each agent in the community surplus, from a moving window.

    Raises
    ------
    ValueError
        If every history entry is zero, the repartition is undefined.
    """
    totals = history.window.sum(axis=1)
    grand = totals.sum()
    if grand <= 0:
        raise ValueError("repartition undefined: all-zero history")
    return totals / grand


def coupling_payments(mu, a_mat, row_step, x, steps: int) -> np.ndarray:
    """Per-agent, per-step coupling charge ``mu_r (A_i x_i)_r`` summed over rows of step t.

    Returns an array of shape (N, T).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n_agents = x.shape[0]
    mu = np.asarray(mu, dtype=float)
    a_mat = np.asarray(a_mat, dtype=float)
    out = np.zeros((n_agents, steps))
    if mu.size == 0:
        return out
    width = x.shape[1]
    # (N, m): contribution of each agent to each coupling row
    per_row = np.einsum("rik,ik->ir", a_mat.reshape(-1, n_agents, width), x)
    charge = per_row * mu
    for i in range(n_agents):
        out[i] = np.bincount(row_step, weights=charge[i], minlength=steps)
    return out


def ir_gate(alpha, surplus_t, payments_t, atol: float = 1e-12) -> np.ndarray:
    """Steps at which coupling prices may still move.

    ``mask_t`` is true iff ``alpha_i e_t + payment_it <= 0`` for every agent,
    i.e. nobody pays more than their share of the community savings.
    """
    alpha = np.asarray(alpha, dtype=float)[:, None]
    net = alpha * np.asarray(surplus_t, dtype=float)[None, :] + np.asarray(payments_t, dtype=float)
    return np.all(net <= atol, axis=0)
