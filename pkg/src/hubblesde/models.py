"""The stochastic Hubble-parameter equations and their closed-form companions.

State variables:

* ``H``  Hubble parameter, ``dH = -H^2 dt - 1.5 H^2 dW`` (Ito or Stratonovich)
* ``x = 1/H``; Stratonovich gives ``dx = dt + 1.5 dW``, Ito gives
  ``dx = (1 + 9/(4x)) dt + 1.5 dW``
* ``z = 2x/3`` for the Ito case, ``dz = (2/3 + 1/z) dt + dW``, compared with
  the 3-dimensional Bessel process ``dy = dt/y + dW``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from hubblesde.paths import TimeGrid, TwoSidedWienerPath, WienerPath
from hubblesde.sde import Interpretation, PathSolution, PathStatus, Sde1D

__all__ = [
    "CosmologyParams",
    "OuParams",
    "BoundsTriple",
    "deterministic_hubble",
    "stratonovich_hubble_sde",
    "ito_hubble_sde",
    "stratonovich_x_sde",
    "ito_x_sde",
    "ito_z_sde",
    "bessel3_sde",
    "ou_sde",
    "strat_x_exact",
    "bessel3_exact",
    "ou_stationary",
    "conjugated_solution_cos4",
    "bounds_z",
    "bounds_H",
    "coupled_comparison",
]


@dataclass(frozen=True)
class CosmologyParams:
    H0: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.H0) and self.H0 > 0):
            raise ValueError(f"H0 must be positive and finite, got {self.H0}")

    @property
    def x0(self) -> float:
        return 1.0 / self.H0

    @property
    def z0(self) -> float:
        return 2.0 / (3.0 * self.H0)


@dataclass(frozen=True)
class OuParams:
    lam: float = 1.0
    t_trunc: float = 40.0

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not (self.t_trunc > 0 and math.isfinite(self.t_trunc)):
            raise ValueError(f"t_trunc must be positive, got {self.t_trunc}")


@dataclass(frozen=True)
class BoundsTriple:
    lower: float
    center: float
    upper: float


def deterministic_hubble(params: CosmologyParams, t):
    """``H0 / (1 + H0 t)``, the noise-free solution."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("t must be non-negative")
    out = params.H0 / (1.0 + params.H0 * t_arr)
    return float(out) if out.ndim == 0 else out


# --- coefficient functions ---------------------------------------------------

@nb.njit
def _neg_sq(t, x):
    return -x * x


@nb.njit
def _hubble_diffusion(t, x):
    return -1.5 * x * x


@nb.njit
def _hubble_diffusion_dx(t, x):
    return -3.0 * x


@nb.njit
def _one(t, x):
    return 1.0


@nb.njit
def _three_halves(t, x):
    return 1.5


@nb.njit
def _zero(t, x):
    return 0.0


@nb.njit
def _ito_x_drift(t, x):
    return 1.0 + 2.25 / x


@nb.njit
def _ito_z_drift(t, x):
    return 2.0 / 3.0 + 1.0 / x


@nb.njit
def _bessel3_drift(t, x):
    return 1.0 / x


def stratonovich_hubble_sde() -> Sde1D:
    return Sde1D(_neg_sq, _hubble_diffusion, _hubble_diffusion_dx, Interpretation.STRATONOVICH, "strat-H")


def ito_hubble_sde() -> Sde1D:
    return Sde1D(_neg_sq, _hubble_diffusion, _hubble_diffusion_dx, Interpretation.ITO, "ito-H")


def stratonovich_x_sde() -> Sde1D:
    """``dx = dt + 1.5 dW``: additive noise, so the tag only selects usable schemes."""
    return Sde1D(_one, _three_halves, _zero, Interpretation.ITO, "strat-x")


def ito_x_sde() -> Sde1D:
    return Sde1D(_ito_x_drift, _three_halves, _zero, Interpretation.ITO, "ito-x")


def ito_z_sde() -> Sde1D:
    """The Ito x-equation in ``z = 2x/3`` units (unit noise)."""
    return Sde1D(_ito_z_drift, _one, _zero, Interpretation.ITO, "ito-z")


def bessel3_sde() -> Sde1D:
    return Sde1D(_bessel3_drift, _one, _zero, Interpretation.ITO, "bessel3")


def ou_sde(lam: float = 1.0) -> Sde1D:
    lam = float(lam)

    @nb.njit
    def drift(t, x):
        return -lam * x

    return Sde1D(drift, _one, _zero, Interpretation.ITO, "ou")


# --- closed forms ------------------------------------------------------------

def strat_x_exact(params: CosmologyParams, driver: WienerPath) -> PathSolution:
    """``x(t) = t + 1.5 W_t + 1/H0`` on the driver grid."""
    x = driver.times + 1.5 * driver.values + params.x0
    return PathSolution(driver.grid, x, PathStatus())


def bessel3_exact(drivers) -> PathSolution:
    """Norm of a three-dimensional Brownian motion."""
    drivers = list(drivers)
    if len(drivers) != 3:
        raise ValueError(f"need three drivers, got {len(drivers)}")
    grid = drivers[0].grid
    if any(d.grid != grid for d in drivers[1:]):
        raise ValueError("drivers must share one grid")
    w = np.stack([d.values for d in drivers])
    return PathSolution(grid, np.sqrt(np.sum(w * w, axis=0)), PathStatus())


@nb.njit(cache=True)
def _windowed_exp_sums(w, m, decay):
    """``A_k = sum_{j=k-m}^{k} decay^(k-j) w_j`` for ``k >= m``, by recursion."""
    n = w.shape[0]
    out = np.full(n, np.nan)
    if n <= m:
        return out
    acc = 0.0
    for j in range(m + 1):
        acc = acc * decay + w[j]
    out[m] = acc
    tail = decay ** (m + 1)
    for k in range(m + 1, n):
        acc = acc * decay + w[k] - tail * w[k - m - 1]
        out[k] = acc
    return out


def _eval_indices(driver: TwoSidedWienerPath, eval_times) -> np.ndarray:
    if isinstance(eval_times, TimeGrid):
        eval_times = eval_times.times
    t = np.atleast_1d(np.asarray(eval_times, dtype=float))
    k = np.rint(t / driver.dt).astype(np.int64)
    if np.any(np.abs(k * driver.dt - t) > 1e-9 * np.maximum(1.0, np.abs(t))):
        raise ValueError("evaluation times must lie on the driver grid")
    return k


def ou_stationary(params: OuParams, driver: TwoSidedWienerPath, eval_times) -> np.ndarray:
    """Stationary Ornstein-Uhlenbeck solution driven by a two-sided path.

    ``z*(t) = w(t) - lam * int_{-t_trunc}^{0} exp(lam s) w(t+s) ds``, the
    integral by the trapezoid rule on the driver grid.
    """
    k = _eval_indices(driver, eval_times)
    dt = driver.dt
    m = int(round(params.t_trunc / dt))
    if abs(m * dt - params.t_trunc) > 1e-9 * params.t_trunc:
        raise ValueError("t_trunc must be a multiple of the driver step")
    lo = k - m
    if np.any(lo < -driver.negative.grid.n_steps) or np.any(k > driver.positive.grid.n_steps):
        raise ValueError(
            f"driver covers [-{driver.t_trunc}, {driver.horizon}] but evaluation needs "
            f"[{(lo.min()) * dt}, {k.max() * dt}]")
    w = driver.values
    off = driver.offset
    decay = math.exp(-params.lam * dt)
    sums = _windowed_exp_sums(w, m, decay)
    idx = k + off
    integral = dt * (sums[idx] - 0.5 * w[idx] - 0.5 * decay**m * w[idx - m])
    return w[idx] - params.lam * integral


def conjugated_solution_cos4(params: CosmologyParams, ou: OuParams, driver: TwoSidedWienerPath) -> PathSolution:
    """Solve ``dx = dt + 1.5 dW`` through the random ODE for ``y = 2x/3 - z*``.

    ``y(t) = y(0) + (2/3) t + lam * int_0^t z*``, then ``x = 1.5 (y + z*)``.
    """
    grid = driver.positive.grid
    z = ou_stationary(ou, driver, grid)
    y0 = params.z0 - z[0]
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (z[1:] + z[:-1]) * grid.dt)])
    y = y0 + (2.0 / 3.0) * grid.times + ou.lam * integral
    return PathSolution(grid, 1.5 * (y + z), PathStatus())


def bounds_z(t: float, W_t, bessel_R_t, z0: float):
    """``(z_minus, z_plus)`` with ``z_minus = 2t/3 + W_t + z0`` and ``z_plus = R_t + 2t/3 + z0``."""
    if not z0 > 0:
        raise ValueError(f"z0 must be positive, got {z0}")
    if np.any(np.asarray(bessel_R_t) < 0):
        raise ValueError("Bessel value must be non-negative")
    base = (2.0 / 3.0) * np.asarray(t, dtype=float) + z0
    lo = base + W_t
    hi = base + bessel_R_t
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi


def bounds_H(params: CosmologyParams, t, W_t, bessel_R_t):
    """Pathwise ``(lower, upper)`` bounds on the Ito Hubble parameter.

    ``1/(1.5 y + t + 1/H0) <= H <= 1/max(1.5 W_t + t + 1/H0, 1.5 y)``.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(bessel_R_t, dtype=float)
    lower = 1.0 / (1.5 * y + t + params.x0)
    denom = np.maximum(1.5 * np.asarray(W_t, dtype=float) + t + params.x0, 1.5 * y)
    if np.any(denom <= 0):
        raise ValueError("upper bound undefined: max(1.5 W + t + 1/H0, 1.5 y) <= 0")
    upper = 1.0 / denom
    if lower.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


@nb.njit(cache=True)
def _coupled_kernel(z0, eps, dt, dw):
    n = dw.shape[0]
    z = np.empty(n + 1)
    y = np.empty(n + 1)
    z[0] = z0
    y[0] = eps
    for k in range(n):
        z[k + 1] = z[k] + (2.0 / 3.0 + 1.0 / z[k]) * dt + dw[k]
        # reflected Euler keeps the Bessel approximation non-negative
        y[k + 1] = abs(y[k] + dt / y[k] + dw[k])
    return z, y


def coupled_comparison(params: CosmologyParams, driver: WienerPath, eps: float | None = None):
    """Ito z-path and Bessel(3) comparison path sharing one Brownian driver.

    Both use Euler steps; the Bessel path starts at ``eps`` (default
    ``sqrt(dt)``) since its drift is singular at zero.  Returns ``(z, y)``.
    """
    dt = driver.grid.dt
    if eps is None:
        eps = math.sqrt(dt)
    dw = np.ascontiguousarray(np.diff(driver.values))
    return _coupled_kernel(params.z0, float(eps), dt, dw)
