"""Scalar SDE models, Ito/Stratonovich conversion and fixed-step integration.

Model coefficients are callables ``(t, x) -> float``.  When they are numba
``@njit`` functions, :func:`integrate` runs a compiled loop; plain Python
callables fall back to an interpreted loop with identical semantics.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numba as nb
import numpy as np
from numba.core.registry import CPUDispatcher

from hubblesde._io import atomic_write_text, fmt, to_json
from hubblesde.passage import Barrier, resolve_bridge, _as_rng
from hubblesde.paths import TimeGrid, WienerPath

__all__ = [
    "Interpretation",
    "SolverScheme",
    "Sde1D",
    "PathStatus",
    "PathSolution",
    "SchemeMismatchError",
    "NonFiniteStepError",
    "convert_interpretation",
    "scale_noise",
    "step",
    "integrate",
    "OVERFLOW_THRESHOLD",
]

OVERFLOW_THRESHOLD = 1e12


class SchemeMismatchError(ValueError):
    """Scheme used with a model of the other interpretation."""


class NonFiniteStepError(ArithmeticError):
    pass


class Interpretation(enum.Enum):
    ITO = "Ito"
    STRATONOVICH = "Stratonovich"


class SolverScheme(enum.Enum):
    EULER_MARUYAMA = "EulerMaruyama"
    MILSTEIN = "Milstein"
    STRATONOVICH_HEUN = "StratonovichHeun"

    @property
    def interpretation(self) -> Interpretation:
        if self is SolverScheme.STRATONOVICH_HEUN:
            return Interpretation.STRATONOVICH
        return Interpretation.ITO


_SCHEME_CODE = {
    SolverScheme.EULER_MARUYAMA: 0,
    SolverScheme.MILSTEIN: 1,
    SolverScheme.STRATONOVICH_HEUN: 2,
}


@dataclass(frozen=True)
class Sde1D:
    drift: Callable
    diffusion: Callable
    diffusion_dx: Callable | None
    interpretation: Interpretation
    label: str = "sde"

    @property
    def compiled(self) -> bool:
        fns = [self.drift, self.diffusion]
        if self.diffusion_dx is not None:
            fns.append(self.diffusion_dx)
        return all(isinstance(f, CPUDispatcher) for f in fns)


@dataclass(frozen=True)
class PathStatus:
    """Termination status: ``completed``, ``barrier`` or ``overflow``."""

    kind: str = "completed"
    time: float | None = None
    bridge_detected: bool = False

    COMPLETED = "completed"
    BARRIER = "barrier"
    OVERFLOW = "overflow"

    @classmethod
    def stopped_at_barrier(cls, time: float, bridge_detected: bool) -> "PathStatus":
        return cls(cls.BARRIER, float(time), bool(bridge_detected))

    @classmethod
    def overflowed(cls, time: float) -> "PathStatus":
        return cls(cls.OVERFLOW, float(time))

    @property
    def completed(self) -> bool:
        return self.kind == self.COMPLETED

    def __str__(self):
        if self.kind == self.COMPLETED:
            return "Completed"
        if self.kind == self.BARRIER:
            return f"StoppedAtBarrier t={fmt(self.time)} bridge={'true' if self.bridge_detected else 'false'}"
        return f"Overflowed t={fmt(self.time)}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "time": self.time, "bridge_detected": self.bridge_detected}


@dataclass(frozen=True, eq=False)
class PathSolution:
    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    status: PathStatus = PathStatus()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if not 1 <= v.size <= self.grid.n_steps + 1:
            raise ValueError(f"{v.size} values do not fit a grid of {self.grid.n_steps} steps")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[: self.values.size]

    @property
    def final_time(self) -> float:
        return self.grid.time(self.values.size - 1)

    @property
    def final_value(self) -> float:
        return float(self.values[-1])

    def value_at(self, t: float) -> float:
        """Value at grid time ``t``; NaN if the path stopped before ``t``."""
        k = self.grid.index_of(t)
        return float(self.values[k]) if k < self.values.size else math.nan

    def to_csv_text(self, value_name: str = "x") -> str:
        lines = [f"t,{value_name}"]
        lines += [f"{fmt(t)},{fmt(x)}" for t, x in zip(self.times, self.values)]
        lines.append(f"# status={self.status}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str | Path, value_name: str = "x") -> None:
        atomic_write_text(path, self.to_csv_text(value_name))

    def to_dict(self) -> dict:
        return {"t": self.times, "x": self.values, "status": self.status.to_dict()}

    def to_json(self) -> str:
        return to_json(self.to_dict())


# --- model transformations -------------------------------------------------

def _combine(f, g, gx, sign):
    """Drift ``f + sign * 0.5 * g * gx``, compiled when the parts are."""
    if all(isinstance(h, CPUDispatcher) for h in (f, g, gx)):
        @nb.njit
        def drift(t, x):
            return f(t, x) + sign * 0.5 * g(t, x) * gx(t, x)
    else:
        def drift(t, x):
            return f(t, x) + sign * 0.5 * g(t, x) * gx(t, x)
    return drift


def convert_interpretation(model: Sde1D, target: Interpretation) -> Sde1D:
    """Equivalent model under ``target``: Ito drift = Stratonovich drift + sigma*sigma'/2."""
    if target is model.interpretation:
        return model
    if model.diffusion_dx is None:
        raise ValueError(f"converting {model.label!r} needs diffusion_dx")
    sign = 1.0 if target is Interpretation.ITO else -1.0
    drift = _combine(model.drift, model.diffusion, model.diffusion_dx, sign)
    return replace(model, drift=drift, interpretation=target, label=f"{model.label}->{target.value}")


def _scaled(h, c):
    if isinstance(h, CPUDispatcher):
        @nb.njit
        def out(t, x):
            return c * h(t, x)
    else:
        def out(t, x):
            return c * h(t, x)
    return out


def scale_noise(model: Sde1D, factor: float) -> Sde1D:
    """Same model with the diffusion (and its derivative) multiplied by ``factor``."""
    c = float(factor)
    dx = None if model.diffusion_dx is None else _scaled(model.diffusion_dx, c)
    return replace(model, diffusion=_scaled(model.diffusion, c), diffusion_dx=dx,
                   label=f"{model.label}*{c:g}")


# --- stepping ----------------------------------------------------------------

def _check_scheme(model: Sde1D, scheme: SolverScheme):
    if scheme.interpretation is not model.interpretation:
        raise SchemeMismatchError(
            f"{scheme.value} needs an {scheme.interpretation.value} model, "
            f"{model.label!r} is {model.interpretation.value}")
    if scheme is SolverScheme.MILSTEIN and model.diffusion_dx is None:
        raise ValueError("Milstein needs diffusion_dx")


def _step_py(model: Sde1D, code: int, t: float, x: float, dw: float, dt: float) -> float:
    f = model.drift(t, x)
    g = model.diffusion(t, x)
    if code == 0:
        return x + f * dt + g * dw
    if code == 1:
        return x + f * dt + g * dw + 0.5 * g * model.diffusion_dx(t, x) * (dw * dw - dt)
    xp = x + f * dt + g * dw
    return x + 0.5 * (f + model.drift(t + dt, xp)) * dt + 0.5 * (g + model.diffusion(t + dt, xp)) * dw


def step(model: Sde1D, scheme: SolverScheme, t: float, x: float, dW: float, dt: float) -> float:
    """One step of ``scheme`` from ``(t, x)`` with Brownian increment ``dW``."""
    _check_scheme(model, scheme)
    with np.errstate(all="ignore"):
        out = float(_step_py(model, _SCHEME_CODE[scheme], t, x, dW, dt))
    if not math.isfinite(out):
        raise NonFiniteStepError(f"non-finite value after step from x={x} at t={t}")
    return out


@nb.njit
def _zero(t, x):
    return 0.0


@nb.njit
def _integrate_kernel(drift, diff, diff_dx, code, t0, dt, x0, dw, use_barrier, level, orient, overflow):
    """Fixed-step loop.  Returns ``(values, n_valid, status, cand_idx, cand_p)``.

    status: 0 completed, 1 discrete barrier crossing at ``n_valid - 1``,
    2 overflow at ``n_valid - 1``.  Candidates are steps with a non-zero
    bridge crossing probability before the stopping step.
    """
    n = dw.shape[0]
    out = np.empty(n + 1)
    cand_idx = np.empty(n if use_barrier else 0, np.int64)
    cand_p = np.empty(n if use_barrier else 0)
    nc = 0
    out[0] = x0
    x = x0
    for k in range(n):
        t = t0 + k * dt
        f = drift(t, x)
        g = diff(t, x)
        w = dw[k]
        if code == 0:
            xn = x + f * dt + g * w
        elif code == 1:
            xn = x + f * dt + g * w + 0.5 * g * diff_dx(t, x) * (w * w - dt)
        else:
            xp = x + f * dt + g * w
            xn = x + 0.5 * (f + drift(t + dt, xp)) * dt + 0.5 * (g + diff(t + dt, xp)) * w
        out[k + 1] = xn
        if not (abs(xn) <= overflow):
            return out, k + 2, 2, cand_idx[:nc], cand_p[:nc]
        if use_barrier:
            dl = orient * (x - level)
            dr = orient * (xn - level)
            if dr <= 0.0:
                return out, k + 2, 1, cand_idx[:nc], cand_p[:nc]
            v = g * g * dt
            if v > 0.0:
                e = -2.0 * dl * dr / v
                if e > -745.2:
                    cand_idx[nc] = k
                    cand_p[nc] = math.exp(e)
                    nc += 1
        x = xn
    return out, n + 1, 0, cand_idx[:nc], cand_p[:nc]


def _integrate_py(model, code, t0, dt, x0, dw, use_barrier, level, orient, overflow):
    n = dw.shape[0]
    out = np.empty(n + 1)
    cand_idx, cand_p = [], []
    out[0] = x0
    x = x0
    with np.errstate(all="ignore"):
        for k in range(n):
            t = t0 + k * dt
            xn = float(_step_py(model, code, t, x, float(dw[k]), dt))
            out[k + 1] = xn
            if not (abs(xn) <= overflow):
                return out, k + 2, 2, np.array(cand_idx, np.int64), np.array(cand_p)
            if use_barrier:
                dl = orient * (x - level)
                dr = orient * (xn - level)
                if dr <= 0.0:
                    return out, k + 2, 1, np.array(cand_idx, np.int64), np.array(cand_p)
                g = float(model.diffusion(t, x))
                v = g * g * dt
                if v > 0.0:
                    e = -2.0 * dl * dr / v
                    if e > -745.2:
                        cand_idx.append(k)
                        cand_p.append(math.exp(e))
            x = xn
    return out, n + 1, 0, np.array(cand_idx, np.int64), np.array(cand_p)


def integrate(model: Sde1D, scheme: SolverScheme, x0: float, driver: WienerPath,
              barrier: Barrier | None = None, rng=None, *, bridge: bool = True,
              overflow: float = OVERFLOW_THRESHOLD) -> PathSolution:
    """Integrate ``model`` along ``driver`` and stop at a barrier hit or overflow.

    Bridge uniforms come from ``rng`` (a Generator or seed token) in the same
    order :func:`~hubblesde.passage.detect_first_passage` would draw them, so
    detection during and after integration agree.
    """
    _check_scheme(model, scheme)
    x0 = float(x0)
    if not math.isfinite(x0):
        raise ValueError(f"x0 must be finite, got {x0}")
    grid = driver.grid
    dw = np.ascontiguousarray(np.diff(driver.values))
    code = _SCHEME_CODE[scheme]
    use_barrier = barrier is not None
    level = barrier.level if use_barrier else 0.0
    orient = barrier.orientation(x0) if use_barrier else 1.0
    if use_barrier and orient * (x0 - level) <= 0:
        return PathSolution(grid, [x0], PathStatus.stopped_at_barrier(grid.t0, False))
    if bridge and use_barrier and rng is None:
        raise ValueError("bridge-corrected barrier detection needs an rng")

    if model.compiled:
        diff_dx = model.diffusion_dx if model.diffusion_dx is not None else _zero
        out, n_valid, status, cand_idx, cand_p = _integrate_kernel(
            model.drift, model.diffusion, diff_dx, code, grid.t0, grid.dt, x0, dw,
            use_barrier, level, orient, overflow)
    else:
        out, n_valid, status, cand_idx, cand_p = _integrate_py(
            model, code, grid.t0, grid.dt, x0, dw, use_barrier, level, orient, overflow)

    if use_barrier and bridge:
        j = resolve_bridge(cand_idx, cand_p, _as_rng(rng))
        if j >= 0:
            return PathSolution(grid, out[: j + 2], PathStatus.stopped_at_barrier(grid.time(j + 1), True))
    if status == 0:
        return PathSolution(grid, out, PathStatus())
    stop_t = grid.time(n_valid - 1)
    st = PathStatus.stopped_at_barrier(stop_t, False) if status == 1 else PathStatus.overflowed(stop_t)
    return PathSolution(grid, out[:n_valid], st)
