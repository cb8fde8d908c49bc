"""Brownian paths on uniform grids: generation, bridge refinement, barrier probabilities.

All randomness comes from a counter-based Philox generator whose key is a
64-bit seed token.  Ensemble code derives per-path tokens from a master seed
with :func:`derive_seed`, so results do not depend on scheduling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hubblesde._io import atomic_write_text, fmt

__all__ = [
    "TimeGrid",
    "WienerPath",
    "TwoSidedWienerPath",
    "derive_seed",
    "make_rng",
    "generate_wiener",
    "generate_two_sided",
    "refine_bridge",
    "bridge_crossing_prob",
]

_MASK64 = (1 << 64) - 1


def derive_seed(master: int, *keys: int) -> int:
    """Hash a master seed and a tuple of integer keys into a 64-bit token.

    ``derive_seed(m, i)`` is the token of path ``i`` of an ensemble seeded
    with ``m``; extra keys select independent sub-streams of that path.
    """
    ss = np.random.SeedSequence(int(master) & _MASK64, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed by a seed token."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 + k*dt`` for ``k = 0..n_steps``."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.dt)):
            raise ValueError(f"grid parameters must be finite (t0={self.t0}, dt={self.dt})")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def from_horizon(cls, horizon: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        """Grid on ``[t0, t0+horizon]``; ``horizon/dt`` must be (close to) an integer."""
        n = horizon / dt
        n_int = int(round(n))
        if n_int < 1 or abs(n - n_int) > 1e-9 * max(1.0, n):
            raise ValueError(f"horizon {horizon} is not a positive multiple of dt {dt}")
        return cls(t0, dt, n_int)

    @property
    def t_end(self) -> float:
        return self.time(self.n_steps)

    def time(self, k: int) -> float:
        return self.t0 + k * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of grid point ``t``; raises if ``t`` is not on the grid."""
        k = (t - self.t0) / self.dt
        k_int = int(round(k))
        if abs(k - k_int) > tol * max(1.0, abs(k)) or not 0 <= k_int <= self.n_steps:
            raise ValueError(f"time {t} is not a point of {self}")
        return k_int


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WienerPath:
    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    seed: int | None = None

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.grid.n_steps + 1,):
            raise ValueError(f"expected {self.grid.n_steps + 1} values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)

    def subsample(self, stride: int) -> "WienerPath":
        """Every ``stride``-th point; ``n_steps`` must be divisible by ``stride``."""
        if stride < 1 or self.grid.n_steps % stride:
            raise ValueError(f"stride {stride} does not divide {self.grid.n_steps}")
        g = TimeGrid(self.grid.t0, self.grid.dt * stride, self.grid.n_steps // stride)
        return WienerPath(g, self.values[::stride], self.seed)

    def to_csv(self, path: str | Path) -> None:
        lines = ["t,W"]
        lines += [f"{fmt(t)},{fmt(w)}" for t, w in zip(self.times, self.values)]
        atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class TwoSidedWienerPath:
    """Brownian motion on ``[-t_trunc, T]`` glued from two independent branches.

    ``negative`` is stored in reversed time: ``negative.values[k]`` is the
    value at time ``-k*dt``.
    """

    negative: WienerPath
    positive: WienerPath

    def __post_init__(self):
        if self.negative.grid.dt != self.positive.grid.dt:
            raise ValueError("branches must share the step size")
        if self.negative.grid.t0 != 0.0 or self.positive.grid.t0 != 0.0:
            raise ValueError("both branches must start at t=0")

    @property
    def dt(self) -> float:
        return self.positive.grid.dt

    @property
    def t_trunc(self) -> float:
        return self.negative.grid.t_end

    @property
    def horizon(self) -> float:
        return self.positive.grid.t_end

    @property
    def offset(self) -> int:
        """Index of ``t=0`` in :attr:`values`."""
        return self.negative.grid.n_steps

    @property
    def values(self) -> np.ndarray:
        """Values on the full grid ``-t_trunc .. T`` in increasing time."""
        return np.concatenate([self.negative.values[::-1], self.positive.values[1:]])

    @property
    def times(self) -> np.ndarray:
        n_neg = self.negative.grid.n_steps
        return (np.arange(n_neg + self.positive.grid.n_steps + 1) - n_neg) * self.dt


def generate_wiener(grid: TimeGrid, seed: int) -> WienerPath:
    """Brownian path on ``grid`` with ``W(t0) = 0``; deterministic in ``(grid, seed)``."""
    if not math.isfinite(grid.dt):
        raise ValueError("dt must be finite")
    rng = make_rng(seed)
    values = np.empty(grid.n_steps + 1)
    values[0] = 0.0
    values[1:] = rng.standard_normal(grid.n_steps)
    values[1:] *= math.sqrt(grid.dt)
    np.cumsum(values, out=values)
    return WienerPath(grid, values, seed)


def generate_two_sided(t_trunc: float, horizon: float, dt: float, seed: int) -> TwoSidedWienerPath:
    """Two-sided path on ``[-t_trunc, horizon]``; branches use sub-seeds of ``seed``."""
    neg = generate_wiener(TimeGrid.from_horizon(t_trunc, dt), derive_seed(seed, 1))
    pos = generate_wiener(TimeGrid.from_horizon(horizon, dt), derive_seed(seed, 0))
    return TwoSidedWienerPath(neg, pos)


def refine_bridge(path: WienerPath, factor: int, seed: int) -> WienerPath:
    """Insert ``factor - 1`` Brownian-bridge points into every step of ``path``.

    Coarse points are copied verbatim, so subsampling the result with stride
    ``factor`` returns the input values exactly.
    """
    if int(factor) != factor or factor < 2:
        raise ValueError(f"refinement factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    n = path.grid.n_steps
    fine_dt = path.grid.dt / factor
    rng = make_rng(seed)
    # Free Brownian motion inside each coarse step, then pinned to the endpoints.
    local = rng.standard_normal((n, factor)) * math.sqrt(fine_dt)
    np.cumsum(local, axis=1, out=local)
    frac = np.arange(1, factor) / factor
    w = path.values
    inner = (
        w[:-1, None]
        + frac[None, :] * (w[1:] - w[:-1])[:, None]
        + local[:, :-1]
        - frac[None, :] * local[:, -1:]
    )
    values = np.empty(n * factor + 1)
    values[::factor] = w
    values[1:].reshape(n, factor)[:, :-1] = inner
    return WienerPath(TimeGrid(path.grid.t0, fine_dt, n * factor), values, seed)


def bridge_crossing_prob(x_left: float, x_right: float, barrier: float, variance_of_step: float) -> float:
    """Probability that a Brownian bridge between two endpoints touches ``barrier``.

    Returns 1 when the endpoints straddle or touch the barrier.
    """
    if not variance_of_step > 0:
        raise ValueError(f"variance_of_step must be positive, got {variance_of_step}")
    dl = x_left - barrier
    dr = x_right - barrier
    if dl * dr <= 0:
        return 1.0
    return math.exp(-2.0 * dl * dr / variance_of_step)
