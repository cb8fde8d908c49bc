"""First-passage times of Brownian motion with drift, and barrier detection on paths.

The analytic part concerns ``T_a = inf{t >= 0 : mu*t + W_t = a}``.  For the
additive-noise x-equation ``x(t) = t + 1.5 W_t + 1/H0`` the event ``x = 0`` is
``(2/3) t + W_t = -2/(3 H0)``, which gives the blow-up probability.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numba as nb
import numpy as np
from scipy import integrate

from hubblesde.paths import make_rng

if TYPE_CHECKING:
    from hubblesde.models import CosmologyParams
    from hubblesde.sde import PathSolution

__all__ = [
    "Direction",
    "Barrier",
    "DriftedBmSpec",
    "FirstPassageResult",
    "fpt_density",
    "fpt_prob_finite",
    "fpt_cdf",
    "blowup_probability",
    "blowup_spec",
    "detect_first_passage",
    "tabulate_density",
]


class Direction(enum.Enum):
    FROM_ABOVE = "from_above"
    FROM_BELOW = "from_below"
    EITHER = "either"


@dataclass(frozen=True)
class Barrier:
    level: float = 0.0
    direction: Direction = Direction.FROM_ABOVE

    def __post_init__(self):
        if not math.isfinite(self.level):
            raise ValueError(f"barrier level must be finite, got {self.level}")

    def orientation(self, x0: float) -> float:
        """Sign that makes the signed distance to the barrier positive before a hit."""
        if self.direction is Direction.FROM_ABOVE:
            return 1.0
        if self.direction is Direction.FROM_BELOW:
            return -1.0
        return -1.0 if x0 < self.level else 1.0


@dataclass(frozen=True)
class DriftedBmSpec:
    """Passage of ``mu*t + W_t`` through level ``a``."""

    mu: float
    a: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.a)):
            raise ValueError("mu and a must be finite")

    def _check(self):
        if self.a == 0:
            raise ValueError("barrier level a must be non-zero")

    @property
    def mode(self) -> float:
        """Location of the density maximum."""
        a2 = self.a * self.a
        if self.mu == 0:
            return a2 / 3.0
        m2 = self.mu * self.mu
        return (math.sqrt(9.0 + 4.0 * m2 * a2) - 3.0) / (2.0 * m2)


@dataclass(frozen=True)
class FirstPassageResult:
    hit: bool
    time: float | None = None
    index: int | None = None
    bridge_detected: bool = False


def fpt_density(spec: DriftedBmSpec, t):
    """Density ``|a| / sqrt(2 pi t^3) * exp(-(a - mu t)^2 / (2t))`` of ``T_a``."""
    spec._check()
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0)):
        raise ValueError("first-passage density needs t > 0")
    a, mu = spec.a, spec.mu
    out = abs(a) / np.sqrt(2.0 * np.pi * t_arr**3) * np.exp(-((a - mu * t_arr) ** 2) / (2.0 * t_arr))
    return float(out) if out.ndim == 0 else out


def fpt_prob_finite(spec: DriftedBmSpec) -> float:
    """``P(T_a < inf) = exp(mu*a - |mu*a|)``."""
    spec._check()
    ma = spec.mu * spec.a
    return math.exp(ma - abs(ma))


def _density_in_sqrt_time(s: float, a: float, mu: float) -> float:
    # density(t) dt with t = s^2; smooth and vanishing as s -> 0+
    if s <= 0.0:
        return 0.0
    t = s * s
    return 2.0 * abs(a) / (math.sqrt(2.0 * math.pi) * t) * math.exp(-((a - mu * t) ** 2) / (2.0 * t))


def fpt_cdf(spec: DriftedBmSpec, t: float, epsabs: float = 1e-9) -> float:
    """``P(T_a <= t)`` by adaptive quadrature of :func:`fpt_density`.

    Integrates in ``s = sqrt(t)`` to remove the ``t^-3/2`` stiffness near the
    origin.  ``t = inf`` gives the total mass.
    """
    spec._check()
    if not t > 0:
        raise ValueError("fpt_cdf needs t > 0")
    a, mu = spec.a, spec.mu
    s_end = math.sqrt(t)
    s_mode = math.sqrt(spec.mode)
    # break the range at the mode and a few of its multiples so quad sees the peak
    marks = [m * s_mode for m in (0.5, 1.0, 2.0, 4.0)]
    if mu != 0:
        marks.append(math.sqrt(abs(a / mu)))
    edges = [0.0] + sorted(m for m in marks if 0 < m < s_end) + [s_end]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(_density_in_sqrt_time, lo, hi, args=(a, mu), epsabs=epsabs / len(edges),
                                epsrel=1e-12, limit=500)
        total += val
    return min(total, 1.0)


def blowup_spec(H0: float) -> DriftedBmSpec:
    """Passage problem equivalent to ``x = 1/H`` reaching zero."""
    if not H0 > 0:
        raise ValueError(f"H0 must be positive, got {H0}")
    return DriftedBmSpec(mu=2.0 / 3.0, a=-2.0 / (3.0 * H0))


def blowup_probability(params: "CosmologyParams | float") -> float:
    """Probability ``exp(-8/(9 H0))`` that the Stratonovich solution blows up."""
    H0 = getattr(params, "H0", params)
    return fpt_prob_finite(blowup_spec(float(H0)))


def tabulate_density(spec: DriftedBmSpec, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columns ``t, density, cdf`` on increasing ``times``.

    The CDF is accumulated interval by interval so a long table costs one
    quadrature per row.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    dens = fpt_density(spec, times)
    cdf = np.empty_like(times)
    acc = fpt_cdf(spec, float(times[0]))
    cdf[0] = acc
    a, mu = spec.a, spec.mu
    for i in range(1, len(times)):
        val, _ = integrate.quad(_density_in_sqrt_time, math.sqrt(times[i - 1]), math.sqrt(times[i]),
                                args=(a, mu), epsabs=1e-12, epsrel=1e-12, limit=200)
        acc += val
        cdf[i] = acc
    return times, np.atleast_1d(dens), cdf


@nb.njit(cache=True)
def scan_signed_distance(d, var):
    """Scan signed barrier distances ``d`` (positive = not yet hit).

    Returns ``(k_discrete, cand_idx, cand_p)``: the first index ``k >= 1`` with
    ``d[k] <= 0`` (``-1`` if none), and the steps before it whose bridge
    crossing probability ``exp(-2 d_j d_{j+1} / var_j)`` is non-zero.
    """
    n = d.shape[0]
    cand_idx = np.empty(n, np.int64)
    cand_p = np.empty(n)
    nc = 0
    k_hit = -1
    for j in range(n - 1):
        if d[j + 1] <= 0.0:
            k_hit = j + 1
            break
        v = var[j]
        if v > 0.0:
            e = -2.0 * d[j] * d[j + 1] / v
            if e > -745.2:
                cand_idx[nc] = j
                cand_p[nc] = math.exp(e)
                nc += 1
    return k_hit, cand_idx[:nc], cand_p[:nc]


def resolve_bridge(cand_idx: np.ndarray, cand_p: np.ndarray, rng: np.random.Generator) -> int:
    """Draw one uniform per candidate step in order; index of the first success or -1."""
    if cand_idx.size == 0:
        return -1
    u = rng.random(cand_idx.size)
    hits = np.flatnonzero(u < cand_p)
    return int(cand_idx[hits[0]]) if hits.size else -1


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(int(rng))


def _diffusion_on(diffusion_at_step: Callable, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    try:
        sig = np.asarray(diffusion_at_step(t, x), dtype=float)
        return np.broadcast_to(sig, x.shape)
    except Exception:
        return np.array([float(diffusion_at_step(ti, xi)) for ti, xi in zip(t, x)])


def detect_first_passage(solution: "PathSolution", barrier: Barrier, diffusion_at_step: Callable,
                         rng, bridge: bool = True) -> FirstPassageResult:
    """First barrier hit along a discretely sampled path.

    A step whose endpoints straddle the barrier is a hit.  Otherwise each step
    with a non-zero bridge probability (variance ``sigma(t_j, x_j)^2 dt``)
    consumes one uniform from ``rng``; the first success is a hit.  Hit times
    are reported at the right endpoint of the detecting step.
    """
    x = np.asarray(solution.values, dtype=float)
    t = solution.grid.times[: x.size]
    orient = barrier.orientation(float(x[0]))
    d = orient * (x - barrier.level)
    if d[0] <= 0:
        return FirstPassageResult(True, float(t[0]), 0, False)
    sig = _diffusion_on(diffusion_at_step, t[:-1], x[:-1])
    var = sig * sig * solution.grid.dt if bridge else np.zeros(x.size - 1)
    k_hit, cand_idx, cand_p = scan_signed_distance(d, np.ascontiguousarray(var))
    j = resolve_bridge(cand_idx, cand_p, _as_rng(rng)) if bridge else -1
    if j >= 0:
        return FirstPassageResult(True, float(t[j + 1]), j + 1, True)
    if k_hit >= 0:
        return FirstPassageResult(True, float(t[k_hit]), k_hit, False)
    return FirstPassageResult(False)
