"""Reproducible Monte Carlo over path ensembles.

Path ``i`` of an ensemble seeded with ``m`` is driven by the Philox key
``derive_seed(m, i)``; its bridge uniforms use ``derive_seed(m, i, 1)``.
Paths are processed in fixed chunks and collected in index order, so every
report is bit-identical for any number of worker processes.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import multiprocessing as mp
from typing import Callable, Sequence

import numba as nb
import numpy as np

from hubblesde import models
from hubblesde.models import CosmologyParams, OuParams
from hubblesde.passage import Barrier, blowup_probability, blowup_spec, fpt_cdf, resolve_bridge
from hubblesde.paths import (TimeGrid, derive_seed, generate_two_sided, generate_wiener,
                             make_rng, refine_bridge)
from hubblesde.sde import (Interpretation, PathSolution, PathStatus, Sde1D, SolverScheme,
                           convert_interpretation, integrate, scale_noise)

__all__ = [
    "MODEL_NAMES",
    "EnsembleConfig",
    "EnsembleStats",
    "BlowupEstimate",
    "CheckpointSummary",
    "AsymptoticReport",
    "BoundsReport",
    "ConvergenceReport",
    "ConjugationReport",
    "conjugation_gaps",
    "simulate_path",
    "map_paths",
    "run_ensemble",
    "estimate_blowup_fraction",
    "asymptotic_slope",
    "verify_bounds",
    "convergence_study",
    "wilson_interval",
    "default_workers",
]

CHUNK = 128

MODEL_NAMES = ("det", "strat-H", "ito-H", "strat-H-ito", "strat-x", "strat-x-exact",
               "ito-x", "ito-z", "bessel3", "bessel3-exact", "ou")

_SDE_FACTORIES = {
    "strat-H": models.stratonovich_hubble_sde,
    "ito-H": models.ito_hubble_sde,
    "strat-H-ito": lambda: convert_interpretation(models.stratonovich_hubble_sde(), Interpretation.ITO),
    "strat-x": models.stratonovich_x_sde,
    "ito-x": models.ito_x_sde,
    "ito-z": models.ito_z_sde,
    "bessel3": models.bessel3_sde,
}


def default_workers() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class EnsembleConfig:
    """What to simulate.  ``model`` is a name from :data:`MODEL_NAMES` or an :class:`Sde1D`."""

    model: str | Sde1D
    grid: TimeGrid
    n_paths: int
    master_seed: int = 0
    scheme: SolverScheme | None = None
    H0: float = 1.0
    x0: float | None = None
    barrier: Barrier | None = None
    bridge: bool = True
    checkpoints: tuple = ()
    noise_scale: float = 1.0
    ou: OuParams = field(default_factory=OuParams)

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError(f"n_paths must be a positive integer, got {self.n_paths}")
        if isinstance(self.model, str) and self.model not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.model!r}; choose from {', '.join(MODEL_NAMES)}")
        CosmologyParams(self.H0)
        cps = tuple(float(c) for c in self.checkpoints)
        for c in cps:
            self.grid.index_of(c)
        object.__setattr__(self, "checkpoints", cps)
        if self.scheme is not None and self.sde is not None and self.scheme.interpretation is not self.sde.interpretation:
            raise ValueError(f"scheme {self.scheme.value} does not match {self.sde.interpretation.value} model")

    @property
    def params(self) -> CosmologyParams:
        return CosmologyParams(self.H0)

    @property
    def name(self) -> str:
        return self.model if isinstance(self.model, str) else self.model.label

    @property
    def sde(self) -> Sde1D | None:
        if isinstance(self.model, Sde1D):
            sde = self.model
        elif self.model == "ou":
            return None
        elif self.model in _SDE_FACTORIES:
            sde = _cached_sde(self.model)
        else:
            return None
        return sde if self.noise_scale == 1.0 else _cached_scaled(sde, self.noise_scale)

    @property
    def resolved_scheme(self) -> SolverScheme | None:
        if self.scheme is not None:
            return self.scheme
        sde = self.sde
        if sde is None:
            return None
        if sde.interpretation is Interpretation.STRATONOVICH:
            return SolverScheme.STRATONOVICH_HEUN
        return SolverScheme.EULER_MARUYAMA

    @property
    def initial_value(self) -> float:
        if self.x0 is not None:
            return float(self.x0)
        name = self.name
        if name in ("strat-H", "ito-H", "strat-H-ito", "det"):
            return self.H0
        if name == "ito-z":
            return self.params.z0
        if name in ("bessel3",):
            return math.sqrt(self.grid.dt)
        if name in ("ou", "bessel3-exact"):
            return 0.0
        return self.params.x0

    def describe(self) -> dict:
        return {
            "model": self.name,
            "scheme": None if self.resolved_scheme is None else self.resolved_scheme.value,
            "H0": self.H0,
            "x0": self.initial_value,
            "t0": self.grid.t0,
            "dt": self.grid.dt,
            "n_steps": self.grid.n_steps,
            "horizon": self.grid.t_end,
            "n_paths": self.n_paths,
            "master_seed": self.master_seed,
            "barrier": None if self.barrier is None else {
                "level": self.barrier.level, "direction": self.barrier.direction.value},
            "bridge": self.bridge,
            "noise_scale": self.noise_scale,
            "checkpoints": list(self.checkpoints),
        }


_SDE_CACHE: dict = {}


def _cached_sde(name: str) -> Sde1D:
    if name not in _SDE_CACHE:
        _SDE_CACHE[name] = _SDE_FACTORIES[name]()
    return _SDE_CACHE[name]


def _cached_scaled(sde: Sde1D, factor: float) -> Sde1D:
    key = (id(sde), factor)
    if key not in _SDE_CACHE:
        _SDE_CACHE[key] = (sde, scale_noise(sde, factor))
    return _SDE_CACHE[key][1]


# --- per-path simulation -----------------------------------------------------

@nb.njit(cache=True)
def _strat_x_chunk(normals, sq, w_last, t0, dt, k0, x0, level, orient, var, out):
    """Extend ``x = t + 1.5 W + x0`` by one chunk and scan it for a barrier hit.

    ``out[0]`` must hold the previous value.  Returns the discrete hit offset
    (or -1), bridge candidates, and the last Brownian value.
    """
    m = normals.shape[0]
    cand_idx = np.empty(m, np.int64)
    cand_p = np.empty(m)
    nc = 0
    w = w_last
    d_prev = orient * (out[0] - level)
    for j in range(m):
        w = w + normals[j] * sq
        x = (t0 + (k0 + j + 1) * dt) + 1.5 * w + x0
        out[j + 1] = x
        d = orient * (x - level)
        if d <= 0.0:
            return j + 1, cand_idx[:nc], cand_p[:nc], w
        if var > 0.0:
            e = -2.0 * d_prev * d / var
            if e > -745.2:
                cand_idx[nc] = j
                cand_p[nc] = math.exp(e)
                nc += 1
        d_prev = d
    return -1, cand_idx[:nc], cand_p[:nc], w


def strat_x_stopped(params: CosmologyParams, grid: TimeGrid, seed: int, bridge_seed: int,
                    barrier: Barrier | None = None, bridge: bool = True, chunk: int = 4096) -> PathSolution:
    """``strat_x_exact`` on ``generate_wiener(grid, seed)`` with early stopping at a barrier.

    Values and hit decisions equal those of the full path followed by
    :func:`~hubblesde.passage.detect_first_passage` with the bridge rng
    ``bridge_seed``; the Brownian path is generated chunk by chunk so stopped
    paths cost only their prefix.
    """
    barrier = barrier or Barrier(0.0)
    x0 = params.x0
    orient = barrier.orientation(x0)
    if orient * (x0 - barrier.level) <= 0:
        return PathSolution(grid, [x0], PathStatus.stopped_at_barrier(grid.t0, False))
    rng = make_rng(seed)
    rng_bridge = None
    sq = math.sqrt(grid.dt)
    var = 2.25 * grid.dt if bridge else 0.0
    n = grid.n_steps
    values = np.empty(n + 1)
    values[0] = x0
    w_last = 0.0
    k0 = 0
    while k0 < n:
        m = min(chunk, n - k0)
        normals = rng.standard_normal(m)
        k_hit, cand_idx, cand_p, w_last = _strat_x_chunk(
            normals, sq, w_last, grid.t0, grid.dt, k0, x0, barrier.level, orient, var, values[k0:k0 + m + 1])
        if cand_idx.size:
            if rng_bridge is None:
                rng_bridge = make_rng(bridge_seed)
            j = resolve_bridge(cand_idx, cand_p, rng_bridge)
            if j >= 0:
                stop = k0 + j + 1
                return PathSolution(grid, values[:stop + 1], PathStatus.stopped_at_barrier(grid.time(stop), True))
        if k_hit >= 0:
            stop = k0 + k_hit
            return PathSolution(grid, values[:stop + 1], PathStatus.stopped_at_barrier(grid.time(stop), False))
        k0 += m
    return PathSolution(grid, values, PathStatus())


def simulate_path(config: EnsembleConfig, index: int) -> PathSolution:
    """Path ``index`` of the ensemble described by ``config``."""
    seed = derive_seed(config.master_seed, index)
    bridge_seed = derive_seed(config.master_seed, index, 1)
    grid = config.grid
    name = config.name
    params = config.params
    if name == "det":
        return PathSolution(grid, models.deterministic_hubble(params, grid.times - grid.t0), PathStatus())
    if name == "strat-x-exact":
        if config.barrier is not None:
            return strat_x_stopped(params, grid, seed, bridge_seed, config.barrier, config.bridge)
        return models.strat_x_exact(params, generate_wiener(grid, seed))
    if name == "bessel3-exact":
        drivers = [generate_wiener(grid, seed)] + [
            generate_wiener(grid, derive_seed(config.master_seed, index, c)) for c in (2, 3)]
        return models.bessel3_exact(drivers)
    if name == "ou":
        two = generate_two_sided(config.ou.t_trunc, grid.t_end, grid.dt, seed)
        z = models.ou_stationary(config.ou, two, two.positive.grid)
        return PathSolution(two.positive.grid, z, PathStatus())
    driver = generate_wiener(grid, seed)
    return integrate(config.sde, config.resolved_scheme, config.initial_value, driver, config.barrier,
                     make_rng(bridge_seed) if config.barrier is not None else None, bridge=config.bridge)


def _warm_up(config: EnsembleConfig) -> None:
    """Compile numba kernels in the parent so forked workers inherit them."""
    small = TimeGrid(config.grid.t0, config.grid.dt, 2)
    try:
        simulate_path(EnsembleConfig(config.model, small, 1, config.master_seed, config.scheme, config.H0,
                                     config.x0, config.barrier, config.bridge, (), config.noise_scale,
                                     config.ou), 0)
    except Exception:
        pass


# --- parallel map ------------------------------------------------------------

_TASK: tuple | None = None


def _run_chunk(bounds):
    per_path, = _TASK
    lo, hi = bounds
    return [per_path(i) for i in range(lo, hi)]


def map_paths(n_paths: int, per_path: Callable[[int], object], workers: int | None = None,
              warm_up: Callable[[], None] | None = None) -> list:
    """``[per_path(i) for i in range(n_paths)]`` over forked worker processes.

    ``per_path`` may be any callable (closures included): workers inherit it
    through ``fork``, so nothing is pickled except the results.
    """
    global _TASK
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    chunks = [(lo, min(lo + CHUNK, n_paths)) for lo in range(0, n_paths, CHUNK)]
    if workers == 1 or len(chunks) == 1:
        return [per_path(i) for i in range(n_paths)]
    if warm_up is not None:
        warm_up()
    _TASK = (per_path,)
    try:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks)), mp_context=ctx) as pool:
            results = []
            for part in pool.map(_run_chunk, chunks):
                results.extend(part)
    finally:
        _TASK = None
    return results


# --- statistics --------------------------------------------------------------

def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = successes / n
    z2 = z * z
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n)
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


@dataclass(frozen=True)
class EnsembleStats:
    n: int
    mean: float
    variance: float
    stderr: float
    ci95: tuple[float, float]
    excluded: int = 0

    @classmethod
    def from_values(cls, values) -> "EnsembleStats":
        """Statistics of the finite entries; ``None``/NaN/inf entries count as excluded."""
        arr = np.array([np.nan if v is None else v for v in values], dtype=float)
        good = arr[np.isfinite(arr)]
        excluded = int(arr.size - good.size)
        n = int(good.size)
        if n == 0:
            return cls(0, math.nan, math.nan, math.nan, (math.nan, math.nan), excluded)
        # shift by the first value: exact for constant data and better conditioned
        dev = good - good[0]
        dmean = np.sum(dev) / n
        mean = float(good[0] + dmean)
        var = float(np.sum((dev - dmean) ** 2) / (n - 1)) if n > 1 else 0.0
        se = math.sqrt(var / n)
        return cls(n, mean, var, se, (mean - 1.96 * se, mean + 1.96 * se), excluded)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def run_ensemble(config: EnsembleConfig, functional: Callable[[PathSolution], float],
                 workers: int | None = None) -> EnsembleStats:
    """Apply ``functional`` to every path and aggregate.

    Paths on which the functional returns ``None`` or a non-finite value are
    excluded and counted.
    """
    def per_path(i):
        v = functional(simulate_path(config, i))
        return math.nan if v is None else float(v)

    return EnsembleStats.from_values(map_paths(config.n_paths, per_path, workers, lambda: _warm_up(config)))


# --- blow-up -----------------------------------------------------------------

@dataclass(frozen=True)
class BlowupEstimate:
    H0: float
    horizon: float
    dt: float
    n_paths: int
    hits: int
    bridge_hits: int
    fraction: float
    stderr: float
    ci95: tuple[float, float]
    analytic_truncated: float
    analytic_infinite: float
    bridge: bool = True
    master_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        return d


def estimate_blowup_fraction(params: CosmologyParams, horizon: float, grid: TimeGrid | float, n_paths: int,
                             master_seed: int = 0, *, bridge: bool = True,
                             workers: int | None = None) -> BlowupEstimate:
    """Fraction of Stratonovich paths with ``x = 1/H`` reaching zero by ``horizon``.

    ``grid`` is a :class:`TimeGrid` starting at 0 or just a step size.
    """
    dt = grid.dt if isinstance(grid, TimeGrid) else float(grid)
    if isinstance(grid, TimeGrid) and (grid.t0 != 0 or horizon > grid.t_end * (1 + 1e-12)):
        raise ValueError("horizon must lie within a grid starting at 0")
    sim_grid = TimeGrid.from_horizon(horizon, dt)
    config = EnsembleConfig("strat-x-exact", sim_grid, n_paths, master_seed, H0=params.H0,
                            barrier=Barrier(0.0), bridge=bridge)

    def per_path(i):
        st = simulate_path(config, i).status
        return (st.kind == PathStatus.BARRIER, st.bridge_detected)

    flags = map_paths(n_paths, per_path, workers, lambda: _warm_up(config))
    hits = sum(1 for h, _ in flags if h)
    bridge_hits = sum(1 for h, b in flags if h and b)
    frac = hits / n_paths
    return BlowupEstimate(
        H0=params.H0, horizon=float(horizon), dt=dt, n_paths=n_paths, hits=hits, bridge_hits=bridge_hits,
        fraction=frac, stderr=math.sqrt(frac * (1 - frac) / n_paths), ci95=wilson_interval(hits, n_paths),
        analytic_truncated=fpt_cdf(blowup_spec(params.H0), horizon),
        analytic_infinite=blowup_probability(params), bridge=bridge, master_seed=master_seed)


# --- asymptotics -------------------------------------------------------------

@dataclass(frozen=True)
class CheckpointSummary:
    t: float
    n_alive: int
    alive_fraction: float
    mean: float
    stderr: float
    within_band: float
    quantiles: tuple[float, float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d


@dataclass(frozen=True)
class AsymptoticReport:
    config: dict
    quantity: str
    band: float
    checkpoints: list
    excluded: int
    overflowed: int
    calibrated: bool = True

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "quantity": self.quantity,
            "band": self.band,
            "excluded": self.excluded,
            "overflowed": self.overflowed,
            "calibrated": self.calibrated,
            "checkpoints": [c.to_dict() for c in self.checkpoints],
        }

    @property
    def final(self) -> CheckpointSummary:
        return self.checkpoints[-1]


_H_MODELS = ("strat-H", "ito-H", "strat-H-ito", "det")


def asymptotic_slope(config: EnsembleConfig, checkpoints: Sequence[float] | None = None, *,
                     quantity: str = "Ht", band: float = 0.1, workers: int | None = None) -> AsymptoticReport:
    """Distribution of ``x(t)/t`` (``quantity="x/t"``) or ``H(t) t`` at each checkpoint.

    Only paths alive at a checkpoint enter its statistics; the alive
    fraction is reported alongside.  The band ``[1 - band, 1 + band]`` is a
    finite-horizon calibration, not an exact statement.
    """
    cps = tuple(float(c) for c in (checkpoints if checkpoints is not None else config.checkpoints))
    if not cps:
        cps = (config.grid.t_end,)
    if any(c <= 0 for c in cps):
        raise ValueError("checkpoints must be positive")
    if quantity not in ("Ht", "x/t"):
        raise ValueError(f"quantity must be 'Ht' or 'x/t', got {quantity!r}")
    idx = [config.grid.index_of(c) for c in cps]
    in_h = config.name in _H_MODELS

    def per_path(i):
        sol = simulate_path(config, i)
        v = sol.values
        out = np.full(len(idx), np.nan)
        for j, k in enumerate(idx):
            if k < v.size and (sol.status.completed or k < v.size - 1):
                state = v[k]
                h = state if in_h else 1.0 / state
                out[j] = h * cps[j] if quantity == "Ht" else 1.0 / (h * cps[j])
        return out, sol.status.kind

    results = map_paths(config.n_paths, per_path, workers, lambda: _warm_up(config))
    table = np.array([r[0] for r in results]).reshape(config.n_paths, len(idx))
    kinds = [r[1] for r in results]
    summaries = []
    for j, t in enumerate(cps):
        col = table[:, j]
        alive = col[np.isfinite(col)]
        n_alive = int(alive.size)
        if n_alive:
            stats = EnsembleStats.from_values(alive)
            q = tuple(float(v) for v in np.quantile(alive, [0.01, 0.5, 0.99]))
            inside = float(np.count_nonzero(np.abs(alive - 1.0) <= band) / n_alive)
            summaries.append(CheckpointSummary(t, n_alive, n_alive / config.n_paths, stats.mean, stats.stderr,
                                               inside, q))
        else:
            summaries.append(CheckpointSummary(t, 0, 0.0, math.nan, math.nan, math.nan,
                                               (math.nan, math.nan, math.nan)))
    return AsymptoticReport(config.describe(), quantity, band, summaries,
                            excluded=sum(k != PathStatus.COMPLETED for k in kinds),
                            overflowed=sum(k == PathStatus.OVERFLOW for k in kinds))


# --- pathwise bounds ---------------------------------------------------------

@dataclass(frozen=True)
class BoundsReport:
    H0: float
    dt: float
    horizon: float
    n_paths: int
    tolerance: float
    sandwich_violations: int
    lower_violations: int
    upper_violations: int
    comparison_violations: int
    exact_lower_violations: int
    h_bound_violations: int
    nonpositive_paths: int
    worst_lower_margin: float
    worst_upper_margin: float
    worst_comparison_margin: float
    worst_h_lower_margin: float
    worst_h_upper_margin: float
    master_seed: int = 0

    @property
    def sandwich_fraction(self) -> float:
        return self.sandwich_violations / self.n_paths

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sandwich_fraction"] = self.sandwich_fraction
        d["comparison_fraction"] = self.comparison_violations / self.n_paths
        d["h_bound_fraction"] = self.h_bound_violations / self.n_paths
        return d


def _path_bounds(params: CosmologyParams, grid: TimeGrid, seed: int, tol: float, eps: float | None):
    driver = generate_wiener(grid, seed)
    z, y = models.coupled_comparison(params, driver, eps)
    t = grid.times
    w = driver.values
    z_lo, z_hi = models.bounds_z(t, w, y, params.z0)
    lower_gap = z - z_lo
    upper_gap = z_hi - z
    comp_gap = z - y
    if np.all(z > 0):
        h = 1.0 / (1.5 * z)
        h_lo, h_hi = models.bounds_H(params, t, w, y)
        h_lo_gap = h - h_lo
        h_hi_gap = h_hi - h
        nonpos = False
    else:
        h_lo_gap = h_hi_gap = np.array([-np.inf])
        nonpos = True
    lo_bad = bool(np.any(lower_gap < -tol))
    hi_bad = bool(np.any(upper_gap < -tol))
    return (
        lo_bad or hi_bad, lo_bad, hi_bad,
        bool(np.any(comp_gap < -tol)),
        bool(np.any(lower_gap < 0.0)),
        bool(np.any(h_lo_gap < -tol) or np.any(h_hi_gap < -tol)),
        nonpos,
        float(lower_gap.min()), float(upper_gap.min()), float(comp_gap.min()),
        float(h_lo_gap.min()), float(h_hi_gap.min()),
    )


def verify_bounds(params: CosmologyParams, grid: TimeGrid, n_paths: int, master_seed: int = 0,
                  tolerance_mult: float = 5.0, *, eps: float | None = None,
                  workers: int | None = None) -> BoundsReport:
    """Audit ``z_- <= z <= z_+``, ``z >= y`` and the H-space bounds on every grid point.

    ``z`` (Ito, ``z = 2x/3``) and the Bessel path ``y`` are Euler solutions
    sharing the Brownian driver; ``z_-`` and ``z_+`` are evaluated from the
    driver and ``y``.  A path counts as a violation if any grid point is off by
    more than ``tolerance_mult * sqrt(dt)``.  The exact lower-bound check
    (``z - z_- = int dt/z``) uses tolerance zero.
    """
    tol = tolerance_mult * math.sqrt(grid.dt)
    warm = TimeGrid(grid.t0, grid.dt, 2)
    rows = map_paths(n_paths, lambda i: _path_bounds(params, grid, derive_seed(master_seed, i), tol, eps),
                     workers, lambda: _path_bounds(params, warm, 0, tol, eps))
    cols = list(zip(*rows))
    return BoundsReport(
        H0=params.H0, dt=grid.dt, horizon=grid.t_end, n_paths=n_paths, tolerance=tol,
        sandwich_violations=sum(cols[0]), lower_violations=sum(cols[1]), upper_violations=sum(cols[2]),
        comparison_violations=sum(cols[3]), exact_lower_violations=sum(cols[4]),
        h_bound_violations=sum(cols[5]), nonpositive_paths=sum(cols[6]),
        worst_lower_margin=min(cols[7]), worst_upper_margin=min(cols[8]),
        worst_comparison_margin=min(cols[9]), worst_h_lower_margin=min(cols[10]),
        worst_h_upper_margin=min(cols[11]), master_seed=master_seed)


# --- convergence -------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceReport:
    model: str
    horizon: float
    x0: float
    n_paths: int
    reference_dt: float
    dt_list: list
    errors: dict
    stderrs: dict
    slopes: dict
    excluded: int
    master_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self):
        for scheme, errs in self.errors.items():
            for dt, e, se in zip(self.dt_list, errs, self.stderrs[scheme]):
                yield scheme, dt, e, se


def _fit_slope(dts, errs) -> float:
    dts = np.asarray(dts, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if np.any(errs <= 0) or not np.all(np.isfinite(errs)):
        return math.nan
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


def convergence_study(model: Sde1D, schemes: Sequence[SolverScheme], dt_list: Sequence[float], n_paths: int,
                      horizon: float, master_seed: int = 0, *, x0: float = 1.0, reference_factor: int = 1024,
                      workers: int | None = None) -> ConvergenceReport:
    """Strong errors ``E|x_dt(T) - x_ref(T)|`` and their log-log slopes.

    The driver is generated at the coarsest step and refined by Brownian
    bridges ``reference_factor`` times; every coarser solution uses a
    subsample of that refined path, and the reference solution uses it whole.
    """
    dts = [float(d) for d in dt_list]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ValueError("dt_list must be strictly decreasing")
    fine_dt = dts[0] / reference_factor
    if fine_dt * 4 > dts[-1] * (1 + 1e-12):
        raise ValueError("reference step must be at least 4x finer than the finest dt")
    strides = []
    for d in dts:
        s = d / fine_dt
        if abs(s - round(s)) > 1e-9 * s:
            raise ValueError(f"dt {d} is not a multiple of the reference step {fine_dt}")
        strides.append(int(round(s)))
    coarse = TimeGrid.from_horizon(horizon, dts[0])
    for sc in schemes:
        if sc.interpretation is not model.interpretation:
            raise ValueError(f"scheme {sc.value} does not match {model.interpretation.value} model")

    def per_path(i):
        drv = refine_bridge(generate_wiener(coarse, derive_seed(master_seed, i)), reference_factor,
                            derive_seed(master_seed, i, 5))
        out = []
        for sc in schemes:
            ref = integrate(model, sc, x0, drv)
            row = [math.nan] * len(strides)
            if ref.status.completed:
                for j, s in enumerate(strides):
                    sol = integrate(model, sc, x0, drv.subsample(s))
                    if sol.status.completed:
                        row[j] = abs(sol.final_value - ref.final_value)
            out.append(row)
        return out

    def warm():
        for sc in schemes:
            integrate(model, sc, x0, generate_wiener(TimeGrid(0.0, fine_dt, 2), 0))

    per = np.array(map_paths(n_paths, per_path, workers, warm), dtype=float)  # paths x schemes x dts
    ok = np.all(np.isfinite(per), axis=(1, 2))
    good = per[ok]
    errors, stderrs, slopes = {}, {}, {}
    for s_i, sc in enumerate(schemes):
        e = good[:, s_i, :]
        mean = np.sum(e, axis=0) / max(len(e), 1)
        se = np.std(e, axis=0, ddof=1) / math.sqrt(len(e)) if len(e) > 1 else np.zeros(len(dts))
        errors[sc.value] = [float(v) for v in mean]
        stderrs[sc.value] = [float(v) for v in se]
        slopes[sc.value] = _fit_slope(dts, mean)
    return ConvergenceReport(model.label, float(horizon), float(x0), n_paths, fine_dt, dts, errors, stderrs,
                             slopes, int(np.count_nonzero(~ok)), master_seed)


# --- conjugation -------------------------------------------------------------

@dataclass(frozen=True)
class ConjugationReport:
    H0: float
    lam: float
    t_trunc: float
    dt: float
    horizon: float
    n_paths: int
    gaps: list
    max_gap: float
    scale: float
    constant: float
    master_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def conjugation_gaps(params: CosmologyParams, ou: OuParams, horizon: float, dt: float, n_paths: int,
                     master_seed: int = 0, *, workers: int | None = None) -> ConjugationReport:
    """Sup-norm gap between the conjugated reconstruction and the explicit solution, per path.

    ``constant`` is the largest gap divided by ``dt + exp(-lam * t_trunc)``.
    """
    def per_path(i):
        two = generate_two_sided(ou.t_trunc, horizon, dt, derive_seed(master_seed, i))
        rec = models.conjugated_solution_cos4(params, ou, two)
        exact = models.strat_x_exact(params, two.positive)
        return float(np.max(np.abs(rec.values - exact.values)))

    def warm():
        two = generate_two_sided(ou.t_trunc, 2 * dt, dt, 0)
        models.conjugated_solution_cos4(params, ou, two)

    gaps = map_paths(n_paths, per_path, workers, warm)
    scale = dt + math.exp(-ou.lam * ou.t_trunc)
    mx = max(gaps)
    return ConjugationReport(params.H0, ou.lam, ou.t_trunc, dt, float(horizon), n_paths, gaps, mx, scale,
                             mx / scale, master_seed)
