import math

import numpy as np
import pytest

from hubblesde.ensemble import (EnsembleConfig, EnsembleStats, asymptotic_slope, conjugation_gaps,
                                convergence_study, estimate_blowup_fraction, map_paths, run_ensemble,
                                simulate_path, strat_x_stopped, verify_bounds, wilson_interval)
from hubblesde.models import CosmologyParams, OuParams, ito_x_sde, stratonovich_x_sde
from hubblesde.passage import Barrier
from hubblesde.paths import TimeGrid, derive_seed
from hubblesde.sde import PathStatus, SolverScheme, scale_noise

EM, MIL = SolverScheme.EULER_MARUYAMA, SolverScheme.MILSTEIN


def test_zero_noise_ensemble():
    cfg = EnsembleConfig("ito-H", TimeGrid.from_horizon(1.0, 1e-3), 50, noise_scale=0.0)
    st = run_ensemble(cfg, lambda s: s.final_value, workers=1)
    ref = run_ensemble(EnsembleConfig("det", cfg.grid, 1), lambda s: s.final_value, workers=1).mean
    assert st.variance == 0.0
    assert st.mean == pytest.approx(ref, abs=1e-3)


def test_constant_functional():
    st = run_ensemble(EnsembleConfig("ito-x", TimeGrid(0.0, 0.1, 5), 40), lambda s: 1.0, workers=1)
    assert st.mean == 1.0 and st.stderr == 0.0 and st.n == 40


def test_additive_model_moments():
    cfg = EnsembleConfig("strat-x-exact", TimeGrid.from_horizon(1.0, 0.01), 10_000, master_seed=3)
    st = run_ensemble(cfg, lambda s: s.final_value - 1.0 - 1.0, workers=1)
    assert abs(st.mean) < 3 * st.stderr
    assert abs(st.variance / 2.25 - 1) < 0.05


def test_excluded_paths_are_counted():
    st = EnsembleStats.from_values([1.0, None, float("nan"), 3.0])
    assert st.n == 2 and st.excluded == 2 and st.mean == 2.0


def test_scheme_model_mismatch():
    with pytest.raises(ValueError):
        EnsembleConfig("strat-H", TimeGrid(0.0, 0.1, 2), 1, scheme=EM)
    with pytest.raises(ValueError):
        EnsembleConfig("nope", TimeGrid(0.0, 0.1, 2), 1)


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and 0 < hi < 0.05
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)


def test_map_paths_order_and_workers():
    f = lambda i: (i, derive_seed(7, i) % 1000)  # noqa: E731
    serial = map_paths(700, f, workers=1)
    assert serial == [f(i) for i in range(700)]
    assert map_paths(700, f, workers=3) == serial


def test_reports_identical_across_workers():
    params = CosmologyParams(1.0)
    a = estimate_blowup_fraction(params, 5.0, 0.01, 600, 2, workers=1)
    b = estimate_blowup_fraction(params, 5.0, 0.01, 600, 2, workers=4)
    assert a == b
    g = TimeGrid.from_horizon(0.2, 1e-3)
    assert verify_bounds(params, g, 300, 1, workers=1) == verify_bounds(params, g, 300, 1, workers=3)


def test_stopped_matches_exact_until_hit():
    params = CosmologyParams(1.0)
    grid = TimeGrid.from_horizon(20.0, 0.01)
    for i in range(30):
        free = simulate_path(EnsembleConfig("strat-x-exact", grid, 1, master_seed=i), 0)
        stop = strat_x_stopped(params, grid, derive_seed(i, 0), derive_seed(i, 0, 1), Barrier(0.0), True, chunk=97)
        n = stop.values.size
        assert np.array_equal(stop.values, free.values[:n])
        if stop.status.completed:
            assert n == free.values.size
        else:
            assert stop.status.kind == PathStatus.BARRIER and stop.status.time == grid.time(n - 1)


def test_tiny_H0_never_blows_up():
    est = estimate_blowup_fraction(CosmologyParams(1e-3), 10.0, 0.01, 10_000, workers=1)
    assert est.hits == 0 and est.analytic_infinite == 0.0


def test_blowup_monotone_in_horizon():
    params = CosmologyParams(1.0)
    fr = [estimate_blowup_fraction(params, T, 0.01, 2000, 5, workers=1).hits for T in (1.0, 5.0, 20.0)]
    assert fr[0] <= fr[1] <= fr[2]


def test_blowup_analytic_field():
    est = estimate_blowup_fraction(CosmologyParams(1.0), 1.0, 0.01, 10, workers=1)
    assert est.analytic_infinite == pytest.approx(math.exp(-8 / 9), rel=1e-15)


@pytest.mark.slow
def test_wilson_coverage_over_seeds():
    params = CosmologyParams(1.0)
    covered = 0
    for seed in range(100):
        est = estimate_blowup_fraction(params, 2.0, 0.01, 10_000, 1000 + seed, workers=1)
        covered += est.ci95[0] <= est.analytic_truncated <= est.ci95[1]
    # time discretisation bias at dt = 0.01 is well inside one stderr at this horizon
    assert covered >= 93


def test_strat_asymptotics_conditioned_on_survival():
    cfg = EnsembleConfig("strat-x-exact", TimeGrid.from_horizon(1e4, 1.0), 1000, 4, barrier=Barrier(0.0))
    rep = asymptotic_slope(cfg, [1e4], workers=1)
    assert 0.5 < rep.final.alive_fraction < 0.7
    assert rep.final.within_band >= 0.99
    assert rep.excluded == 1000 - rep.final.n_alive


def test_verify_bounds_zero_noise_counts():
    rep = verify_bounds(CosmologyParams(1.0), TimeGrid.from_horizon(1.0, 1e-3), 50, 0, workers=1)
    assert rep.exact_lower_violations == 0
    assert rep.sandwich_fraction <= 0.01


def test_convergence_additive_exact():
    rep = convergence_study(stratonovich_x_sde(), [EM], [0.1, 0.05, 0.025], 20, 1.0, x0=1.0,
                            reference_factor=16, workers=1)
    assert max(rep.errors[EM.value]) < 1e-12


def test_convergence_milstein_equals_em_constant_noise():
    rep = convergence_study(ito_x_sde(), [EM, MIL], [0.1, 0.05], 20, 1.0, x0=1.0, reference_factor=32, workers=1)
    assert rep.errors[EM.value] == rep.errors[MIL.value]


def test_convergence_rejects_coarse_reference():
    with pytest.raises(ValueError):
        convergence_study(ito_x_sde(), [EM], [0.1, 0.05], 5, 1.0, reference_factor=4, workers=1)


def test_conjugation_report():
    rep = conjugation_gaps(CosmologyParams(1.0), OuParams(1.0, 40.0), 2.0, 1e-3, 5, workers=1)
    assert rep.max_gap == max(rep.gaps) and rep.constant <= 10


def test_noise_scale_zero_is_deterministic():
    cfg = EnsembleConfig(scale_noise(ito_x_sde(), 0.0), TimeGrid(0.0, 0.1, 10), 3)
    vals = [simulate_path(cfg, i).final_value for i in range(3)]
    assert vals[0] == vals[1] == vals[2]


def test_bridge_correction_raises_estimate():
    params = CosmologyParams(1.0)
    on = estimate_blowup_fraction(params, 20.0, 0.1, 5000, 6, bridge=True, workers=1)
    off = estimate_blowup_fraction(params, 20.0, 0.1, 5000, 6, bridge=False, workers=1)
    assert off.hits < on.hits
    assert on.bridge_hits > 0 and off.bridge_hits == 0
