import math

import numba as nb
import numpy as np
import pytest

from hubblesde import models
from hubblesde.passage import Barrier, detect_first_passage
from hubblesde.paths import TimeGrid, derive_seed, generate_wiener, make_rng
from hubblesde.sde import (Interpretation, PathStatus, SchemeMismatchError, Sde1D, SolverScheme,
                           convert_interpretation, integrate, scale_noise, step)

EM, MIL, HEUN = SolverScheme.EULER_MARUYAMA, SolverScheme.MILSTEIN, SolverScheme.STRATONOVICH_HEUN


@nb.njit
def _decay(t, x):
    return -x


@nb.njit
def _nil(t, x):
    return 0.0


def _decay_sde():
    return Sde1D(_decay, _nil, _nil, Interpretation.ITO, "decay")


def test_strat_hubble_to_ito_drift():
    ito = convert_interpretation(models.stratonovich_hubble_sde(), Interpretation.ITO)
    assert ito.interpretation is Interpretation.ITO
    for h in (0.5, 1.0, 2.0):
        assert ito.drift(0.0, h) == pytest.approx(-h * h + 2.25 * h**3, rel=1e-15)
    assert ito.drift(0.0, 1.0) == 1.25


def test_round_trip_recovers_drift():
    b = models.bessel3_sde()
    back = convert_interpretation(convert_interpretation(b, Interpretation.STRATONOVICH), Interpretation.ITO)
    for y in (0.5, 1.0, 2.0):
        assert abs(back.drift(0.0, y) - 1.0 / y) < 1e-12


def test_convert_to_same_interpretation_is_identity():
    m = models.ito_x_sde()
    assert convert_interpretation(m, Interpretation.ITO) is m


def test_python_callables_are_accepted():
    m = Sde1D(lambda t, x: -x * x, lambda t, x: -1.5 * x * x, lambda t, x: -3 * x, Interpretation.STRATONOVICH)
    ito = convert_interpretation(m, Interpretation.ITO)
    assert not ito.compiled
    assert ito.drift(0.0, 1.0) == 1.25


def test_deterministic_step_is_forward_euler():
    m = _decay_sde()
    assert step(m, EM, 0.0, 2.0, 0.0, 0.1) == pytest.approx(1.8)
    assert step(m, MIL, 0.0, 2.0, 0.0, 0.1) == pytest.approx(1.8)


@pytest.mark.parametrize("scheme", [EM, MIL, HEUN])
def test_additive_step_same_for_all_schemes(scheme):
    m = models.stratonovich_x_sde()
    if scheme is HEUN:
        m = convert_interpretation(m, Interpretation.STRATONOVICH)
    assert step(m, scheme, 0.0, 2.0, 0.3, 0.1) == pytest.approx(2.55, abs=1e-15)


def test_ito_x_step():
    assert step(models.ito_x_sde(), EM, 0.0, 1.0, 0.0, 0.01) == pytest.approx(1.0325, abs=1e-15)


def test_scheme_mismatch_rejected():
    with pytest.raises(SchemeMismatchError):
        step(models.stratonovich_hubble_sde(), EM, 0.0, 1.0, 0.0, 0.1)
    with pytest.raises(SchemeMismatchError):
        integrate(models.ito_hubble_sde(), HEUN, 1.0, generate_wiener(TimeGrid(0, 0.1, 3), 0))


def test_decay_ode():
    sol = integrate(_decay_sde(), EM, 1.0, generate_wiener(TimeGrid.from_horizon(1.0, 1e-3), 0))
    assert abs(sol.final_value - math.exp(-1)) < 1e-3
    assert sol.status.completed


def test_additive_model_is_exact():
    params = models.CosmologyParams(1.0)
    drv = generate_wiener(TimeGrid.from_horizon(10.0, 1e-3), 8)
    sol = integrate(models.stratonovich_x_sde(), EM, params.x0, drv)
    exact = drv.times + 1.5 * drv.values + params.x0
    assert np.max(np.abs(sol.values - exact)) <= 1e-12 * np.max(np.abs(exact))
    assert np.array_equal(sol.values, models.strat_x_exact(params, drv).values) or \
        np.allclose(sol.values, exact, rtol=1e-12, atol=1e-12)


def test_milstein_equals_em_for_constant_noise():
    drv = generate_wiener(TimeGrid.from_horizon(1.0, 1e-3), 4)
    a = integrate(models.ito_x_sde(), EM, 1.0, drv)
    b = integrate(models.ito_x_sde(), MIL, 1.0, drv)
    assert np.array_equal(a.values, b.values)


def test_overflow_status():
    sde = models.ito_hubble_sde()
    sol = integrate(scale_noise(sde, 0.0), EM, 1.0, generate_wiener(TimeGrid.from_horizon(1.0, 0.1), 0))
    assert sol.status.completed
    blow = Sde1D(lambda t, x: x * x, lambda t, x: 0.0, None, Interpretation.ITO)
    sol = integrate(blow, EM, 1.0, generate_wiener(TimeGrid.from_horizon(5.0, 0.1), 0))
    assert sol.status.kind == PathStatus.OVERFLOW
    assert np.all(np.isfinite(sol.values))


def test_barrier_needs_rng_when_bridging():
    drv = generate_wiener(TimeGrid(0, 0.1, 3), 0)
    with pytest.raises(ValueError):
        integrate(models.ito_x_sde(), EM, 1.0, drv, Barrier(0.0))


def test_detect_matches_integrate():
    params = models.CosmologyParams(1.0)
    grid = TimeGrid.from_horizon(5.0, 0.01)
    sde = models.stratonovich_x_sde()
    for i in range(200):
        drv = generate_wiener(grid, derive_seed(3, i))
        stopped = integrate(sde, EM, params.x0, drv, Barrier(0.0), make_rng(derive_seed(4, i)))
        free = integrate(sde, EM, params.x0, drv)
        found = detect_first_passage(free, Barrier(0.0), lambda t, x: 1.5, make_rng(derive_seed(4, i)))
        assert found.hit == (stopped.status.kind == PathStatus.BARRIER)
        if found.hit:
            assert found.time == stopped.status.time
            assert found.bridge_detected == stopped.status.bridge_detected


def test_csv_and_json_dump(tmp_path):
    sol = integrate(models.ito_x_sde(), EM, 1.0, generate_wiener(TimeGrid(0.0, 0.1, 3), 0))
    sol.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,x" and lines[-1] == "# status=Completed" and len(lines) == 6
    assert '"status"' in sol.to_json()


def _strong_errors(sde, scheme, x0, n_paths=300, horizon=1.0):
    from hubblesde.paths import refine_bridge
    dts = [2.0**-k for k in range(4, 9)]
    errs = np.zeros(len(dts))
    for i in range(n_paths):
        coarse = generate_wiener(TimeGrid.from_horizon(horizon, dts[0]), derive_seed(1, i))
        fine = refine_bridge(coarse, 256, derive_seed(2, i))
        ref = integrate(sde, scheme, x0, fine).final_value
        for j, d in enumerate(dts):
            errs[j] += abs(integrate(sde, scheme, x0, fine.subsample(int(round(d / fine.grid.dt)))).final_value - ref)
    return dts, errs / n_paths


def test_strong_order_multiplicative_noise():
    # geometric BM: dX = 0.5 X dt + 0.8 X dW
    gbm = Sde1D(nb.njit(lambda t, x: 0.5 * x), nb.njit(lambda t, x: 0.8 * x), nb.njit(lambda t, x: 0.8),
                Interpretation.ITO, "gbm")
    dts, e_em = _strong_errors(gbm, EM, 1.0)
    _, e_mil = _strong_errors(gbm, MIL, 1.0)
    s_em = np.polyfit(np.log(dts), np.log(e_em), 1)[0]
    s_mil = np.polyfit(np.log(dts), np.log(e_mil), 1)[0]
    assert 0.35 < s_em < 0.7
    assert 0.85 < s_mil < 1.2


def test_heun_converges_to_stratonovich_solution():
    # Stratonovich dX = 0.8 X o dW has X = exp(0.8 W)
    gbm = Sde1D(nb.njit(lambda t, x: 0.0), nb.njit(lambda t, x: 0.8 * x), nb.njit(lambda t, x: 0.8),
                Interpretation.STRATONOVICH, "sgbm")
    drv = generate_wiener(TimeGrid.from_horizon(1.0, 1e-4), 12)
    sol = integrate(gbm, HEUN, 1.0, drv)
    assert sol.final_value == pytest.approx(math.exp(0.8 * drv.values[-1]), rel=1e-3)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="Euler overshoot plus a driftless bridge test flags spurious zero hits "
                                        "near x0 = 1e-3; see README, known limitations")
def test_ito_positivity_from_near_zero():
    sde = models.ito_x_sde()
    grid = TimeGrid.from_horizon(1.0, 1e-5)
    positive = 0
    for i in range(1000):
        sol = integrate(sde, EM, 1e-3, generate_wiener(grid, derive_seed(21, i)), Barrier(0.0),
                        make_rng(derive_seed(21, i, 1)))
        positive += sol.status.completed
    assert positive >= 990
