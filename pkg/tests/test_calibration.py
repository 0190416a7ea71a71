"""χ² calibration fit: model curve, scale profiling, round trips, estimator."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vacscan.averaging import VelocityDistribution
from vacscan.calibration import (
    CavityVacuumFitter,
    FitConvergenceError,
    FitProblem,
    FitRefusedError,
    fit,
    fit_fixed_scale,
    fit_linear_regime_N,
    model_curve,
    optimal_scale,
    validity_filter,
)
from vacscan.config import DEFAULTS, to_physical_params
from vacscan.kinetics import GainChannel
from vacscan.physics import V_PER_CM, coupling_peak, interaction_time

from test_kinetics import oracle_product_state

U_GRID = np.linspace(0.5, 1.0, 9)
TRUE_N = 1.5
TRUE_E = 0.86  # V/cm
TRUE_SCALE = 270.0  # kcps per unit <n>


@pytest.fixture(scope="module")
def mod_params():
    return to_physical_params(dict(DEFAULTS))


@pytest.fixture(scope="module")
def mod_delta_v():
    return VelocityDistribution.delta(DEFAULTS["velocity_mean_m_per_s"])


# --- model curve -------------------------------------------------------------

def test_model_curve_matches_high_precision_oracle(mod_params, mod_delta_v):
    import dataclasses
    u = 0.7
    tau = interaction_time(mod_delta_v.mean, mod_params)
    trial = dataclasses.replace(mod_params, e_vac0=TRUE_E * V_PER_CM)
    g = coupling_peak(trial) * math.sqrt(u)
    channels = [GainChannel(TRUE_N / tau, g, tau)]
    oracle = oracle_product_state(channels, mod_params.kappa, n_max=40)
    expected = float(np.arange(oracle.size) @ oracle)
    got = model_curve(TRUE_N, TRUE_E, [u], mod_params, mod_delta_v)
    assert got[0] == pytest.approx(expected, rel=1e-10, abs=0)


def test_model_curve_zero_atoms_is_zero(mod_params, mod_delta_v):
    out = model_curve(0.0, TRUE_E, U_GRID, mod_params, mod_delta_v)
    np.testing.assert_array_equal(out, np.zeros_like(U_GRID))


def test_model_curve_rejects_bad_u(mod_params, mod_delta_v):
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        model_curve(1.0, TRUE_E, [1.2], mod_params, mod_delta_v)
    with pytest.raises(ValueError, match="n_atoms"):
        model_curve(-1.0, TRUE_E, [0.5], mod_params, mod_delta_v)


def test_model_curve_monotone_in_field(mod_params, mod_delta_v):
    lo = model_curve(TRUE_N, 0.5, [1.0], mod_params, mod_delta_v)
    hi = model_curve(TRUE_N, 1.5, [1.0], mod_params, mod_delta_v)
    assert hi[0] > lo[0]


# --- filtering and scale -----------------------------------------------------

def test_validity_filter_keeps_boundaries_inclusive():
    u = np.array([0.3, 0.5, 0.7, 1.0])
    y = np.array([1.0, 2.0, 3.0, 4.0])
    fu, fy = validity_filter(u, y, 0.5, 1.0)
    np.testing.assert_array_equal(fu, [0.5, 0.7, 1.0])
    np.testing.assert_array_equal(fy, [2.0, 3.0, 4.0])


def test_validity_filter_refuses_sparse_window():
    u = np.array([0.1, 0.2, 0.6, 0.7])
    y = np.ones(4)
    with pytest.raises(FitRefusedError, match="at least 3"):
        validity_filter(u, y, 0.5, 1.0)


def test_validity_filter_carries_errors():
    u = np.array([0.5, 0.6, 0.7, 0.2])
    y = np.arange(4.0)
    err = np.full(4, 0.1)
    fu, fy, ferr = validity_filter(u, y, 0.5, 1.0, y_err=err)
    assert fu.size == fy.size == ferr.size == 3


def test_optimal_scale_closed_form():
    y = np.array([2.0, 4.0, 6.0])
    n = np.array([1.0, 2.0, 3.0])
    assert optimal_scale(y, n) == pytest.approx(2.0, rel=1e-15)
    with pytest.raises(FitRefusedError, match="all-zero"):
        optimal_scale(y, np.zeros(3))


def test_fit_problem_validation(mod_params, mod_delta_v):
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        FitProblem(u=np.array([0.5, 1.4]), y=np.ones(2), params=mod_params,
                   vdist=mod_delta_v)
    with pytest.raises(ValueError, match="matching"):
        FitProblem(u=np.array([0.5]), y=np.ones(2), params=mod_params,
                   vdist=mod_delta_v)
    with pytest.raises(ValueError, match="n_range"):
        FitProblem(u=U_GRID, y=np.ones(U_GRID.size), params=mod_params,
                   vdist=mod_delta_v, n_range=(0.0, 1.0))


def test_error_hierarchy():
    assert issubclass(FitRefusedError, ValueError)
    assert issubclass(FitConvergenceError, RuntimeError)


# --- round trips -------------------------------------------------------------

def test_full_fit_roundtrip_noiseless(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    problem = FitProblem(u=U_GRID, y=y, params=mod_params, vdist=mod_delta_v)
    result = fit(problem, grid_size=9)
    assert result.n_atoms == pytest.approx(TRUE_N, rel=1e-3)
    assert result.e_vac0 == pytest.approx(TRUE_E, rel=1e-3)
    assert result.scale == pytest.approx(TRUE_SCALE, rel=1e-3)
    assert result.chi2 < 1e-6 * float(y @ y)
    assert result.n_points == U_GRID.size
    assert result.dof == U_GRID.size - 3
    assert not result.edge
    assert not result.poor_fit
    assert not result.held_scale


def test_fixed_scale_roundtrip(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    problem = FitProblem(u=U_GRID, y=y, params=mod_params, vdist=mod_delta_v)
    result = fit_fixed_scale(problem, TRUE_SCALE, grid_size=9)
    assert result.n_atoms == pytest.approx(TRUE_N, rel=1e-3)
    assert result.e_vac0 == pytest.approx(TRUE_E, rel=1e-3)
    assert result.scale == TRUE_SCALE
    assert result.sigma_scale == 0.0
    assert result.held_scale
    assert result.dof == U_GRID.size - 2
    assert "with_scale_uncertainty" not in result.extras


def test_fixed_scale_propagates_scale_uncertainty(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    problem = FitProblem(u=U_GRID, y=y, params=mod_params, vdist=mod_delta_v)
    result = fit_fixed_scale(problem, TRUE_SCALE, scale_sigma=49.0, grid_size=9)
    extra = result.extras["with_scale_uncertainty"]
    # the scale trades against the other two: propagated sigmas must exceed
    # the (essentially zero) noiseless curvature sigmas
    assert extra["sigma_n_atoms"] > result.sigma_n_atoms
    assert extra["sigma_e_vac0_v_per_cm"] > result.sigma_e_vac0
    assert extra["scale_sigma_kcps"] == 49.0


def test_fit_result_to_dict_keys(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    problem = FitProblem(u=U_GRID, y=y, params=mod_params, vdist=mod_delta_v)
    d = fit_fixed_scale(problem, TRUE_SCALE, grid_size=7).to_dict()
    for key in ("n_atoms", "e_vac0_v_per_cm", "scale_kcps", "chi2", "dof",
                "warnings", "edge", "poor_fit", "held_scale"):
        assert key in d


def test_edge_flag_when_truth_outside_range(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    problem = FitProblem(u=U_GRID, y=y, params=mod_params, vdist=mod_delta_v,
                         n_range=(0.01, 1.0))  # truth 1.5 lies above
    result = fit(problem, grid_size=9)
    assert result.edge
    assert any("n_atoms" in w for w in result.warnings)


def test_linear_regime_n_fit(mod_params, mod_delta_v):
    n_true = 0.05
    y = TRUE_SCALE * model_curve(n_true, 0.2, U_GRID, mod_params, mod_delta_v)
    problem = FitProblem(u=U_GRID, y=y, params=mod_params, vdist=mod_delta_v)
    result = fit_linear_regime_N(problem, e_vac0_vcm=0.2, scale_kcps=TRUE_SCALE)
    # the weak-pump law is the first order of the full model; tiny residual
    # curvature is physics, not fit error
    assert result.n_atoms == pytest.approx(n_true, rel=2e-3)
    assert result.n_atoms_numeric == pytest.approx(result.n_atoms, rel=1e-7)
    assert result.n_points == U_GRID.size


# --- scikit-learn estimator --------------------------------------------------

def test_fitter_estimator_roundtrip(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    est = CavityVacuumFitter(params=mod_params, vdist=mod_delta_v)
    assert est.get_params()["u_min"] == 0.5
    est.fit(U_GRID.reshape(-1, 1), y)
    assert est.n_atoms_ == pytest.approx(TRUE_N, rel=1e-3)
    assert est.e_vac0_ == pytest.approx(TRUE_E, rel=1e-3)
    assert est.scale_ == pytest.approx(TRUE_SCALE, rel=1e-3)
    pred = est.predict(U_GRID)
    np.testing.assert_allclose(pred, y, rtol=5e-3)


def test_fitter_fixed_scale_path(mod_params, mod_delta_v):
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params, mod_delta_v)
    est = CavityVacuumFitter(params=mod_params, vdist=mod_delta_v,
                             fixed_scale=TRUE_SCALE)
    est.fit(U_GRID, y)
    assert est.result_.held_scale
    assert est.scale_ == TRUE_SCALE


def test_fitter_requires_context():
    with pytest.raises(ValueError, match="params and vdist"):
        CavityVacuumFitter().fit(U_GRID, np.ones(U_GRID.size))


def test_fitter_predict_before_fit(mod_params, mod_delta_v):
    est = CavityVacuumFitter(params=mod_params, vdist=mod_delta_v)
    with pytest.raises(RuntimeError, match="fit"):
        est.predict(U_GRID)


def test_fitter_rejects_bad_shape(mod_params, mod_delta_v):
    est = CavityVacuumFitter(params=mod_params, vdist=mod_delta_v)
    with pytest.raises(ValueError, match=r"\(n,\)"):
        est.fit(np.zeros((3, 2)), np.zeros(3))


# --- randomized invariants ---------------------------------------------------

@pytest.mark.property
@given(st.lists(st.floats(0.1, 500.0), min_size=3, max_size=12),
       st.lists(st.floats(0.01, 5.0), min_size=3, max_size=12),
       st.floats(0.01, 100.0))
def test_profiled_scale_is_optimal(y_vals, n_vals, s_other):
    m = min(len(y_vals), len(n_vals))
    y = np.array(y_vals[:m])
    n = np.array(n_vals[:m])
    s_star = optimal_scale(y, n)
    r_star = y - s_star * n
    r_other = y - s_other * n
    assert float(r_star @ r_star) <= float(r_other @ r_other) + 1e-9


@pytest.mark.property
@given(st.floats(0.1, 3.0), st.floats(0.3, 2.0), st.floats(0.55, 1.0),
       st.floats(0.1, 20.0), st.lists(st.floats(0.1, 400.0), min_size=4,
                                      max_size=4))
def test_rescaled_data_rescales_only_the_scale(n_trial, e_trial, u_point,
                                               factor, y_vals):
    # χ²(N, E; c·y) = c²·χ²(N, E; y) pointwise once the scale is profiled
    # out, so the (N, E) argmin is unchanged and only 𝒮 picks up the factor
    params = to_physical_params(dict(DEFAULTS))
    delta_v = VelocityDistribution.delta(DEFAULTS["velocity_mean_m_per_s"])
    u = np.array([0.55, 0.7, 0.85, u_point])
    y = np.array(y_vals)
    n_model = model_curve(n_trial, e_trial, u, params, delta_v)
    s1 = optimal_scale(y, n_model)
    s2 = optimal_scale(factor * y, n_model)
    assert s2 == pytest.approx(factor * s1, rel=1e-12, abs=0)
    r1 = y - s1 * n_model
    r2 = factor * y - s2 * n_model
    assert float(r2 @ r2) == pytest.approx(factor**2 * float(r1 @ r1),
                                           rel=1e-9, abs=1e-12)


def test_rescaled_data_end_to_end(mod_params, mod_delta_v):
    # the full pipeline version of the scaling law, run once at a fixed factor
    rng = np.random.Generator(np.random.Philox(20260822))
    y = TRUE_SCALE * model_curve(TRUE_N, TRUE_E, U_GRID, mod_params,
                                 mod_delta_v)
    y_noisy = y * (1.0 + 0.01 * rng.standard_normal(y.size))
    factor = 3.7
    base = fit(FitProblem(u=U_GRID, y=y_noisy, params=mod_params,
                          vdist=mod_delta_v), grid_size=9)
    scaled = fit(FitProblem(u=U_GRID, y=factor * y_noisy, params=mod_params,
                            vdist=mod_delta_v), grid_size=9)
    assert scaled.n_atoms == pytest.approx(base.n_atoms, rel=1e-4)
    assert scaled.e_vac0 == pytest.approx(base.e_vac0, rel=1e-4)
    assert scaled.scale == pytest.approx(factor * base.scale, rel=1e-4)


@pytest.mark.property
@given(st.floats(0.05, 5.0), st.floats(0.5, 1.0))
def test_strong_coupling_warning_tracks_threshold(e_trial, u_min):
    from dataclasses import replace
    from vacscan.calibration import _strong_coupling_warning
    params = to_physical_params(dict(DEFAULTS))
    trial = replace(params, e_vac0=e_trial * V_PER_CM)
    g_min = coupling_peak(trial) * math.sqrt(u_min)
    warned = _strong_coupling_warning(np.array([u_min, 1.0]), e_trial, params)
    should_warn = g_min <= max(params.kappa, params.gamma)
    assert bool(warned) == should_warn


@pytest.mark.property
@given(st.floats(0.3, 3.0), st.floats(0.4, 1.6), st.floats(10.0, 1000.0))
def test_noiseless_identifiability(n_true, e_true, s_true):
    # exact model data pins all three parameters (coarse grid + refinement)
    params = to_physical_params(dict(DEFAULTS))
    delta_v = VelocityDistribution.delta(DEFAULTS["velocity_mean_m_per_s"])
    u = np.linspace(0.5, 1.0, 5)
    y = s_true * model_curve(n_true, e_true, u, params, delta_v)
    problem = FitProblem(u=u, y=y, params=params, vdist=delta_v,
                         n_range=(0.05, 10.0), e_range=(0.2, 5.0))
    result = fit(problem, grid_size=7)
    assert result.n_atoms == pytest.approx(n_true, rel=1e-2)
    assert result.e_vac0 == pytest.approx(e_true, rel=1e-2)
    assert result.scale == pytest.approx(s_true, rel=1e-2)
