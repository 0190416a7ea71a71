"""Recovery of (⟨N⟩, E_vac(0), scale) from deconvolved scan data by χ² fit.

The model curve is the velocity-averaged steady-state ⟨n⟩ at relative
intensity u (no position-spread kernel — the data are already deconvolved),
scaled by a detector factor that is linear in the model and therefore
eliminated analytically at every step of the (⟨N⟩, E) search.

Units at this boundary: count rates y and the detector scale are in kcps
(scale = kcps per unit ⟨n⟩); vacuum-field amplitudes in V/cm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from sklearn.base import BaseEstimator

from .averaging import VelocityDistribution
from .kinetics import (
    DEFAULT_TRUNCATION_TOL,
    GainChannel,
    N_MAX_DEFAULT,
    TruncationError,
    mean_photon,
    steady_state_product_channels,
)
from .physics import PhysicalParams, V_PER_CM, coupling_peak, interaction_time
from .validation import as_float_array

DEFAULT_N_RANGE = (0.01, 10.0)
DEFAULT_E_RANGE = (0.1, 10.0)  # V/cm
DEFAULT_GRID = 21
#: Fraction (of data RMS) the residual scatter may reach before a fit
#: with no per-point errors is flagged as poor.
POOR_FIT_RESIDUAL_FRACTION = 0.1


class FitRefusedError(ValueError):
    """Too few valid points (or a degenerate model) to attempt the fit."""


class FitConvergenceError(RuntimeError):
    """The simplex refinement did not converge within its evaluation budget."""


@dataclass(frozen=True, eq=False)
class FitProblem:
    """Data and fixed context for the calibration fit.

    u, y: relative intensity and count rate (kcps) per point; y_err optional
    per-point 1σ (kcps) — used only for the weighted misfit diagnostic.
    params supplies the fixed geometry (its e_vac0 is overridden by the trial
    value during fitting); vdist the velocity ensemble.
    """

    u: np.ndarray
    y: np.ndarray
    params: PhysicalParams
    vdist: VelocityDistribution
    u_min: float = 0.5
    u_max: float = 1.0
    n_range: tuple = DEFAULT_N_RANGE
    e_range: tuple = DEFAULT_E_RANGE
    y_err: np.ndarray | None = None
    n_max: int = N_MAX_DEFAULT

    def __post_init__(self):
        u = as_float_array(self.u, "u")
        y = as_float_array(self.y, "y")
        if u.shape != y.shape or u.size == 0:
            raise ValueError("u and y must be matching nonempty arrays")
        if u.min() < 0 or u.max() > 1:
            raise ValueError("u values must lie in [0, 1]")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        if self.y_err is not None:
            err = as_float_array(self.y_err, "y_err", nonneg=True)
            if err.shape != u.shape:
                raise ValueError("y_err must match u in shape")
            object.__setattr__(self, "y_err", err)
        for name, rng in (("n_range", self.n_range), ("e_range", self.e_range)):
            lo, hi = rng
            if not (0 < lo < hi):
                raise ValueError(f"{name} must satisfy 0 < lo < hi, got {rng!r}")


@dataclass(frozen=True)
class FitResult:
    """Fitted parameters with 1σ uncertainties (same units as the inputs:
    ⟨N⟩ dimensionless, E_vac0 in V/cm, scale in kcps per unit ⟨n⟩)."""

    n_atoms: float
    e_vac0: float
    scale: float
    sigma_n_atoms: float
    sigma_e_vac0: float
    sigma_scale: float
    chi2: float
    n_points: int
    dof: int
    warnings: tuple = ()
    edge: bool = False
    poor_fit: bool = False
    held_scale: bool = False
    extras: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        out = {
            "n_atoms": self.n_atoms, "sigma_n_atoms": self.sigma_n_atoms,
            "e_vac0_v_per_cm": self.e_vac0, "sigma_e_vac0_v_per_cm": self.sigma_e_vac0,
            "scale_kcps": self.scale, "sigma_scale_kcps": self.sigma_scale,
            "chi2": self.chi2, "n_points": self.n_points, "dof": self.dof,
            "warnings": list(self.warnings), "edge": self.edge,
            "poor_fit": self.poor_fit, "held_scale": self.held_scale,
        }
        out.update(self.extras)
        return out


def validity_filter(u, y, u_min=0.5, u_max=1.0, y_err=None):
    """Keep points with u ∈ [u_min, u_max] (boundaries inclusive).

    Raises FitRefusedError when fewer than 3 points survive — too few for
    the 3-parameter fit.
    """
    u = as_float_array(u, "u")
    y = as_float_array(y, "y")
    keep = (u >= u_min) & (u <= u_max)
    if keep.sum() < 3:
        raise FitRefusedError(
            f"only {int(keep.sum())} points inside u ∈ [{u_min:g}, {u_max:g}]; "
            "at least 3 are required")
    if y_err is not None:
        return u[keep], y[keep], as_float_array(y_err, "y_err")[keep]
    return u[keep], y[keep]


def _velocity_nodes(params: PhysicalParams, vdist: VelocityDistribution):
    velocities, weights = vdist.quadrature()
    taus = np.array([interaction_time(v, params) for v in velocities])
    return weights, taus


def model_curve(n_atoms, e_vac0_vcm, u_values, params: PhysicalParams,
                vdist: VelocityDistribution, n_max=N_MAX_DEFAULT,
                truncation_tol=DEFAULT_TRUNCATION_TOL):
    """Velocity-averaged steady-state ⟨n⟩ at each u, for trial (⟨N⟩, E).

    The trial field (V/cm) rescales the coupling to g = g₀·√u; each u is
    solved through the averaged-gain product steady state.  No position
    kernel is applied — deconvolved data enter here.
    """
    u = np.atleast_1d(as_float_array(u_values, "u_values"))
    if u.min() < 0 or u.max() > 1:
        raise ValueError("u values must lie in [0, 1]")
    if n_atoms < 0:
        raise ValueError("n_atoms must be >= 0")
    if n_atoms == 0:
        return np.zeros_like(u)
    params_trial = replace(params, e_vac0=float(e_vac0_vcm) * V_PER_CM)
    g0 = coupling_peak(params_trial)
    weights, taus = _velocity_nodes(params, vdist)
    rates = weights * n_atoms / taus
    out = np.empty_like(u)
    for i, ui in enumerate(u):
        g = g0 * math.sqrt(ui)
        channels = [GainChannel(r, g, t) for r, t in zip(rates, taus)]
        dist = steady_state_product_channels(channels, params.kappa, n_max,
                                             truncation_tol)
        if dist.flagged:
            raise TruncationError(
                f"model ⟨n⟩ at u={ui:g} (⟨N⟩={n_atoms:g}, E={e_vac0_vcm:g} V/cm) "
                f"not representable below the Fock cap")
        out[i] = mean_photon(dist)
    return out


def optimal_scale(y, n) -> float:
    """Closed-form scale minimizing Σ(y − s·n)²: s* = Σy·n / Σn²."""
    y = as_float_array(y, "y")
    n = as_float_array(n, "n")
    denom = float(n @ n)
    if denom == 0.0:
        raise FitRefusedError("all-zero model curve: scale is undefined")
    return float(y @ n) / denom


def _chi2(y, model, scale):
    r = y - scale * model
    return float(r @ r)


def _fd_hessian(fun, theta, rel_step=1e-4):
    """Central finite-difference Hessian of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    h = rel_step * np.maximum(np.abs(theta), 1e-12)
    hess = np.empty((k, k))
    f0 = fun(theta)
    for i in range(k):
        ei = np.zeros(k); ei[i] = h[i]
        fp = fun(theta + ei)
        fm = fun(theta - ei)
        hess[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
        for j in range(i + 1, k):
            ej = np.zeros(k); ej[j] = h[j]
            fpp = fun(theta + ei + ej)
            fpm = fun(theta + ei - ej)
            fmp = fun(theta - ei + ej)
            fmm = fun(theta - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return hess


def _sigma_from_hessian(hess, s2):
    """1σ from the χ² curvature: covariance = 2·s²·H⁻¹ (Δχ² = s² contour)."""
    try:
        cov = 2.0 * s2 * np.linalg.inv(hess)
        sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        sig = np.full(hess.shape[0], np.nan)
    return sig


def _misfit_flags(y, model, scale, y_err, dof):
    """(poor_fit, warnings) — scatter diagnostic after the fit."""
    resid = y - scale * model
    warns = []
    poor = False
    if y_err is not None and np.all(y_err > 0) and dof > 0:
        chi2_w = float(np.sum((resid / y_err) ** 2)) / dof
        if chi2_w > 10.0:
            poor = True
            warns.append(f"poor fit: weighted chi2/dof = {chi2_w:.3g}")
    else:
        rms_y = math.sqrt(float(y @ y) / y.size)
        rms_r = math.sqrt(float(resid @ resid) / max(dof, 1))
        if rms_y > 0 and rms_r / rms_y > POOR_FIT_RESIDUAL_FRACTION:
            poor = True
            warns.append(
                f"poor fit: residual scatter is {rms_r / rms_y:.2g} of the "
                "data scale")
    return poor, warns


def _strong_coupling_warning(u, e_vac0_vcm, params):
    trial = replace(params, e_vac0=e_vac0_vcm * V_PER_CM)
    g0 = coupling_peak(trial)
    threshold = max(params.kappa, params.gamma)
    g_min = g0 * math.sqrt(float(np.min(u)))
    if g_min <= threshold:
        return (f"strong-coupling check: g(u) = {g_min:.3g} rad/s at the weakest "
                f"point does not exceed max(κ, γ) = {threshold:.3g} rad/s for the "
                "fitted field; the dissipation-free model is marginal there",)
    return ()


def _refine(chi2_of, start, spacings, grid_best):
    """Nelder-Mead in log space with an explicit, well-scaled simplex.

    The default simplex scales with the coordinate values, which collapses
    near lnθ ≈ 0; instead the first round opens at half a grid spacing and
    a second, tighter round restarts from the found point to guard against
    premature contraction.
    """
    x0 = np.asarray(start, dtype=float)
    best_f, best_x = grid_best, x0
    res = None
    for step in (0.5 * np.asarray(spacings), 1e-3 * np.ones_like(x0)):
        simplex = np.vstack([x0, x0 + np.diag(step)])
        res = minimize(chi2_of, x0, method="Nelder-Mead",
                       options={"xatol": 1e-6,
                                "fatol": 1e-10 * (1.0 + grid_best),
                                "maxfev": 4000, "maxiter": 4000,
                                "initial_simplex": simplex})
        if not res.success:
            raise FitConvergenceError(f"simplex refinement failed: {res.message}")
        if res.fun < best_f:
            best_f, best_x = res.fun, np.asarray(res.x, dtype=float)
        x0 = np.asarray(res.x, dtype=float)
    res.x = best_x
    res.fun = best_f
    return res


def _edge_flags(theta_log, bounds_log, names, tol=1e-4):
    flags = []
    for value, (lo, hi), name in zip(theta_log, bounds_log, names):
        if value - lo < tol or hi - value < tol:
            flags.append(f"edge: {name} at search-range boundary")
    return flags


def fit(problem: FitProblem, grid_size=DEFAULT_GRID) -> FitResult:
    """Full 3-parameter fit: coarse log grid over (⟨N⟩, E), simplex
    refinement, analytic scale at every evaluation, curvature uncertainties.
    """
    filtered = validity_filter(problem.u, problem.y, problem.u_min,
                               problem.u_max, problem.y_err)
    u, y = filtered[0], filtered[1]
    y_err = filtered[2] if problem.y_err is not None else None

    def curve(n_atoms, e_vcm):
        return model_curve(n_atoms, e_vcm, u, problem.params, problem.vdist,
                           problem.n_max)

    def chi2_of(theta_log):
        n_atoms, e_vcm = np.exp(theta_log)
        try:
            model = curve(n_atoms, e_vcm)
            scale = optimal_scale(y, model)
        except (TruncationError, FitRefusedError):
            return np.inf
        return _chi2(y, model, scale)

    log_n = np.log(np.array(problem.n_range))
    log_e = np.log(np.array(problem.e_range))
    grid_n = np.linspace(log_n[0], log_n[1], grid_size)
    grid_e = np.linspace(log_e[0], log_e[1], grid_size)
    best = (np.inf, None)
    for ln in grid_n:
        for le in grid_e:
            val = chi2_of((ln, le))
            if val < best[0]:
                best = (val, (ln, le))
    if best[1] is None or not np.isfinite(best[0]):
        raise FitRefusedError("no representable model on the search grid")

    spacings = ((log_n[1] - log_n[0]) / (grid_size - 1),
                (log_e[1] - log_e[0]) / (grid_size - 1))
    res = _refine(chi2_of, np.array(best[1]), spacings, best[0])
    n_fit, e_fit = np.exp(res.x)
    model = curve(n_fit, e_fit)
    scale = optimal_scale(y, model)
    chi2_min = _chi2(y, model, scale)

    m = u.size
    dof = m - 3
    s2 = chi2_min / dof if dof > 0 else 0.0

    def chi2_full(theta):
        n_atoms, e_vcm, s = theta
        if n_atoms <= 0 or e_vcm <= 0:
            return np.inf
        try:
            return _chi2(y, curve(n_atoms, e_vcm), s)
        except TruncationError:
            return np.inf

    hess = _fd_hessian(chi2_full, np.array([n_fit, e_fit, scale]))
    sig = _sigma_from_hessian(hess, s2)

    warns = list(_edge_flags(res.x, (log_n, log_e), ("n_atoms", "e_vac0")))
    edge = bool(warns)
    poor, poor_warns = _misfit_flags(y, model, scale, y_err, dof)
    warns += poor_warns
    warns += _strong_coupling_warning(u, e_fit, problem.params)
    if dof <= 0:
        warns.append("zero degrees of freedom: uncertainties are nominal")

    return FitResult(
        n_atoms=float(n_fit), e_vac0=float(e_fit), scale=float(scale),
        sigma_n_atoms=float(sig[0]), sigma_e_vac0=float(sig[1]),
        sigma_scale=float(sig[2]), chi2=chi2_min, n_points=m, dof=dof,
        warnings=tuple(warns), edge=edge, poor_fit=poor)


def fit_fixed_scale(problem: FitProblem, scale_fixed, scale_sigma=0.0,
                    grid_size=DEFAULT_GRID) -> FitResult:
    """2-parameter fit with the detector scale held at ``scale_fixed`` (kcps).

    The held scale's uncertainty is reported as 0.  If ``scale_sigma`` > 0,
    its propagated effect on (⟨N⟩, E) is additionally reported in
    ``extras["with_scale_uncertainty"]`` (both conventions available).
    """
    if scale_fixed <= 0:
        raise ValueError("scale_fixed must be > 0")
    filtered = validity_filter(problem.u, problem.y, problem.u_min,
                               problem.u_max, problem.y_err)
    u, y = filtered[0], filtered[1]
    y_err = filtered[2] if problem.y_err is not None else None

    def curve(n_atoms, e_vcm):
        return model_curve(n_atoms, e_vcm, u, problem.params, problem.vdist,
                           problem.n_max)

    def argmin_for_scale(s_value):
        def chi2_of(theta_log):
            n_atoms, e_vcm = np.exp(theta_log)
            try:
                return _chi2(y, curve(n_atoms, e_vcm), s_value)
            except (TruncationError, FitRefusedError):
                return np.inf

        log_n = np.log(np.array(problem.n_range))
        log_e = np.log(np.array(problem.e_range))
        best = (np.inf, None)
        for ln in np.linspace(log_n[0], log_n[1], grid_size):
            for le in np.linspace(log_e[0], log_e[1], grid_size):
                val = chi2_of((ln, le))
                if val < best[0]:
                    best = (val, (ln, le))
        if best[1] is None or not np.isfinite(best[0]):
            raise FitRefusedError("no representable model on the search grid")
        spacings = ((log_n[1] - log_n[0]) / (grid_size - 1),
                    (log_e[1] - log_e[0]) / (grid_size - 1))
        res = _refine(chi2_of, np.array(best[1]), spacings, best[0])
        return res, (log_n, log_e)

    res, bounds_log = argmin_for_scale(scale_fixed)
    n_fit, e_fit = np.exp(res.x)
    model = curve(n_fit, e_fit)
    chi2_min = _chi2(y, model, scale_fixed)
    m = u.size
    dof = m - 2
    s2 = chi2_min / dof if dof > 0 else 0.0

    def chi2_full(theta):
        n_atoms, e_vcm = theta
        if n_atoms <= 0 or e_vcm <= 0:
            return np.inf
        try:
            return _chi2(y, curve(n_atoms, e_vcm), scale_fixed)
        except TruncationError:
            return np.inf

    hess = _fd_hessian(chi2_full, np.array([n_fit, e_fit]))
    sig = _sigma_from_hessian(hess, s2)

    warns = list(_edge_flags(res.x, bounds_log, ("n_atoms", "e_vac0")))
    edge = bool(warns)
    poor, poor_warns = _misfit_flags(y, model, scale_fixed, y_err, dof)
    warns += poor_warns
    warns += _strong_coupling_warning(u, e_fit, problem.params)

    extras = {}
    if scale_sigma > 0:
        # finite-difference sensitivity of the 2-parameter argmin to the
        # held scale, then add the scale's contribution in quadrature
        delta = 1e-3 * scale_fixed
        up, _ = argmin_for_scale(scale_fixed + delta)
        dn, _ = argmin_for_scale(scale_fixed - delta)
        dtheta = (np.exp(up.x) - np.exp(dn.x)) / (2.0 * delta) * scale_sigma
        extras["with_scale_uncertainty"] = {
            "sigma_n_atoms": float(math.hypot(sig[0], dtheta[0])),
            "sigma_e_vac0_v_per_cm": float(math.hypot(sig[1], dtheta[1])),
            "scale_sigma_kcps": float(scale_sigma),
        }

    return FitResult(
        n_atoms=float(n_fit), e_vac0=float(e_fit), scale=float(scale_fixed),
        sigma_n_atoms=float(sig[0]), sigma_e_vac0=float(sig[1]),
        sigma_scale=0.0, chi2=chi2_min, n_points=m, dof=dof,
        warnings=tuple(warns), edge=edge, poor_fit=poor, held_scale=True,
        extras=extras)


@dataclass(frozen=True)
class LinearRegimeNResult:
    """One-parameter weak-pump fit: ⟨N⟩ by closed form, with the numeric
    minimizer's value retained as a cross-check."""

    n_atoms: float
    sigma: float
    n_atoms_numeric: float
    chi2: float
    n_points: int


def fit_linear_regime_N(problem: FitProblem, e_vac0_vcm, scale_kcps,
                        cross_check_tol=1e-8) -> LinearRegimeNResult:
    """Fit ⟨N⟩ alone on weak-pump data with E and the scale held fixed.

    In the weak-pump law the rate is exactly proportional to ⟨N⟩, so with
    c(u) = scale·ξ̄₁(u; E)/(κ·⟨N⟩) the minimizer of Σ(y − ⟨N⟩·c)² has the
    closed form ⟨N⟩* = Σy·c / Σc².  The same objective is also minimized
    numerically and the two must agree to ``cross_check_tol``.
    """
    filtered = validity_filter(problem.u, problem.y, problem.u_min,
                               problem.u_max, problem.y_err)
    u, y = filtered[0], filtered[1]
    params_trial = replace(problem.params, e_vac0=float(e_vac0_vcm) * V_PER_CM)
    g0 = coupling_peak(params_trial)
    weights, taus = _velocity_nodes(problem.params, problem.vdist)
    # per-unit-⟨N⟩ model rate in kcps: scale·(velocity-averaged ξ₁)/κ
    c = np.array([
        scale_kcps * float(np.sum(
            weights / taus * np.sin(g0 * math.sqrt(ui) * taus) ** 2))
        / problem.params.kappa
        for ui in u])
    denom = float(c @ c)
    if denom == 0.0:
        raise FitRefusedError("weak-pump model is identically zero on the data")
    n_closed = float(y @ c) / denom

    def chi2_of(n_atoms):
        r = y - n_atoms * c
        return float(r @ r)

    lo, hi = problem.n_range
    span = (min(lo, n_closed / 2 if n_closed > 0 else lo),
            max(hi, 2 * n_closed))
    res = minimize_scalar(chi2_of, bounds=span, method="bounded",
                          options={"xatol": 1e-12 * max(1.0, abs(n_closed))})
    n_numeric = float(res.x)
    if abs(n_numeric - n_closed) > cross_check_tol * max(1.0, abs(n_closed)):
        raise FitConvergenceError(
            f"closed-form and numeric ⟨N⟩ disagree: {n_closed!r} vs {n_numeric!r}")

    chi2_min = chi2_of(n_closed)
    m = u.size
    dof = max(m - 1, 1)
    s2 = chi2_min / dof
    sigma = math.sqrt(s2 / denom)
    return LinearRegimeNResult(n_atoms=n_closed, sigma=sigma,
                               n_atoms_numeric=n_numeric, chi2=chi2_min,
                               n_points=m)


class CavityVacuumFitter(BaseEstimator):
    """Calibration fit with the scikit-learn estimator interface.

    X holds relative intensities u (shape (n,) or (n, 1)); y the count rates
    in kcps.  After ``fit``, the recovered parameters are available as
    ``n_atoms_``, ``e_vac0_`` (V/cm), ``scale_`` (kcps) and the full report
    as ``result_``; ``predict`` returns model count rates at the fitted
    parameters.
    """

    def __init__(self, params=None, vdist=None, u_min=0.5, u_max=1.0,
                 n_range=DEFAULT_N_RANGE, e_range=DEFAULT_E_RANGE,
                 fixed_scale=None, n_max=N_MAX_DEFAULT):
        self.params = params
        self.vdist = vdist
        self.u_min = u_min
        self.u_max = u_max
        self.n_range = n_range
        self.e_range = e_range
        self.fixed_scale = fixed_scale
        self.n_max = n_max

    def _as_u(self, X):
        arr = np.asarray(X, dtype=float)
        if arr.ndim == 2 and arr.shape[1] == 1:
            arr = arr[:, 0]
        if arr.ndim != 1:
            raise ValueError("X must be shaped (n,) or (n, 1) with u values")
        return arr

    def fit(self, X, y):
        if self.params is None or self.vdist is None:
            raise ValueError("CavityVacuumFitter requires params and vdist")
        u = self._as_u(X)
        problem = FitProblem(u=u, y=np.asarray(y, dtype=float),
                             params=self.params, vdist=self.vdist,
                             u_min=self.u_min, u_max=self.u_max,
                             n_range=self.n_range, e_range=self.e_range,
                             n_max=self.n_max)
        if self.fixed_scale is None:
            result = fit(problem)
        else:
            result = fit_fixed_scale(problem, self.fixed_scale)
        self.result_ = result
        self.n_atoms_ = result.n_atoms
        self.e_vac0_ = result.e_vac0
        self.scale_ = result.scale
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        if not hasattr(self, "result_"):
            raise RuntimeError("fit the estimator before calling predict")
        u = self._as_u(X)
        model = model_curve(self.n_atoms_, self.e_vac0_, u, self.params,
                            self.vdist, self.n_max)
        return self.scale_ * model
