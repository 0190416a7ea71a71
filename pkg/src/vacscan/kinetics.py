"""Diagonal photon-number kinetics of the single-atom-pumped cavity.

The field's density matrix stays diagonal under this pump, so the state is a
probability vector p(n) over Fock numbers.  One excited-atom transit applies
the gain map

    p'(n) = p(n)·cos²(√(n+1)·g·τ) + p(n−1)·sin²(√n·g·τ),

cavity decay contributes ṗ(n) = κ[(n+1)p(n+1) − n·p(n)], and transits at mean
rate ⟨N⟩/τ give the master equation  ṗ = (⟨N⟩/τ)(F−I)p + Lp.  Because the
generator is a birth–death chain, the steady state is the detailed-balance
product  p(n) ∝ ∏_{k≤n} ξ_k/(κk)  with per-step gain rate
ξ_k = (⟨N⟩/τ)·sin²(√k·g·τ) — and the same product form holds verbatim for a
mixture of gain channels (velocity / position classes) with ξ_k summed over
the mixture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .validation import check_nonnegative, check_positive

DEFAULT_TRUNCATION_TOL = 1e-10
N_MAX_DEFAULT = 40
N_MAX_CAP = 160


class TruncationError(RuntimeError):
    """Raised when a solve cannot be represented within the Fock-space cap."""


class GainChannel(NamedTuple):
    """One class of pumping atoms: arrival rate (1/s), coupling g (rad/s),
    transit time τ (s).  A velocity/position ensemble is a list of these."""

    rate: float
    g: float
    tau: float


@dataclass(frozen=True)
class PumpParams:
    """Single-channel pump: mean atom number ⟨N⟩ within a transit, transit
    time τ, coupling g, cavity decay κ."""

    n_atoms: float
    tau: float
    g: float
    kappa: float

    def __post_init__(self):
        check_nonnegative(self.n_atoms, "n_atoms")
        check_positive(self.tau, "tau")
        check_positive(self.kappa, "kappa")
        if not np.isfinite(self.g):
            raise ValueError(f"g must be finite, got {self.g!r}")

    @property
    def rate(self) -> float:
        """Mean atom arrival rate ⟨N⟩/τ (1/s)."""
        return self.n_atoms / self.tau

    def channels(self) -> list[GainChannel]:
        return [GainChannel(self.rate, self.g, self.tau)]


class PhotonDistribution:
    """Photon-number probabilities p(n), n = 0..n_max.

    Invariants: p(n) ≥ 0, Σp = 1 (renormalized exactly on construction after
    validating the raw input), and the top bin stays below ``truncation_tol``
    after a healthy solve — otherwise :attr:`flagged` is True.
    ``truncation_leak`` accumulates probability that the gain map would have
    pushed past n_max (clamped in place instead of lost).
    """

    def __init__(self, p, truncation_tol=DEFAULT_TRUNCATION_TOL,
                 truncation_leak=0.0, *, neg_tol=1e-12, norm_tol=1e-9):
        arr = np.asarray(p, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("p must be a nonempty 1-D probability vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("p contains non-finite entries")
        if arr.min() < -neg_tol:
            raise ValueError(f"p has a negative entry beyond tolerance: "
                             f"min={arr.min():.3e} at n={int(arr.argmin())}")
        total = arr.sum()
        if abs(total - 1.0) > norm_tol:
            raise ValueError(f"p must sum to 1 within {norm_tol:g} (got {total:.17g})")
        arr = np.clip(arr, 0.0, None)
        self.p = arr / arr.sum()
        self.truncation_tol = float(truncation_tol)
        self.truncation_leak = float(truncation_leak)

    @classmethod
    def vacuum(cls, n_max, truncation_tol=DEFAULT_TRUNCATION_TOL):
        p = np.zeros(n_max + 1)
        p[0] = 1.0
        return cls(p, truncation_tol)

    @classmethod
    def fock(cls, n, n_max, truncation_tol=DEFAULT_TRUNCATION_TOL):
        if not 0 <= n <= n_max:
            raise ValueError(f"Fock index {n} outside 0..{n_max}")
        p = np.zeros(n_max + 1)
        p[n] = 1.0
        return cls(p, truncation_tol)

    @property
    def n_max(self) -> int:
        return self.p.size - 1

    @property
    def flagged(self) -> bool:
        """True when the truncation-health invariant is violated."""
        return bool(self.p[-1] >= self.truncation_tol
                    or self.truncation_leak >= self.truncation_tol)

    def __repr__(self):
        return (f"PhotonDistribution(n_max={self.n_max}, "
                f"mean={mean_photon(self):.6g}, flagged={self.flagged})")


def emission_probabilities(n_max, g, tau):
    """Per-transit emission probability sin²(g·τ·√(n+1)) from |e, n⟩."""
    n = np.arange(n_max + 1)
    return np.sin(g * tau * np.sqrt(n + 1.0)) ** 2


def gain_map(dist: PhotonDistribution, g, tau) -> PhotonDistribution:
    """Apply one excited-atom transit to the photon distribution.

    Probability that would leave the top bin upward is clamped in place and
    added to the distribution's truncation-leak accumulator.
    """
    p = dist.p
    beta = emission_probabilities(dist.n_max, g, tau)
    would_leak = p[-1] * beta[-1]
    stay = 1.0 - beta
    stay[-1] = 1.0  # clamp: no flow out of the truncated space
    out = p * stay
    out[1:] += p[:-1] * beta[:-1]
    return PhotonDistribution(out, dist.truncation_tol,
                              dist.truncation_leak + would_leak)


def loss_rate(p, kappa):
    """Cavity-decay contribution ṗ(n) = κ[(n+1)p(n+1) − n·p(n)].

    Accepts a PhotonDistribution or a bare vector; components sum to zero.
    """
    arr = p.p if isinstance(p, PhotonDistribution) else np.asarray(p, dtype=float)
    n = np.arange(arr.size, dtype=float)
    rate = -kappa * n * arr
    rate[:-1] += kappa * n[1:] * arr[1:]
    return rate


def generator(channels: Sequence[GainChannel], kappa, n_max) -> np.ndarray:
    """Dense master-equation generator A = Σ_c rate_c·(F_c − I) + L.

    Columns sum to zero (trace preservation); the top bin's upward gain flow
    is clamped as in :func:`gain_map`.
    """
    m = n_max + 1
    a = np.zeros((m, m))
    idx = np.arange(m)
    for rate, g, tau in channels:
        if rate == 0.0:
            continue
        beta = emission_probabilities(n_max, g, tau)
        beta[-1] = 0.0
        a[idx, idx] -= rate * beta
        a[idx[1:], idx[:-1]] += rate * beta[:-1]
    n = idx.astype(float)
    a[idx, idx] -= kappa * n
    a[idx[:-1], idx[1:]] += kappa * n[1:]
    return a


def _rk4_step_matrix(a: np.ndarray, h: float) -> np.ndarray:
    """One classical RK4 step of ṗ = A p as its exact polynomial map
    M = I + hA + (hA)²/2 + (hA)³/6 + (hA)⁴/24 (A is autonomous and linear)."""
    b = h * a
    b2 = b @ b
    b3 = b2 @ b
    b4 = b3 @ b
    return np.eye(a.shape[0]) + b + b2 / 2.0 + b3 / 6.0 + b4 / 24.0


def _check_health(p, t, neg_tol=1e-9, norm_tol=1e-6):
    if p.min() < -neg_tol:
        raise RuntimeError(
            f"evolve unstable at t={t:.6g} s: p({int(p.argmin())}) = {p.min():.3e} "
            f"< -{neg_tol:g}; reduce dt or raise n_max")
    drift = abs(p.sum() - 1.0)
    if drift > norm_tol:
        raise RuntimeError(
            f"evolve unstable at t={t:.6g} s: normalization drift {drift:.3e} "
            f"> {norm_tol:g}")


def evolve_channels(p0, channels, kappa, t_final, dt,
                    truncation_tol=DEFAULT_TRUNCATION_TOL) -> PhotonDistribution:
    """Integrate ṗ = [Σ_c rate_c(F_c−I) + L] p for t_final with RK4 steps ≤ dt.

    The RK4 step of this autonomous linear system is a fixed matrix map
    p ← M·p, so the integration applies M^steps by binary powering — exactly
    the same polynomial map as naive stepping, at a cost logarithmic in the
    step count.  Health (negativity, norm drift) is checked at every applied
    power, each of which is a true intermediate time point.
    """
    dist0 = p0 if isinstance(p0, PhotonDistribution) else PhotonDistribution(p0)
    n_max = dist0.n_max
    total_rate = sum(c.rate for c in channels)
    check_positive(kappa, "kappa")
    check_positive(dt, "dt")
    guard = 0.1 * min(1.0 / total_rate if total_rate > 0 else math.inf,
                      1.0 / (kappa * n_max) if n_max > 0 else math.inf)
    if dt > guard * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} violates the stability guard "
                         f"dt <= 0.1·min(τ/⟨N⟩, 1/(κ·n_max)) = {guard:g}")
    if t_final < 0:
        raise ValueError("t_final must be >= 0")
    if t_final == 0:
        return PhotonDistribution(dist0.p, truncation_tol)

    steps = max(1, int(math.ceil(t_final / dt - 1e-12)))
    h = t_final / steps
    a = generator(channels, kappa, n_max)
    m_step = _rk4_step_matrix(a, h)

    p = dist0.p.copy()
    t = 0.0
    power = m_step
    j = 0
    remaining = steps
    while remaining:
        if remaining & 1:
            p = power @ p
            t += (1 << j) * h
            _check_health(p, t)
        remaining >>= 1
        if remaining:
            power = power @ power
            j += 1
    return PhotonDistribution(p, truncation_tol)


def evolve(p0, pump: PumpParams, t_final, dt,
           truncation_tol=DEFAULT_TRUNCATION_TOL) -> PhotonDistribution:
    """Master-equation evolution for a single-channel pump (see evolve_channels)."""
    return evolve_channels(p0, pump.channels(), pump.kappa, t_final, dt,
                           truncation_tol)


def averaged_xi(channels: Sequence[GainChannel], n_max) -> np.ndarray:
    """Per-step gain rates ξ_k = Σ_c rate_c·sin²(√k·g_c·τ_c), k = 1..n_max."""
    k = np.arange(1, n_max + 1, dtype=float)
    xi = np.zeros(n_max)
    for rate, g, tau in channels:
        xi += rate * np.sin(g * tau * np.sqrt(k)) ** 2
    return xi


def steady_state_product_channels(channels, kappa, n_max=N_MAX_DEFAULT,
                                  truncation_tol=DEFAULT_TRUNCATION_TOL,
                                  escalate=True, n_max_cap=N_MAX_CAP
                                  ) -> PhotonDistribution:
    """Detailed-balance steady state p(n) ∝ ∏_{k≤n} ξ_k/(κk), in log space.

    If the top bin holds at least ``truncation_tol`` the cutoff doubles
    (up to ``n_max_cap``); a result still flagged at the cap is returned
    flagged for the caller to handle.
    """
    check_positive(kappa, "kappa")
    while True:
        xi = averaged_xi(channels, n_max)
        k = np.arange(1, n_max + 1, dtype=float)
        with np.errstate(divide="ignore"):
            log_ratio = np.log(xi) - np.log(kappa * k)
        log_p = np.concatenate(([0.0], np.cumsum(log_ratio)))
        p = np.exp(log_p - logsumexp(log_p))
        if p[-1] < truncation_tol or not escalate or n_max >= n_max_cap:
            return PhotonDistribution(p, truncation_tol)
        n_max = min(2 * n_max, n_max_cap)


def steady_state_product(pump: PumpParams, n_max=N_MAX_DEFAULT,
                         truncation_tol=DEFAULT_TRUNCATION_TOL,
                         escalate=True, n_max_cap=N_MAX_CAP) -> PhotonDistribution:
    """Steady state of the single-channel pump via the product formula."""
    return steady_state_product_channels(pump.channels(), pump.kappa, n_max,
                                         truncation_tol, escalate, n_max_cap)


def mean_photon(p) -> float:
    """⟨n⟩ = Σ n·p(n)."""
    arr = p.p if isinstance(p, PhotonDistribution) else np.asarray(p, dtype=float)
    return float(np.arange(arr.size) @ arr)


def photon_flux(p, kappa) -> float:
    """Cavity output photon flux κ·⟨n⟩ (photons/s)."""
    return kappa * mean_photon(p)


def linear_regime_output(pump: PumpParams, quadratic=False) -> float:
    """Weak-pump output flux ξ₁ = (⟨N⟩/τ)·sin²(g·τ) (photons/s).

    With ``quadratic=True`` returns the small-angle form (⟨N⟩/τ)·(g·τ)²,
    the variant used by the 2-D surface map.
    """
    gt = pump.g * pump.tau
    if quadratic:
        return pump.rate * gt * gt
    return pump.rate * math.sin(gt) ** 2


def relaxation_gap(channels, kappa, n_max) -> float:
    """Smallest decay rate of the generator's nonzero modes (diagnostic).

    The generator has one zero eigenvalue (the steady state); the gap is
    −max Re λ over the rest and sets the thermalization time scale.
    """
    a = generator(channels, kappa, n_max)
    ev = np.linalg.eigvals(a)
    ev = np.sort(ev.real)[::-1]
    return -ev[1] if ev.size > 1 else math.inf
