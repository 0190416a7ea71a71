"""Ensemble averaging of the pump gain over velocity and position spread.

Atoms emerge from the nanoholes with a spread of velocities (each giving its
own transit time) and a transverse position spread (each offset giving its
own coupling through the mode function).  Both enter the master equation as
a mixture of gain channels; because the mixture is still a birth–death chain,
its steady state keeps the exact product form over the averaged per-step
gain rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr  # standard normal CDF

from .kinetics import (
    GainChannel,
    PhotonDistribution,
    PumpParams,
    mean_photon,
    steady_state_product,
    steady_state_product_channels,
    N_MAX_DEFAULT,
    DEFAULT_TRUNCATION_TOL,
)
from .physics import AperturePosition, PhysicalParams, coupling_at, interaction_time
from .validation import as_float_array, check_positive

#: Gaussian tail cut for kernel support and velocity quadrature, in sigmas.
_GAUSS_SUPPORT_SIGMAS = 4.5
_VELOCITY_HALF_WIDTH_SIGMAS = 3.0


@dataclass(frozen=True, eq=False)
class VelocityDistribution:
    """Atomic-beam velocity model reduced to quadrature nodes and weights.

    kind: "delta" (monochromatic), "truncated-gaussian" (Gauss–Legendre over
    [v̄−3σ, v̄+3σ]), or "tabulated" (explicit nodes/weights).
    """

    kind: str
    mean: float
    sigma: float = 0.0
    n_nodes: int = 9
    velocities: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def delta(cls, v):
        return cls(kind="delta", mean=check_positive(v, "v"))

    @classmethod
    def truncated_gaussian(cls, mean, sigma, n_nodes=9):
        check_positive(mean, "mean")
        check_positive(sigma, "sigma")
        if n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if mean - _VELOCITY_HALF_WIDTH_SIGMAS * sigma <= 0:
            raise ValueError("velocity distribution extends to v <= 0; "
                             "narrow sigma or use a tabulated distribution")
        return cls(kind="truncated-gaussian", mean=mean, sigma=sigma,
                   n_nodes=int(n_nodes))

    @classmethod
    def tabulated(cls, velocities, weights):
        v = as_float_array(velocities, "velocities")
        w = as_float_array(weights, "weights", nonneg=True)
        if v.shape != w.shape or v.size == 0:
            raise ValueError("velocities and weights must be matching nonempty arrays")
        if v.min() <= 0:
            raise ValueError("all velocities must be > 0")
        if w.sum() <= 0:
            raise ValueError("weights must have positive total")
        w = w / w.sum()
        vbar = float(v @ w)
        sig = float(math.sqrt(max(0.0, (v - vbar) ** 2 @ w)))
        return cls(kind="tabulated", mean=vbar, sigma=sig, n_nodes=v.size,
                   velocities=v, weights=w)

    def quadrature(self):
        """Return (velocities, weights) with weights ≥ 0 summing to 1."""
        if self.kind == "delta":
            return np.array([self.mean]), np.array([1.0])
        if self.kind == "tabulated":
            return self.velocities.copy(), self.weights.copy()
        if self.kind == "truncated-gaussian":
            x, wq = np.polynomial.legendre.leggauss(self.n_nodes)
            v = self.mean + _VELOCITY_HALF_WIDTH_SIGMAS * self.sigma * x
            w = wq * np.exp(-0.5 * ((v - self.mean) / self.sigma) ** 2)
            return v, w / w.sum()
        raise ValueError(f"unknown velocity distribution kind {self.kind!r}")


@dataclass(frozen=True, eq=False)
class PositionSpreadKernel:
    """Discrete symmetric blur kernel on an offset grid along the scan axis.

    weights are nonnegative and sum to 1; offsets are uniformly spaced with
    the stored pitch and symmetric about zero.
    """

    offsets: np.ndarray
    weights: np.ndarray
    pitch: float
    axis: str = "z"

    def __post_init__(self):
        offsets = as_float_array(self.offsets, "offsets")
        weights = as_float_array(self.weights, "weights", nonneg=True)
        if offsets.shape != weights.shape or offsets.size == 0:
            raise ValueError("offsets and weights must be matching nonempty arrays")
        if weights.sum() <= 0:
            raise ValueError("kernel weights must have positive total")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "weights", weights / weights.sum())
        check_positive(self.pitch, "pitch")
        if offsets.size > 1:
            steps = np.diff(offsets)
            if not np.allclose(steps, self.pitch, rtol=1e-9, atol=0):
                raise ValueError("offsets must be uniformly spaced at the pitch")
        if not np.allclose(offsets, -offsets[::-1], atol=1e-15 + 1e-9 * self.pitch):
            raise ValueError("kernel offsets must be symmetric about 0")
        if not np.allclose(self.weights, self.weights[::-1], rtol=0, atol=1e-12):
            raise ValueError("kernel weights must be symmetric about 0")

    @classmethod
    def delta(cls, pitch=1.0, axis="z"):
        return cls(offsets=np.array([0.0]), weights=np.array([1.0]),
                   pitch=pitch, axis=axis)

    @property
    def half_width(self) -> float:
        return float(self.offsets[-1])

    def variance(self) -> float:
        return float((self.offsets ** 2) @ self.weights)

    @property
    def is_delta(self) -> bool:
        return self.offsets.size == 1


def _disc_projection_cell_integrals(radius, edges):
    """∫ over grid cells of the disc-projection density 2√(R²−t²)/(πR²)."""
    t = np.clip(edges, -radius, radius)
    antider = 0.5 * (t * np.sqrt(np.maximum(radius ** 2 - t ** 2, 0.0))
                     + radius ** 2 * np.arcsin(np.clip(t / radius, -1, 1)))
    return (2.0 / (math.pi * radius ** 2)) * np.diff(antider)


def build_spread_kernel(hole_diameter, divergence, standoff, pitch,
                        axis="z") -> PositionSpreadKernel:
    """Transverse position-spread kernel of atoms at the cavity mode.

    The uniform nanohole disc (given diameter) projects onto the scan axis as
    a chord-length density; free flight over ``standoff`` with the given
    angular divergence adds a Gaussian of σ = divergence·standoff.  The
    convolution of the two is integrated over grid cells at ``pitch`` and
    renormalized.  Zero diameter and divergence degenerate to a delta kernel.
    """
    for name, val in (("hole_diameter", hole_diameter), ("divergence", divergence),
                      ("standoff", standoff)):
        if val < 0 or not np.isfinite(val):
            raise ValueError(f"{name} must be >= 0 and finite, got {val!r}")
    check_positive(pitch, "pitch")
    radius = 0.5 * hole_diameter
    sigma = divergence * standoff
    if radius == 0.0 and sigma == 0.0:
        return PositionSpreadKernel.delta(pitch=pitch, axis=axis)

    half_support = radius + _GAUSS_SUPPORT_SIGMAS * sigma
    if pitch > 2.0 * half_support:
        raise ValueError(
            f"pitch {pitch:g} m exceeds the kernel width {2 * half_support:g} m; "
            "the kernel cannot be resolved on this grid")

    m = int(math.ceil(half_support / pitch))
    offsets = pitch * np.arange(-m, m + 1)
    edges = np.concatenate((offsets - 0.5 * pitch, [offsets[-1] + 0.5 * pitch]))

    if radius == 0.0:
        cdf = ndtr(edges / sigma)
        weights = np.diff(cdf)
    elif sigma == 0.0:
        weights = _disc_projection_cell_integrals(radius, edges)
    else:
        # Cell mass = (2/π)∫cos²θ [Φ((s₁−R·sinθ)/σ) − Φ((s₀−R·sinθ)/σ)] dθ:
        # the θ-substitution absorbs the disc density's endpoint singularity
        # and the Gaussian integrates exactly across each cell.
        theta, wq = np.polynomial.legendre.leggauss(64)
        theta = 0.5 * math.pi * theta
        wq = 0.5 * math.pi * wq
        centers = radius * np.sin(theta)
        upper = ndtr((edges[None, 1:] - centers[:, None]) / sigma)
        lower = ndtr((edges[None, :-1] - centers[:, None]) / sigma)
        weights = (2.0 / math.pi) * (wq * np.cos(theta) ** 2) @ (upper - lower)

    weights = np.clip(weights, 0.0, None)
    weights = 0.5 * (weights + weights[::-1])  # enforce exact symmetry
    return PositionSpreadKernel(offsets=offsets, weights=weights / weights.sum(),
                                pitch=pitch, axis=axis)


def gain_channels(pos: AperturePosition, params: PhysicalParams, n_atoms,
                  vdist: VelocityDistribution,
                  kernel: PositionSpreadKernel | None = None
                  ) -> list[GainChannel]:
    """Expand (velocity × position-offset) classes into pump gain channels.

    Each channel carries its share of the total arrival rate ⟨N⟩/τ(v) and
    its own coupling from the mode function at the offset position.
    """
    if kernel is None:
        kernel = PositionSpreadKernel.delta()
    velocities, vw = vdist.quadrature()
    channels = []
    for v, w in zip(velocities, vw):
        tau = interaction_time(v, params)
        rate = w * n_atoms / tau
        for delta, q in zip(kernel.offsets, kernel.weights):
            if kernel.axis == "z":
                g = coupling_at(pos.x, pos.z + delta, params)
            else:
                g = coupling_at(pos.x + delta, pos.z, params)
            channels.append(GainChannel(rate * q, float(g), tau))
    return channels


def averaged_steady_state(pos: AperturePosition, params: PhysicalParams, n_atoms,
                          vdist: VelocityDistribution,
                          kernel: PositionSpreadKernel | None = None,
                          n_max=N_MAX_DEFAULT,
                          truncation_tol=DEFAULT_TRUNCATION_TOL
                          ) -> PhotonDistribution:
    """Steady state under the velocity/position-averaged gain.

    The averaged generator is still a birth–death chain, so the steady state
    is the exact product form over the channel-summed per-step gain rates.
    """
    channels = gain_channels(pos, params, n_atoms, vdist, kernel)
    return steady_state_product_channels(channels, params.kappa, n_max,
                                         truncation_tol)


def averaged_mean_photon(pos: AperturePosition, params: PhysicalParams, n_atoms,
                         vdist: VelocityDistribution,
                         kernel: PositionSpreadKernel | None = None,
                         n_max=N_MAX_DEFAULT, method="gain-average") -> float:
    """⟨n⟩ under ensemble averaging.

    method="gain-average" (default): average the gain, then solve.
    method="output-average" (diagnostic): solve each (velocity, offset) class
    at the full pump rate and average the resulting ⟨n⟩ — a plain weighted
    mean, which coincides with gain-averaging only in the linear regime.
    """
    if method == "gain-average":
        return mean_photon(averaged_steady_state(pos, params, n_atoms, vdist,
                                                 kernel, n_max))
    if method != "output-average":
        raise ValueError(f"unknown averaging method {method!r}")
    if kernel is None:
        kernel = PositionSpreadKernel.delta()
    velocities, vw = vdist.quadrature()
    total = 0.0
    for v, w in zip(velocities, vw):
        tau = interaction_time(v, params)
        for delta, q in zip(kernel.offsets, kernel.weights):
            if kernel.axis == "z":
                g = coupling_at(pos.x, pos.z + delta, params)
            else:
                g = coupling_at(pos.x + delta, pos.z, params)
            pump = PumpParams(n_atoms, tau, float(g), params.kappa)
            total += w * q * mean_photon(steady_state_product(pump, n_max))
    return total
