"""Forward synthesis of aperture-scan datasets: positions → flux → counts.

The detector record at each nanohole position is the cavity output flux of
the averaged steady state, scaled by the net detection efficiency, plus the
free-space emission background collected by the detector and an optional
dark rate, with optional Poisson counting noise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .averaging import PositionSpreadKernel, VelocityDistribution, averaged_steady_state
from .kinetics import N_MAX_DEFAULT, photon_flux
from .physics import (
    AperturePosition,
    PhysicalParams,
    coupling_peak,
    interaction_time,
    mode_function,
    relative_intensity,
)
from .validation import check_nonnegative, check_positive

#: Excited-population loss per transit from free-space emission.
EMISSION_POPULATION_CHANGE = 0.028
#: Fraction of free-space emission solid angle seen by the detector.
COLLECTION_SOLID_ANGLE = 1e-4


def background_flux(n_atoms, tau, population_change=EMISSION_POPULATION_CHANGE,
                    solid_angle=COLLECTION_SOLID_ANGLE) -> float:
    """Constant background photon flux from free-space emission (photons/s).

    The atom current ⟨N⟩/τ, times the small population change per transit
    due to free-space decay, times the detector's solid-angle fraction.
    """
    check_positive(tau, "tau")
    check_nonnegative(n_atoms, "n_atoms")
    return (n_atoms / tau) * population_change * solid_angle


@dataclass(frozen=True)
class ScanConfig:
    """Aperture-scan acquisition settings.

    scale is the net detection efficiency in counts per photon; dark is an
    additive dark-count rate (cps).  With noise="poisson", counts at record i
    are drawn from a counter-based stream keyed by (seed, i), so parallel and
    serial runs agree bit for bit.
    """

    positions: tuple
    dwell: float
    scale: float = 1.0
    dark: float = 0.0
    seed: int = 0
    noise: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        if not self.positions:
            raise ValueError("scan needs at least one position")
        check_positive(self.dwell, "dwell")
        check_nonnegative(self.scale, "scale")
        check_nonnegative(self.dark, "dark")
        if self.noise not in ("none", "poisson"):
            raise ValueError(f"noise must be 'none' or 'poisson', got {self.noise!r}")

    @classmethod
    def line_scan(cls, z_start, z_stop, points, x=0.0, **kwargs):
        """Uniform z-scan at fixed x (the node-to-antinode default geometry)."""
        if points < 1:
            raise ValueError("points must be >= 1")
        z = np.linspace(z_start, z_stop, points)
        positions = [AperturePosition(x=x, z=float(zi)) for zi in z]
        return cls(positions=positions, **kwargs)


@dataclass(frozen=True)
class ScanRecord:
    """One scan point.

    rate is the detector count rate (cps): the expected rate when noise is
    off (counts are then just its integer readout), the measured counts/dwell
    when Poisson noise is on.  u is the relative standing-wave intensity
    cos²(2πz/λ) regardless of x.
    """

    position: AperturePosition
    u: float
    expected_flux: float
    counts: int
    rate: float
    flagged: bool = False


def simulate_scan(params: PhysicalParams, n_atoms, vdist: VelocityDistribution,
                  kernel: PositionSpreadKernel | None, config: ScanConfig,
                  n_max=N_MAX_DEFAULT) -> list[ScanRecord]:
    """Simulate the detector record of an aperture scan (see module docstring).

    Deterministic for a fixed config: noise draws are keyed by (seed, record
    index), independent of execution order.
    """
    tau_bar = interaction_time(vdist.mean, params)
    bg = background_flux(n_atoms, tau_bar)
    records = []
    for i, pos in enumerate(config.positions):
        dist = averaged_steady_state(pos, params, n_atoms, vdist, kernel, n_max)
        flux = photon_flux(dist, params.kappa)
        rate = config.scale * (flux + bg) + config.dark
        expected_counts = rate * config.dwell
        if config.noise == "poisson":
            rng = np.random.Generator(
                np.random.Philox(key=np.array([config.seed, i], dtype=np.uint64)))
            counts = int(rng.poisson(expected_counts))
            rate_out = counts / config.dwell
        else:
            counts = int(round(expected_counts))
            rate_out = rate
        records.append(ScanRecord(
            position=pos,
            u=float(relative_intensity(pos.z, params.wavelength)),
            expected_flux=flux,
            counts=counts,
            rate=rate_out,
            flagged=dist.flagged,
        ))
    return records


def surface_map(params: PhysicalParams, n_atoms, vdist: VelocityDistribution,
                x_grid, z_grid) -> np.ndarray:
    """Weak-pump flux map flux(x,z) = (⟨N⟩/τ̄)·(g₀τ̄)²·ψ(x,z)² on a 2-D grid.

    Returns an array of shape (len(x_grid), len(z_grid)).  Valid in the
    linear regime; warns when ⟨N⟩·(g₀τ̄)² ≥ 0.1.
    """
    x = np.atleast_1d(np.asarray(x_grid, dtype=float))
    z = np.atleast_1d(np.asarray(z_grid, dtype=float))
    tau = interaction_time(vdist.mean, params)
    g0 = coupling_peak(params)
    pump_area = n_atoms * (g0 * tau) ** 2
    if pump_area >= 0.1:
        warnings.warn(
            f"surface_map outside the weak-pump regime: ⟨N⟩·(g0·τ)² = "
            f"{pump_area:.3g} >= 0.1; the quadratic map is only indicative",
            stacklevel=2)
    psi = mode_function(x[:, None], z[None, :], params)
    return (n_atoms / tau) * (g0 * tau) ** 2 * psi ** 2
