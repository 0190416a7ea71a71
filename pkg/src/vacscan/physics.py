"""Cavity geometry, vacuum coupling, transit time and pump-strength primitives.

All quantities are SI internally (m, s, rad/s, C·m, V/m).  Field amplitudes
appear in V/cm only at config and report boundaries, where they are converted
exactly once (factor 100).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.constants import hbar

from .validation import check_finite, check_positive, check_unit_interval

#: V/m per V/cm — the single place this conversion factor lives.
V_PER_CM = 100.0


@dataclass(frozen=True)
class AperturePosition:
    """Nanohole-array position in the cavity cross section (the beam runs along y)."""

    x: float
    z: float

    def __post_init__(self):
        check_finite(self.x, "x")
        check_finite(self.z, "z")


@dataclass(frozen=True)
class PhysicalParams:
    """Fixed physical parameters of cavity, atom and drive geometry.

    Attributes
    ----------
    wavelength : float
        Cavity standing-wave wavelength (m).
    waist : float
        Gaussian mode waist (m).
    kappa : float
        Cavity field decay rate (rad/s).
    dipole_moment : float
        Atomic transition dipole moment (C·m).
    e_vac0 : float
        Peak vacuum-field amplitude at the antinode (V/m; converted from
        V/cm at the config boundary).
    gamma : float
        Atomic free-space decay rate (rad/s).  Excluded from the photon
        kinetics; kept only for the strong-coupling validity check.
    rho_ee0 : float
        Excited-state population of atoms entering the cavity.
    """

    wavelength: float
    waist: float
    kappa: float
    dipole_moment: float
    e_vac0: float
    gamma: float = 0.0
    rho_ee0: float = 1.0

    def __post_init__(self):
        check_positive(self.wavelength, "wavelength")
        check_positive(self.waist, "waist")
        check_positive(self.kappa, "kappa")
        check_positive(self.dipole_moment, "dipole_moment")
        check_positive(self.e_vac0, "e_vac0")
        if self.gamma < 0 or not np.isfinite(self.gamma):
            raise ValueError(f"gamma must be >= 0, got {self.gamma!r}")
        check_unit_interval(self.rho_ee0, "rho_ee0")

    @property
    def wavenumber(self) -> float:
        """Standing-wave wavenumber 2π/λ (rad/m)."""
        return 2.0 * math.pi / self.wavelength


@dataclass(frozen=True)
class TopHatBox:
    """Equivalent interaction volume with the Gaussian beam-axis profile
    replaced by a top-hat of length y0 = √π·w0 (same accumulated coupling).
    """

    x0: float
    y0: float
    z0: float

    @classmethod
    def for_params(cls, params: PhysicalParams, x0: float, z0: float) -> "TopHatBox":
        return cls(x0=x0, y0=math.sqrt(math.pi) * params.waist, z0=z0)


def mode_function(x, z, params: PhysicalParams):
    """Normalized mode amplitude exp(-(x/w0)^2)·cos(2πz/λ), in [-1, 1].

    Vectorized over ``x`` and ``z``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    psi = np.exp(-((x / params.waist) ** 2)) * np.cos(params.wavenumber * z)
    return psi if psi.ndim else float(psi)


def relative_intensity(z, wavelength):
    """Relative standing-wave intensity u = cos²(2πz/λ) — the fit coordinate."""
    z = np.asarray(z, dtype=float)
    u = np.cos(2.0 * math.pi * z / wavelength) ** 2
    return u if u.ndim else float(u)


def coupling_peak(params: PhysicalParams) -> float:
    """Peak vacuum Rabi coupling g0 = μ·E_vac0/ħ at the antinode (rad/s)."""
    return params.dipole_moment * params.e_vac0 / hbar


def coupling_at(x, z, params: PhysicalParams):
    """Position-dependent coupling g(x,z) = g0·ψ(x,z) (rad/s).

    The sign of ψ is carried; every consumer uses only sin²/cos² of g·t,
    so it is inert.
    """
    return coupling_peak(params) * mode_function(x, z, params)


def interaction_time(v, params: PhysicalParams) -> float:
    """Transit time τ = √π·w0/v through the top-hat equivalent profile (s)."""
    v = check_positive(v, "v")
    return math.sqrt(math.pi) * params.waist / v


def effective_mean_atom_number(n_tot, rho_ee0) -> float:
    """Mean pumping atom number ⟨N⟩ = n_tot·(ρ_ee − ρ_gg) = n_tot·(2ρ_ee0 − 1).

    Uses the two-level closure ρ_gg = 1 − ρ_ee; a ground-state atom undoes
    the work of an excited one, so only the inversion pumps the field.
    """
    n_tot = float(n_tot)
    if n_tot < 0:
        raise ValueError(f"n_tot must be >= 0, got {n_tot!r}")
    rho_ee0 = check_unit_interval(rho_ee0, "rho_ee0")
    return n_tot * (2.0 * rho_ee0 - 1.0)
