"""Scenario configuration: one JSON document per physical setup.

Keys carry explicit unit suffixes; unknown keys are rejected so a typo
cannot silently fall back to a default.  The sha256 hash of the merged
(defaults-applied) canonical document stamps every output file, tying
data back to the exact scenario that produced it.
"""

from __future__ import annotations

import hashlib
import json

from .averaging import VelocityDistribution, build_spread_kernel
from .physics import PhysicalParams, V_PER_CM


class ConfigError(ValueError):
    """Malformed scenario document (unknown key, bad type, bad value)."""


#: Full scenario document with the stock probe setup.
DEFAULTS = {
    # cavity and transition
    "wavelength_nm": 791.0,
    "waist_um": 43.0,
    "kappa_rad_per_s": 1.0e6,
    "dipole_moment_coulomb_m": 3.0e-30,
    "e_vac0_v_per_cm": 0.86,
    "gamma_rad_per_s": 0.0,
    # atomic beam
    "n_atoms": 1.5,
    "excited_fraction": 1.0,
    "velocity_kind": "truncated-gaussian",
    "velocity_mean_m_per_s": 755.0,
    "velocity_sigma_m_per_s": 40.0,
    "velocity_quadrature_nodes": 9,
    "velocity_tabulated_m_per_s": [],
    "velocity_tabulated_weights": [],
    # nanohole collimation (position-spread kernel)
    "hole_diameter_nm": 170.0,
    "divergence_mrad": 0.24,
    "standoff_um": 300.0,
    # scan geometry and detection
    "scan_z_start_nm": -395.5,
    "scan_z_stop_nm": 395.5,
    "scan_points": 65,
    "scan_x_um": 0.0,
    "dwell_s": 1.0,
    "scale_counts_per_photon": 0.27,
    "dark_rate_cps": 0.0,
    "noise": "none",
    "seed": 0,
    # surface map grid
    "map_x_start_um": -80.0,
    "map_x_stop_um": 80.0,
    "map_x_points": 41,
    "map_z_start_nm": -791.0,
    "map_z_stop_nm": 791.0,
    "map_z_points": 81,
    # photon-kinetics truncation
    "n_max": 40,
    # trajectory oracle
    "traj_n_trajectories": 10000,
    "traj_t_total_us": 12.0,
    "traj_a_max": 4,
    "traj_n_max": 30,
    "traj_checkpoints": 10,
    "traj_checkpoint_start_us": None,
    "traj_initial_state": "vacuum",
    "traj_z_nm": 0.0,
    "traj_x_um": 0.0,
}

_KIND_CHOICES = {
    "velocity_kind": ("delta", "truncated-gaussian", "tabulated"),
    "noise": ("none", "poisson"),
}
_INT_KEYS = {
    "scan_points", "velocity_quadrature_nodes", "map_x_points",
    "map_z_points", "n_max", "traj_n_trajectories", "traj_a_max",
    "traj_n_max", "traj_checkpoints", "seed",
}
_LIST_KEYS = {"velocity_tabulated_m_per_s", "velocity_tabulated_weights"}
_STR_KEYS = {"velocity_kind", "noise", "traj_initial_state"}
_OPTIONAL_KEYS = {"traj_checkpoint_start_us"}


def validate_config(document) -> dict:
    """Merge a partial document over the defaults and type-check it.

    Returns the complete scenario dict; raises ConfigError on unknown
    keys or values of the wrong shape.  Range checking is left to the
    constructors the values feed (their ValueError also surfaces as a
    config error at the command line).
    """
    if not isinstance(document, dict):
        raise ConfigError("scenario document must be a JSON object")
    unknown = sorted(set(document) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(DEFAULTS)
    merged.update(document)
    for key, value in merged.items():
        if key in _OPTIONAL_KEYS and value is None:
            continue
        if key in _STR_KEYS:
            if not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            choices = _KIND_CHOICES.get(key)
            if choices and value not in choices:
                raise ConfigError(
                    f"{key} must be one of {choices}, got {value!r}")
        elif key in _LIST_KEYS:
            if not isinstance(value, list) or any(
                    not isinstance(x, (int, float)) or isinstance(x, bool)
                    for x in value):
                raise ConfigError(f"{key} must be a list of numbers")
        elif key in _INT_KEYS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key} must be an integer")
        else:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{key} must be a number")
    return merged


def load_config(path) -> dict:
    """Read, merge and validate a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            document = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(document)


def config_hash(merged: dict) -> str:
    """sha256 over the canonical serialization of the merged document."""
    canonical = json.dumps(merged, sort_keys=True, separators=(",", ":"),
                           allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def example_config() -> str:
    """The default scenario as a formatted JSON document."""
    return json.dumps(DEFAULTS, indent=2) + "\n"


# ---------------------------------------------------------------------------
# adapters: config dict -> package objects

def to_physical_params(cfg: dict) -> PhysicalParams:
    return PhysicalParams(
        wavelength=cfg["wavelength_nm"] * 1e-9,
        waist=cfg["waist_um"] * 1e-6,
        kappa=cfg["kappa_rad_per_s"],
        dipole_moment=cfg["dipole_moment_coulomb_m"],
        e_vac0=cfg["e_vac0_v_per_cm"] * V_PER_CM,
        gamma=cfg["gamma_rad_per_s"],
        rho_ee0=cfg["excited_fraction"],
    )


def to_velocity_distribution(cfg: dict) -> VelocityDistribution:
    kind = cfg["velocity_kind"]
    if kind == "delta":
        return VelocityDistribution.delta(cfg["velocity_mean_m_per_s"])
    if kind == "truncated-gaussian":
        return VelocityDistribution.truncated_gaussian(
            mean=cfg["velocity_mean_m_per_s"],
            sigma=cfg["velocity_sigma_m_per_s"],
            n_nodes=cfg["velocity_quadrature_nodes"],
        )
    return VelocityDistribution.tabulated(
        velocities=cfg["velocity_tabulated_m_per_s"],
        weights=cfg["velocity_tabulated_weights"],
    )


def scan_pitch(cfg: dict) -> float:
    """Pitch of the z scan grid in metres."""
    points = cfg["scan_points"]
    if points < 2:
        raise ConfigError("scan_points must be at least 2 to define a pitch")
    span = (cfg["scan_z_stop_nm"] - cfg["scan_z_start_nm"]) * 1e-9
    if span <= 0:
        raise ConfigError("scan_z_stop_nm must exceed scan_z_start_nm")
    return span / (points - 1)


def to_kernel(cfg: dict, pitch=None):
    """Position-spread kernel at the scan pitch (or an explicit pitch)."""
    return build_spread_kernel(
        hole_diameter=cfg["hole_diameter_nm"] * 1e-9,
        divergence=cfg["divergence_mrad"] * 1e-3,
        standoff=cfg["standoff_um"] * 1e-6,
        pitch=scan_pitch(cfg) if pitch is None else pitch,
    )
