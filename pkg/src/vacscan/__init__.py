"""vacscan — simulate and calibrate a vacuum-field scan of an optical cavity.

A single-atom beam, collimated by a nanohole array, probes the standing-wave
vacuum field of a high-finesse cavity.  The forward path simulates the
photon statistics of the pumped cavity and the detector record of an
aperture scan; the inverse path deconvolves the atomic position spread and
recovers the vacuum-field amplitude, the mean atom number and the detector
scale from the scan by a chi-square fit.
"""

__version__ = "0.1.0"

from .physics import (
    AperturePosition,
    PhysicalParams,
    TopHatBox,
    coupling_at,
    coupling_peak,
    effective_mean_atom_number,
    interaction_time,
    mode_function,
    relative_intensity,
)
from .kinetics import (
    GainChannel,
    PhotonDistribution,
    PumpParams,
    evolve,
    gain_map,
    linear_regime_output,
    loss_rate,
    mean_photon,
    photon_flux,
    steady_state_product,
)
from .averaging import (
    PositionSpreadKernel,
    VelocityDistribution,
    averaged_mean_photon,
    averaged_steady_state,
    build_spread_kernel,
    gain_channels,
)
from .scan import (
    ScanConfig,
    ScanRecord,
    background_flux,
    simulate_scan,
    surface_map,
)
from .deconvolution import (
    RichardsonLucyDeconvolver,
    SignalSeries,
    convolution_matrix,
    estimate_antinode,
    richardson_lucy,
    to_intensity_axis,
)
from .calibration import (
    CavityVacuumFitter,
    FitProblem,
    FitRefusedError,
    FitResult,
    fit,
    fit_fixed_scale,
    fit_linear_regime_N,
    model_curve,
    optimal_scale,
    validity_filter,
)
from .trajectories import (
    TrajectoryConfig,
    TrajectoryEnsemble,
    compare_with_master,
    multi_atom_condition,
    run_trajectories,
)

__all__ = [
    "__version__",
    "AperturePosition", "PhysicalParams", "TopHatBox",
    "mode_function", "coupling_at", "coupling_peak", "interaction_time",
    "effective_mean_atom_number", "relative_intensity",
    "PhotonDistribution", "PumpParams", "GainChannel",
    "gain_map", "loss_rate", "evolve", "steady_state_product",
    "mean_photon", "photon_flux", "linear_regime_output",
    "VelocityDistribution", "PositionSpreadKernel", "build_spread_kernel",
    "gain_channels", "averaged_steady_state", "averaged_mean_photon",
    "ScanConfig", "ScanRecord", "simulate_scan", "background_flux", "surface_map",
    "SignalSeries", "convolution_matrix", "richardson_lucy",
    "estimate_antinode", "to_intensity_axis", "RichardsonLucyDeconvolver",
    "FitProblem", "FitResult", "FitRefusedError", "validity_filter",
    "model_curve", "optimal_scale", "fit", "fit_fixed_scale",
    "fit_linear_regime_N", "CavityVacuumFitter",
    "TrajectoryConfig", "TrajectoryEnsemble", "run_trajectories",
    "multi_atom_condition", "compare_with_master",
]
