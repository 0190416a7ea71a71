"""Command-line front door: reproducible forward and inverse pipeline runs.

Every command is a pure function of (config file, flags, seed): rerunning
writes byte-identical payloads, with only the timestamp header line
differing.  Output files carry a manifest header (tool version, command
line, config hash, seed, inputs).  Relative output paths are placed under
$VACSCAN_OUTDIR when that variable is set; nothing else is read from the
environment.

Exit codes: 0 success; 1 acceptance failure; 2 configuration or input
error; 3 Fock-truncation failure; 4 fit refusal or non-convergence.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .averaging import (PositionSpreadKernel, averaged_steady_state,
                        gain_channels)
from .calibration import (FitConvergenceError, FitProblem, FitRefusedError,
                          fit, fit_fixed_scale, fit_linear_regime_N,
                          model_curve)
from .config import (ConfigError, DEFAULTS, config_hash, example_config,
                     load_config, to_kernel, to_physical_params,
                     to_velocity_distribution)
from .deconvolution import SignalSeries, richardson_lucy, to_intensity_axis
from .io import make_manifest, read_csv, write_csv, write_json
from .kinetics import TruncationError, mean_photon, photon_flux
from .physics import AperturePosition, coupling_peak, interaction_time
from .scan import ScanConfig, simulate_scan, surface_map
from .trajectories import (TrajectoryConfig, compare_with_master,
                           multi_atom_condition, run_trajectories)

KCPS = 1000.0  # counts per second in one kilocount per second


def _out_path(name_or_path) -> Path:
    """Resolve an output location; relative paths go under $VACSCAN_OUTDIR."""
    path = Path(name_or_path)
    if not path.is_absolute():
        base = os.environ.get("VACSCAN_OUTDIR")
        if base:
            path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load(args) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config)
    return dict(DEFAULTS)


def _manifest(args, cfg, inputs=()):
    return make_manifest(
        command=" ".join(["vacscan"] + list(args.argv)),
        config_hash=config_hash(cfg) if cfg is not None else "none",
        seed=int(cfg["seed"]) if cfg is not None else 0,
        inputs=[str(p) for p in inputs],
    )


# ---------------------------------------------------------------------------
# commands

def cmd_example_config(args) -> int:
    text = example_config()
    if args.out:
        path = _out_path(args.out)
        path.write_text(text, encoding="utf-8")
        print(f"wrote {path}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_steady(args) -> int:
    cfg = _load(args)
    params = to_physical_params(cfg)
    vdist = to_velocity_distribution(cfg)
    pos = AperturePosition(x=args.x_um * 1e-6, z=args.z_nm * 1e-9)
    dist = averaged_steady_state(pos, params, cfg["n_atoms"], vdist,
                                 kernel=None, n_max=cfg["n_max"])
    if dist.flagged:
        raise TruncationError(
            f"steady state still occupies the top Fock bin at the "
            f"escalated cutoff n_max={dist.n_max}; the pump is outside "
            f"the truncated model's range")
    flux = photon_flux(dist, params.kappa)
    rate = cfg["scale_counts_per_photon"] * flux + cfg["dark_rate_cps"]
    n = np.arange(dist.p.size)
    shown = dist.p >= args.min_probability
    for level, prob in zip(n[shown], dist.p[shown]):
        print(f"p({level:2d}) = {prob:.6e}")
    print(f"mean photon number = {mean_photon(dist.p):.9g}")
    print(f"photon flux        = {flux:.9g} /s")
    print(f"detector rate      = {rate:.9g} cps")
    if args.out:
        path = _out_path(args.out)
        write_csv(path, ["n", "probability"], [n, dist.p],
                  _manifest(args, cfg))
        print(f"wrote {path}")
    return 0


def _scan_config(cfg) -> ScanConfig:
    return ScanConfig.line_scan(
        z_start=cfg["scan_z_start_nm"] * 1e-9,
        z_stop=cfg["scan_z_stop_nm"] * 1e-9,
        points=cfg["scan_points"],
        x=cfg["scan_x_um"] * 1e-6,
        dwell=cfg["dwell_s"],
        scale=cfg["scale_counts_per_photon"],
        dark=cfg["dark_rate_cps"],
        seed=cfg["seed"],
        noise=cfg["noise"],
    )


def cmd_scan(args) -> int:
    cfg = _load(args)
    params = to_physical_params(cfg)
    vdist = to_velocity_distribution(cfg)
    kernel = None if args.no_spread else to_kernel(cfg)
    records = simulate_scan(params, cfg["n_atoms"], vdist, kernel,
                            _scan_config(cfg), n_max=cfg["n_max"])
    path = _out_path(args.out or "scan.csv")
    write_csv(
        path,
        ["x_m", "z_m", "u", "expected_flux_hz", "counts", "rate_cps"],
        [
            np.array([r.position.x for r in records]),
            np.array([r.position.z for r in records]),
            np.array([r.u for r in records]),
            np.array([r.expected_flux for r in records]),
            np.array([r.counts for r in records], dtype=np.int64),
            np.array([r.rate for r in records]),
        ],
        _manifest(args, cfg),
    )
    print(f"wrote {path} ({len(records)} points)")
    if any(r.flagged for r in records):
        print("warning: Fock truncation flagged on some points; "
              "raise n_max", file=sys.stderr)
    return 0


def cmd_map2d(args) -> int:
    cfg = _load(args)
    params = to_physical_params(cfg)
    vdist = to_velocity_distribution(cfg)
    x = np.linspace(cfg["map_x_start_um"] * 1e-6, cfg["map_x_stop_um"] * 1e-6,
                    cfg["map_x_points"])
    z = np.linspace(cfg["map_z_start_nm"] * 1e-9, cfg["map_z_stop_nm"] * 1e-9,
                    cfg["map_z_points"])
    flux = surface_map(params, cfg["n_atoms"], vdist, x, z)
    xx, zz = np.meshgrid(x, z, indexing="ij")
    path = _out_path(args.out or "map2d.csv")
    write_csv(path, ["x_m", "z_m", "flux_hz"],
              [xx.ravel(), zz.ravel(), flux.ravel()],
              _manifest(args, cfg))
    print(f"wrote {path} ({flux.size} points)")
    return 0


def cmd_kernel(args) -> int:
    cfg = _load(args)
    kernel = to_kernel(cfg)
    path = _out_path(args.out or "kernel.csv")
    write_csv(path, ["offset_m", "weight"],
              [kernel.offsets, kernel.weights], _manifest(args, cfg))
    print(f"wrote {path} ({kernel.weights.size} taps)")
    return 0


def cmd_deconvolve(args) -> int:
    cfg = load_config(args.config) if args.config else None
    _, scan_cols = read_csv(args.scan)
    for needed in ("z_m", "rate_cps"):
        if needed not in scan_cols:
            raise ConfigError(f"{args.scan} lacks required column {needed}")
    _, kernel_cols = read_csv(args.kernel)
    for needed in ("offset_m", "weight"):
        if needed not in kernel_cols:
            raise ConfigError(f"{args.kernel} lacks required column {needed}")
    offsets = kernel_cols["offset_m"]
    if offsets.size < 2:
        raise ConfigError(f"{args.kernel} must hold at least two taps")
    kernel = PositionSpreadKernel(offsets=offsets,
                                  weights=kernel_cols["weight"],
                                  pitch=float(offsets[1] - offsets[0]))
    series = SignalSeries(z=scan_cols["z_m"], values=scan_cols["rate_cps"])
    recovered = richardson_lucy(series, kernel, iterations=args.iters,
                                floor=args.epsilon)
    wavelength = (cfg["wavelength_nm"] if cfg else
                  DEFAULTS["wavelength_nm"]) * 1e-9
    z_antinode = None if args.antinode is None else args.antinode * 1e-9
    u, _ = to_intensity_axis(recovered, wavelength, z_antinode)
    path = _out_path(args.out or "deconvolved.csv")
    write_csv(path, ["z_m", "rate_cps", "deconvolved_cps", "u"],
              [series.z, series.values, recovered.values, u],
              _manifest(args, cfg, inputs=[args.scan, args.kernel]))
    print(f"wrote {path} ({args.iters} iterations)")
    return 0


def cmd_fit(args) -> int:
    cfg = _load(args)
    params = to_physical_params(cfg)
    vdist = to_velocity_distribution(cfg)
    _, cols = read_csv(args.data)
    rate_col = "deconvolved_cps" if "deconvolved_cps" in cols else "rate_cps"
    if rate_col not in cols:
        raise ConfigError(
            f"{args.data} lacks a rate column (deconvolved_cps or rate_cps)")
    if "u" in cols:
        u = cols["u"]
    elif "z_m" in cols:
        u = np.cos(2.0 * np.pi * cols["z_m"] / params.wavelength) ** 2
    else:
        raise ConfigError(f"{args.data} lacks both u and z_m columns")
    y = cols[rate_col] / KCPS
    y_err = cols["rate_err_cps"] / KCPS if "rate_err_cps" in cols else None
    u_min, u_max = args.window
    problem = FitProblem(u=u, y=y, params=params, vdist=vdist,
                         u_min=u_min, u_max=u_max, y_err=y_err,
                         n_max=cfg["n_max"])
    if args.linear_N:
        if args.fix_scale is None:
            raise ConfigError("--linear-N requires --fix-scale "
                              "(E is taken from the config)")
        linear = fit_linear_regime_N(problem, cfg["e_vac0_v_per_cm"],
                                     args.fix_scale)
        payload = {
            "mode": "linear-N",
            "n_atoms": linear.n_atoms,
            "n_atoms_sigma": linear.sigma,
            "e_vac0_v_per_cm": cfg["e_vac0_v_per_cm"],
            "scale_kcps": args.fix_scale,
            "chi2": linear.chi2,
            "n_points": linear.n_points,
        }
        n_fit, e_fit, s_fit = (linear.n_atoms, cfg["e_vac0_v_per_cm"],
                               args.fix_scale)
    elif args.fix_scale is not None:
        result = fit_fixed_scale(problem, args.fix_scale)
        payload = {"mode": "fixed-scale", **result.to_dict()}
        n_fit, e_fit, s_fit = result.n_atoms, result.e_vac0, result.scale
    else:
        result = fit(problem)
        payload = {"mode": "full", **result.to_dict()}
        n_fit, e_fit, s_fit = result.n_atoms, result.e_vac0, result.scale
    path = _out_path(args.out or "fit.json")
    write_json(path, payload, _manifest(args, cfg, inputs=[args.data]))
    keep = (u >= u_min) & (u <= u_max) & np.isfinite(y)
    model = s_fit * np.asarray(
        model_curve(n_fit, e_fit, u[keep], params, vdist, n_max=cfg["n_max"]))
    overlay = _out_path(args.overlay or "fit_overlay.csv")
    write_csv(overlay, ["u", "measured_kcps", "model_kcps"],
              [u[keep], y[keep], model],
              _manifest(args, cfg, inputs=[args.data]))
    print(f"mean atom number  = {n_fit:.6g}")
    print(f"vacuum field      = {e_fit:.6g} V/cm")
    print(f"detector scale    = {s_fit:.6g} kcps per unit mean photon")
    print(f"wrote {path} and {overlay}")
    if payload.get("warnings"):
        for w in payload["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_trajectories(args) -> int:
    cfg = _load(args)
    params = to_physical_params(cfg)
    vdist = to_velocity_distribution(cfg)
    pos = AperturePosition(x=cfg["traj_x_um"] * 1e-6,
                           z=cfg["traj_z_nm"] * 1e-9)
    channels = gain_channels(pos, params, cfg["n_atoms"], vdist, kernel=None)
    start = cfg["traj_checkpoint_start_us"]
    tconfig = TrajectoryConfig(
        n_trajectories=cfg["traj_n_trajectories"],
        t_total=cfg["traj_t_total_us"] * 1e-6,
        seed=cfg["seed"],
        a_max=cfg["traj_a_max"],
        n_max=cfg["traj_n_max"],
        n_checkpoints=cfg["traj_checkpoints"],
        checkpoint_start=None if start is None else start * 1e-6,
        initial_state=cfg["traj_initial_state"],
    )
    reference_dist = averaged_steady_state(pos, params, cfg["n_atoms"], vdist,
                                           kernel=None,
                                           n_max=cfg["traj_n_max"])
    initial = (reference_dist.p
               if tconfig.parse_initial_state()[0] == "steady" else None)
    ensemble = run_trajectories(tconfig, channels, params.kappa,
                                initial_distribution=initial)
    reference = mean_photon(reference_dist.p)
    comparison = compare_with_master(ensemble, reference)
    path = _out_path(args.out or "trajectories.csv")
    write_csv(path, ["t_s", "mean_photon", "stderr"],
              [ensemble.times, ensemble.mean_photon, ensemble.stderr],
              _manifest(args, cfg))
    tau = interaction_time(vdist.mean, params)
    report = {
        "master_mean_photon": reference,
        "z_scores": comparison.z_scores.tolist(),
        "max_abs_z": comparison.max_abs_z,
        "passed": comparison.passed,
        "threshold": comparison.threshold,
        "overflow_fraction": ensemble.overflow_fraction,
        "n_arrivals": ensemble.n_arrivals,
        "top_bin_max": ensemble.top_bin_max,
        "max_norm_increase": ensemble.max_norm_increase,
        "flagged": ensemble.flagged,
        "jump_log_digest": ensemble.jump_log_digest,
        "multi_atom_condition": multi_atom_condition(
            coupling_peak(params), tau, reference),
    }
    jpath = _out_path(args.json or "trajectories.json")
    write_json(jpath, report, _manifest(args, cfg))
    print(f"ensemble mean at final checkpoint = "
          f"{ensemble.mean_photon[-1]:.6g} ± {ensemble.stderr[-1]:.2g}")
    print(f"master steady mean                = {reference:.6g}")
    print(f"max |z| = {comparison.max_abs_z:.2f} "
          f"({'pass' if comparison.passed else 'FAIL'})")
    print(f"wrote {path} and {jpath}")
    return 0


def cmd_acceptance(args) -> int:
    from . import acceptance
    if args.config:
        load_config(args.config)  # exit-2 contract: validate if given
    if args.list:
        for crit in acceptance.CRITERIA:
            print(f"{crit.ident}  {crit.title}")
        return 0
    selected = acceptance.CRITERIA
    if args.only:
        selected = [c for c in acceptance.CRITERIA if c.ident == args.only]
        if not selected:
            known = ", ".join(c.ident for c in acceptance.CRITERIA)
            raise ConfigError(f"unknown criterion {args.only!r}; one of {known}")
    all_passed = True
    for crit in selected:
        outcome = crit.run()
        status = "PASS" if outcome.passed else "FAIL"
        all_passed &= outcome.passed
        print(f"{status}  {crit.ident}  {crit.title}  "
              f"[{outcome.runtime_s:.1f} s]  {outcome.detail}")
    print("all criteria passed" if all_passed else "some criteria FAILED")
    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# argument parsing

def _add_config(p):
    p.add_argument("--config", "-c", metavar="JSON",
                   help="scenario file (defaults merged in; "
                        "omit to use the built-in defaults)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vacscan",
        description="Simulate and calibrate vacuum-field scans of a "
                    "single-atom-pumped cavity.")
    parser.add_argument("--version", action="version",
                        version=f"vacscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("example-config",
                       help="print the default scenario document")
    p.add_argument("--out", "-o", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_example_config)

    p = sub.add_parser("steady",
                       help="steady photon statistics at one position")
    _add_config(p)
    p.add_argument("--x-um", type=float, default=0.0,
                   help="transverse position (µm)")
    p.add_argument("--z-nm", type=float, default=0.0,
                   help="axial position (nm); 0 is an antinode")
    p.add_argument("--min-probability", type=float, default=1e-9,
                   help="hide p(n) rows below this value")
    p.add_argument("--out", "-o", help="also write the distribution as CSV")
    p.set_defaults(func=cmd_steady)

    p = sub.add_parser("scan", help="simulate a detector line scan")
    _add_config(p)
    p.add_argument("--out", "-o", help="output CSV (default scan.csv)")
    p.add_argument("--no-spread", action="store_true",
                   help="disable the nanohole position-spread kernel")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("map2d", help="weak-pump flux map over (x, z)")
    _add_config(p)
    p.add_argument("--out", "-o", help="output CSV (default map2d.csv)")
    p.set_defaults(func=cmd_map2d)

    p = sub.add_parser("kernel",
                       help="export the position-spread kernel at scan pitch")
    _add_config(p)
    p.add_argument("--out", "-o", help="output CSV (default kernel.csv)")
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("deconvolve",
                       help="remove the position spread from a scan")
    p.add_argument("scan", help="scan CSV (z_m, rate_cps)")
    p.add_argument("kernel", help="kernel CSV (offset_m, weight)")
    _add_config(p)
    p.add_argument("--iters", type=int, default=50,
                   help="Richardson-Lucy iterations (default 50)")
    p.add_argument("--epsilon", type=float, default=None,
                   help="division floor (default: 1e-12 of the series max)")
    p.add_argument("--antinode", type=float, default=None, metavar="Z_NM",
                   help="antinode position for the u axis "
                        "(default: estimated from the data)")
    p.add_argument("--out", "-o", help="output CSV (default deconvolved.csv)")
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("fit", help="calibrate (⟨N⟩, E, scale) from a scan")
    p.add_argument("data", help="deconvolved CSV (u + deconvolved_cps, "
                                "or any z_m + rate_cps table)")
    _add_config(p)
    p.add_argument("--fix-scale", type=float, default=None, metavar="KCPS",
                   help="hold the detector scale fixed (kcps per unit ⟨n⟩)")
    p.add_argument("--linear-N", action="store_true",
                   help="weak-pump one-parameter ⟨N⟩ fit "
                        "(needs --fix-scale; E from the config)")
    p.add_argument("--window", type=float, nargs=2, default=(0.5, 1.0),
                   metavar=("U_MIN", "U_MAX"),
                   help="u fit window (default 0.5 1.0)")
    p.add_argument("--out", "-o", help="result JSON (default fit.json)")
    p.add_argument("--overlay", help="overlay CSV (default fit_overlay.csv)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("trajectories",
                       help="Monte-Carlo wavefunction cross-check")
    _add_config(p)
    p.add_argument("--out", "-o", help="ensemble CSV (default trajectories.csv)")
    p.add_argument("--json", help="report JSON (default trajectories.json)")
    p.set_defaults(func=cmd_trajectories)

    p = sub.add_parser("acceptance", help="run the acceptance criteria")
    _add_config(p)
    p.add_argument("--list", action="store_true",
                   help="print criterion IDs without running")
    p.add_argument("--only", metavar="ID", help="run a single criterion")
    p.set_defaults(func=cmd_acceptance)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TruncationError as exc:
        print(f"truncation error: {exc}", file=sys.stderr)
        return 3
    except (FitRefusedError, FitConvergenceError) as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
