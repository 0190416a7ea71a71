"""Monte-Carlo wavefunction engine: exactness oracles, conservation laws,
determinism, and the statistical cross-check against the kinetics model."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from vacscan.kinetics import GainChannel, mean_photon, steady_state_product_channels
from vacscan.trajectories import (
    MULTI_ATOM_MARGIN,
    TrajectoryConfig,
    TrajectoryEnsemble,
    _effective_hamiltonian,
    _KSpace,
    compare_with_master,
    multi_atom_condition,
    run_trajectories,
)

KAPPA = 2e5
TAU = 1e-6


def block_to_flat(psi, k, n_max):
    """Map the (N, bits) block layout onto the flat index n·2^k + bits."""
    s = 1 << k
    flat = np.zeros((n_max + 1) * s, dtype=complex)
    for big_n in range(psi.shape[0]):
        for bits in range(s):
            n = big_n - bin(bits).count("1")
            if 0 <= n <= n_max:
                flat[n * s + bits] = psi[big_n, bits]
    return flat


def random_block_state(ks, rng):
    """Normalized random state supported on the valid (N, bits) entries."""
    psi = (rng.standard_normal(ks.valid.shape)
           + 1j * rng.standard_normal(ks.valid.shape))
    psi = np.where(ks.valid, psi, 0.0)
    return psi / math.sqrt(float(np.vdot(psi, psi).real))


# --- block propagation against the dense reference Hamiltonian ---------------

@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_block_propagation_matches_dense_expm(k):
    n_max = 6
    g = 7.3e5
    rng = np.random.Generator(np.random.Philox(42 + k))
    ks = _KSpace(k, g, KAPPA, n_max)
    psi0 = random_block_state(ks, rng)
    t = 2.7e-6
    phi0 = ks.vinv @ psi0[..., None]
    psi_t = (ks.v @ (np.exp(-1j * t * ks.w)[..., None] * phi0))[..., 0]

    h = _effective_hamiltonian(k, g, KAPPA, n_max + 1)
    flat_t = expm(-1j * t * h) @ block_to_flat(psi0, k, n_max)
    np.testing.assert_allclose(block_to_flat(psi_t, k, n_max), flat_t,
                               rtol=0, atol=1e-10)


def test_structural_zeros_stay_zero():
    k, n_max = 2, 5
    rng = np.random.Generator(np.random.Philox(7))
    ks = _KSpace(k, 5e5, KAPPA, n_max)
    psi0 = random_block_state(ks, rng)
    phi0 = ks.vinv @ psi0[..., None]
    psi_t = (ks.v @ (np.exp(-1j * 3e-6 * ks.w)[..., None] * phi0))[..., 0]
    assert np.abs(psi_t[~ks.valid]).max() < 1e-12


def test_lowering_operator_matches_flat_layout():
    k, n_max = 2, 5
    rng = np.random.Generator(np.random.Philox(11))
    ks = _KSpace(k, 5e5, KAPPA, n_max)
    psi = random_block_state(ks, rng)
    lowered = ks.lower(psi)
    s = 1 << k
    flat = block_to_flat(psi, k, n_max).reshape(n_max + 1, s)
    expect = np.zeros_like(flat)
    for n in range(1, n_max + 1):
        expect[n - 1] += math.sqrt(n) * flat[n]
    np.testing.assert_allclose(block_to_flat(lowered, k, n_max),
                               expect.reshape(-1), rtol=0, atol=1e-12)


# --- exact dynamical scenarios -----------------------------------------------

def test_pure_decay_tracks_exponential():
    config = TrajectoryConfig(n_trajectories=500, t_total=2e-6, seed=99,
                              a_max=1, n_max=12, n_checkpoints=4,
                              checkpoint_start=5e-7, initial_state="fock:8")
    ens = run_trajectories(config, [], KAPPA * 10)
    expected = 8.0 * np.exp(-KAPPA * 10 * ens.times)
    cmp = compare_with_master(ens, expected)
    assert cmp.passed, f"z-scores {cmp.z_scores}"
    assert np.all(ens.jump_counts <= 8)
    assert not ens.flagged


def test_full_rabi_flop_traps_the_vacuum():
    # g·tau = pi and kappa = 0: a lone transit is one complete Rabi cycle, so
    # the atom leaves excited and an idle cavity is exactly empty; checkpoints
    # landing mid-transit see only the virtual photon of the flop (≤ 1)
    g = math.pi / TAU
    channels = [GainChannel(0.5 / TAU, g, TAU)]
    config = TrajectoryConfig(n_trajectories=50, t_total=12e-6, seed=5,
                              a_max=1, n_max=6, n_checkpoints=5,
                              initial_state="vacuum")
    ens = run_trajectories(config, channels, kappa=0.0)
    vals = ens.per_trajectory
    assert np.all((vals >= 0.0) & (vals <= 1.0 + 1e-12))
    # the trapped field is exactly vacuum whenever no atom is in flight
    idle = float(np.mean(vals == 0.0))
    assert idle > 0.2
    np.testing.assert_array_equal(ens.jump_counts, np.zeros(50, dtype=np.int64))


def test_emitted_photons_bounded_by_delivered_excitations():
    channels = [GainChannel(1.0 / TAU, 4e5, TAU)]
    config = TrajectoryConfig(n_trajectories=200, t_total=10e-6, seed=17,
                              a_max=3, n_max=15, n_checkpoints=3,
                              initial_state="vacuum")
    ens = run_trajectories(config, channels, KAPPA)
    # every emitted photon traces back to one atom's single excitation
    assert int(ens.jump_counts.sum()) <= ens.n_arrivals
    assert ens.max_norm_increase <= 1e-9


def test_single_atom_limit_matches_product_state():
    # rare transits (occupancy 0.05): the sequential-pumping master equation
    # is near-exact, so seeded trajectories must agree at every checkpoint
    g = 0.5 / TAU
    channels = [GainChannel(0.05 / TAU, g, TAU)]
    dist = steady_state_product_channels(channels, KAPPA, n_max=8,
                                         escalate=False)
    config = TrajectoryConfig(n_trajectories=1500, t_total=40e-6, seed=23,
                              a_max=2, n_max=8, n_checkpoints=4,
                              checkpoint_start=20e-6,
                              initial_state="steady-sample")
    ens = run_trajectories(config, channels, KAPPA,
                           initial_distribution=dist.p)
    cmp = compare_with_master(ens, mean_photon(dist.p))
    assert cmp.passed, f"z-scores {cmp.z_scores}"
    assert not ens.flagged


# --- determinism and flags ---------------------------------------------------

def test_fixed_seed_reproduces_bit_identical_results():
    channels = [GainChannel(1.0 / TAU, 3e5, TAU)]
    config = TrajectoryConfig(n_trajectories=60, t_total=5e-6, seed=31,
                              a_max=2, n_max=10, n_checkpoints=3)
    a = run_trajectories(config, channels, KAPPA)
    b = run_trajectories(config, channels, KAPPA)
    assert a.jump_log_digest == b.jump_log_digest
    assert len(a.jump_log_digest) == 64
    np.testing.assert_array_equal(a.per_trajectory, b.per_trajectory)
    c = run_trajectories(
        TrajectoryConfig(n_trajectories=60, t_total=5e-6, seed=32,
                         a_max=2, n_max=10, n_checkpoints=3), channels, KAPPA)
    assert c.jump_log_digest != a.jump_log_digest


def test_overflow_flagging_under_heavy_overlap():
    channels = [GainChannel(3.0 / TAU, 2e5, TAU)]  # ~3 atoms in flight, cap 1
    config = TrajectoryConfig(n_trajectories=30, t_total=6e-6, seed=3,
                              a_max=1, n_max=10, n_checkpoints=2)
    ens = run_trajectories(config, channels, KAPPA)
    assert ens.overflow_fraction > 0.3
    assert ens.flagged


def test_fock_cap_flagging():
    config = TrajectoryConfig(n_trajectories=5, t_total=1e-6, seed=1,
                              a_max=1, n_max=4, n_checkpoints=2,
                              initial_state="fock:4")
    ens = run_trajectories(config, [], KAPPA)
    assert ens.top_bin_max > 1e-6
    assert ens.flagged


# --- interface contracts -----------------------------------------------------

def test_channels_must_share_one_coupling():
    channels = [GainChannel(1e5, 3e5, TAU), GainChannel(1e5, 4e5, TAU)]
    config = TrajectoryConfig(n_trajectories=2, t_total=1e-6, seed=0)
    with pytest.raises(ValueError, match="share one coupling"):
        run_trajectories(config, channels, KAPPA)


def test_steady_sample_requires_distribution():
    config = TrajectoryConfig(n_trajectories=2, t_total=1e-6, seed=0,
                              initial_state="steady-sample")
    with pytest.raises(ValueError, match="initial_distribution"):
        run_trajectories(config, [], KAPPA)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown initial_state"):
        TrajectoryConfig(n_trajectories=1, t_total=1e-6, seed=0,
                         initial_state="coherent")
    with pytest.raises(ValueError, match="outside"):
        TrajectoryConfig(n_trajectories=1, t_total=1e-6, seed=0, n_max=5,
                         initial_state="fock:9")
    with pytest.raises(ValueError, match="bad fock level"):
        TrajectoryConfig(n_trajectories=1, t_total=1e-6, seed=0,
                         initial_state="fock:x")
    with pytest.raises(ValueError, match="checkpoint_start"):
        TrajectoryConfig(n_trajectories=1, t_total=1e-6, seed=0,
                         checkpoint_start=2e-6)


def test_checkpoint_times_layout():
    cfg = TrajectoryConfig(n_trajectories=1, t_total=10e-6, seed=0,
                           n_checkpoints=5)
    times = cfg.checkpoint_times()
    np.testing.assert_allclose(times, np.linspace(2e-6, 10e-6, 5))
    cfg2 = TrajectoryConfig(n_trajectories=1, t_total=10e-6, seed=0,
                            n_checkpoints=3, checkpoint_start=4e-6)
    np.testing.assert_allclose(cfg2.checkpoint_times(),
                               np.linspace(4e-6, 10e-6, 3))


def test_multi_atom_condition_values():
    assert multi_atom_condition(0.0, TAU, 5.0) == 0.0
    assert multi_atom_condition(math.pi / TAU, TAU, 0.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        multi_atom_condition(1e5, TAU, -1.0)
    assert MULTI_ATOM_MARGIN == 0.3


def test_compare_with_master_edge_cases():
    ens = TrajectoryEnsemble(
        times=np.array([1.0, 2.0]), mean_photon=np.array([1.0, 2.0]),
        stderr=np.array([0.0, 0.1]), per_trajectory=np.zeros((1, 2)),
        jump_counts=np.zeros(1, dtype=np.int64), jump_log_digest="",
        overflow_fraction=0.0, n_arrivals=0, top_bin_max=0.0,
        max_norm_increase=0.0, flagged=False)
    exact = compare_with_master(ens, np.array([1.0, 2.0]))
    assert exact.passed and exact.max_abs_z == 0.0
    off = compare_with_master(ens, np.array([1.5, 2.0]))
    assert not off.passed and np.isinf(off.max_abs_z)
    scalar = compare_with_master(ens, 2.0)
    assert np.isinf(scalar.max_abs_z)  # broadcast against zero stderr


# --- randomized invariants ---------------------------------------------------

scenario = st.fixed_dictionaries({
    "g": st.floats(0.0, 8e5),
    "kappa": st.one_of(st.just(0.0), st.floats(1e4, 5e5)),
    "occupancy": st.floats(0.0, 1.5),
    "seed": st.integers(0, 2**31 - 1),
    "level": st.integers(0, 3),
})


@pytest.mark.property
@given(scenario)
def test_norm_never_increases_and_conservation(sc):
    channels = ([GainChannel(sc["occupancy"] / TAU, sc["g"], TAU)]
                if sc["occupancy"] > 0 else [])
    config = TrajectoryConfig(n_trajectories=2, t_total=3e-6, seed=sc["seed"],
                              a_max=2, n_max=6, n_checkpoints=2,
                              initial_state=f"fock:{sc['level']}")
    ens = run_trajectories(config, channels, sc["kappa"])
    # between-jump evolution under H_eff can only lose norm (up to roundoff)
    assert ens.max_norm_increase <= 1e-9
    # photon book-keeping: each jump removes one photon, each transit
    # delivers at most one excitation
    assert int(ens.jump_counts.sum()) <= ens.n_arrivals + 2 * sc["level"]
    assert np.all(ens.mean_photon >= 0.0)
    assert np.all(ens.mean_photon <= config.n_max)
    if sc["kappa"] == 0.0:
        assert int(ens.jump_counts.sum()) == 0


@pytest.mark.property
@given(st.integers(0, 2**31 - 1))
def test_rerun_digest_is_bit_identical(seed):
    channels = [GainChannel(0.8 / TAU, 2.5e5, TAU)]
    config = TrajectoryConfig(n_trajectories=2, t_total=2e-6, seed=seed,
                              a_max=2, n_max=6, n_checkpoints=2)
    a = run_trajectories(config, channels, KAPPA)
    b = run_trajectories(config, channels, KAPPA)
    assert a.jump_log_digest == b.jump_log_digest
    np.testing.assert_array_equal(a.per_trajectory, b.per_trajectory)
