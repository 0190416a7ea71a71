"""Scenario-document validation, hashing, and adapter tests."""

import json

import pytest
from hypothesis import given, strategies as st

from vacscan.config import (ConfigError, DEFAULTS, config_hash, example_config,
                            load_config, scan_pitch, to_kernel,
                            to_physical_params, to_velocity_distribution,
                            validate_config)
from vacscan.physics import V_PER_CM


# ---------------------------------------------------------------------------
# validation

def test_empty_document_merges_to_defaults():
    merged = validate_config({})
    assert merged == DEFAULTS
    assert merged is not DEFAULTS  # caller gets an independent copy


def test_partial_document_overrides_only_named_keys():
    merged = validate_config({"n_atoms": 0.25, "seed": 7})
    assert merged["n_atoms"] == 0.25
    assert merged["seed"] == 7
    untouched = {k: v for k, v in merged.items() if k not in ("n_atoms", "seed")}
    assert untouched == {k: v for k, v in DEFAULTS.items()
                         if k not in ("n_atoms", "seed")}


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError, match="n_atomz"):
        validate_config({"n_atomz": 1.5})


def test_multiple_unknown_keys_all_reported():
    with pytest.raises(ConfigError, match="aaa.*zzz"):
        validate_config({"zzz": 1, "aaa": 2})


def test_non_object_document_rejected():
    with pytest.raises(ConfigError, match="JSON object"):
        validate_config([1, 2, 3])


@pytest.mark.parametrize("key,bad", [
    ("velocity_kind", 3.0),            # string key, number given
    ("velocity_kind", "warp"),         # not one of the choices
    ("noise", "gaussian"),             # not one of the choices
    ("velocity_tabulated_m_per_s", 700.0),      # list key, scalar given
    ("velocity_tabulated_weights", [1.0, True]),  # bool is not a number
    ("scan_points", 65.0),             # int key, float given
    ("scan_points", True),             # bool is not an int
    ("n_atoms", "1.5"),                # number key, string given
    ("n_atoms", True),                 # bool is not a number
    ("traj_checkpoint_start_us", "soon"),  # optional key still type-checked
])
def test_wrong_shapes_rejected(key, bad):
    with pytest.raises(ConfigError, match=key):
        validate_config({key: bad})


def test_optional_checkpoint_start_accepts_none_and_number():
    assert validate_config({})["traj_checkpoint_start_us"] is None
    merged = validate_config({"traj_checkpoint_start_us": 12.0})
    assert merged["traj_checkpoint_start_us"] == 12.0


# ---------------------------------------------------------------------------
# hashing

def test_config_hash_is_stable_and_order_independent():
    a = validate_config({"n_atoms": 1.1, "seed": 3})
    b = validate_config({"seed": 3, "n_atoms": 1.1})
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64
    assert config_hash(a) == config_hash(a)


def test_config_hash_sensitive_to_every_changed_value():
    base = config_hash(validate_config({}))
    assert config_hash(validate_config({"seed": 1})) != base
    assert config_hash(validate_config({"dwell_s": 2.0})) != base


# ---------------------------------------------------------------------------
# example document and file loading

def test_example_config_is_the_validated_default_document():
    text = example_config()
    assert text.endswith("\n")
    assert validate_config(json.loads(text)) == DEFAULTS


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"n_atoms": 0.5}), encoding="utf-8")
    assert load_config(path)["n_atoms"] == 0.5


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.json")


def test_load_config_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


# ---------------------------------------------------------------------------
# adapters

def test_physical_params_unit_conversions():
    cfg = validate_config({"e_vac0_v_per_cm": 0.86, "wavelength_nm": 791.0,
                           "waist_um": 43.0})
    params = to_physical_params(cfg)
    assert params.e_vac0 == pytest.approx(0.86 * V_PER_CM, rel=1e-15)
    assert params.e_vac0 == pytest.approx(86.0, rel=1e-15)  # V/cm -> V/m is x100
    assert params.wavelength == pytest.approx(791e-9, rel=1e-15)
    assert params.waist == pytest.approx(43e-6, rel=1e-15)
    assert params.kappa == cfg["kappa_rad_per_s"]


def test_velocity_adapter_delta():
    cfg = validate_config({"velocity_kind": "delta",
                           "velocity_mean_m_per_s": 700.0})
    vdist = to_velocity_distribution(cfg)
    v, w = vdist.quadrature()
    assert v.tolist() == [700.0] and w.tolist() == [1.0]


def test_velocity_adapter_truncated_gaussian_node_count():
    cfg = validate_config({"velocity_quadrature_nodes": 5})
    v, w = to_velocity_distribution(cfg).quadrature()
    assert v.size == 5
    assert w.sum() == pytest.approx(1.0, rel=1e-12)


def test_velocity_adapter_tabulated():
    cfg = validate_config({
        "velocity_kind": "tabulated",
        "velocity_tabulated_m_per_s": [600.0, 800.0],
        "velocity_tabulated_weights": [1.0, 3.0],
    })
    vdist = to_velocity_distribution(cfg)
    assert vdist.mean == pytest.approx(750.0, rel=1e-12)


def test_scan_pitch_default_grid():
    cfg = validate_config({})
    span = (cfg["scan_z_stop_nm"] - cfg["scan_z_start_nm"]) * 1e-9
    assert scan_pitch(cfg) == pytest.approx(span / 64, rel=1e-12)


@pytest.mark.parametrize("patch,msg", [
    ({"scan_points": 1}, "at least 2"),
    ({"scan_z_stop_nm": -500.0}, "must exceed"),
])
def test_scan_pitch_rejects_degenerate_grids(patch, msg):
    with pytest.raises(ConfigError, match=msg):
        scan_pitch(validate_config(patch))


def test_kernel_adapter_uses_scan_pitch_and_override():
    cfg = validate_config({})
    kernel = to_kernel(cfg)
    assert kernel.pitch == pytest.approx(scan_pitch(cfg), rel=1e-12)
    assert kernel.weights.sum() == pytest.approx(1.0, rel=1e-12)
    wide = to_kernel(cfg, pitch=2.0e-9)
    assert wide.pitch == pytest.approx(2.0e-9, rel=1e-12)
    assert wide.weights.size > kernel.weights.size


# ---------------------------------------------------------------------------
# properties

_overridable = sorted(k for k, v in DEFAULTS.items()
                      if isinstance(v, (int, float)) and not isinstance(v, bool)
                      and k != "traj_checkpoint_start_us")


@pytest.mark.property
@given(st.data())
def test_hash_changes_when_any_numeric_value_changes(data):
    key = data.draw(st.sampled_from(_overridable))
    default = DEFAULTS[key]
    if key in ("scan_points", "velocity_quadrature_nodes", "map_x_points",
               "map_z_points", "n_max", "traj_n_trajectories", "traj_a_max",
               "traj_n_max", "traj_checkpoints", "seed"):
        value = data.draw(st.integers(min_value=0, max_value=10**6)
                          .filter(lambda x: x != default))
    else:
        value = data.draw(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
            .filter(lambda x: x != default))
    merged = validate_config({key: value})
    assert config_hash(merged) != config_hash(validate_config({}))


@pytest.mark.property
@given(st.dictionaries(
    keys=st.sampled_from(["n_atoms", "dwell_s", "seed", "scan_points"]),
    values=st.just(None), max_size=4))
def test_validate_is_idempotent_over_key_subsets(subset):
    document = {"n_atoms": 0.7, "dwell_s": 2.0, "seed": 11, "scan_points": 33}
    picked = {k: document[k] for k in subset}
    once = validate_config(picked)
    assert validate_config(once) == once
