import math

import numpy as np
import pytest

from lib.covariance_model import path_covariance
from lib.scenario_geometry import (
    ArrayGeometry,
    ArrayKind,
    GeometryMismatchError,
    PropagationPath,
    Scenario,
    ScenarioError,
    UePlacement,
    dbm_to_watts,
    layout_from_dict,
    load_layout,
    load_scenario,
    path_responses,
    sample_channel,
    sample_channels,
    ula_response,
    upa_response,
    watts_to_dbm,
)
from tests.conftest import SCENARIOS, make_scenario


def _scenario(paths, kappa=0.0, **overrides) -> Scenario:
    fields = dict(
        bs_array=ArrayGeometry.ula(4),
        ue_arrays=(ArrayGeometry.ula(2),),
        paths=(tuple(paths),),
        ricean_factor=kappa,
        pathloss_exponent=2.0,
        rho_bs=1.0,
        rho_ue=1.0,
        sigma2_bs=1.0,
        sigma2_ue=1.0,
    )
    fields.update(overrides)
    return Scenario(**fields)


# ----------------------------------------------------------------
# Units and array responses
# ----------------------------------------------------------------
def test_dbm_conversion():
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert dbm_to_watts(-80.0) == pytest.approx(1e-11)
    assert watts_to_dbm(dbm_to_watts(25.0)) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        watts_to_dbm(0.0)


def test_ula_response_is_unit_modulus_phase_ramp():
    geometry = ArrayGeometry.ula(8)
    a = ula_response(geometry, 0.3)
    assert a.shape == (8,)
    np.testing.assert_allclose(np.abs(a), 1.0)
    assert a[0] == pytest.approx(1.0)
    np.testing.assert_allclose(a[1:] / a[:-1], np.exp(-1j * math.pi * math.cos(0.3)))
    np.testing.assert_allclose(ula_response(geometry, math.pi / 2), np.ones(8), atol=1e-12)


def test_ula_response_at_sixty_degrees():
    a = ula_response(ArrayGeometry.ula(3), math.pi / 3)
    np.testing.assert_allclose(a, [1.0, -1j, -1.0], atol=1e-12)


def test_ula_response_rejects_planar_array():
    with pytest.raises(GeometryMismatchError):
        ula_response(ArrayGeometry.upa(4, 2), 0.1)


def test_upa_response_factorizes():
    geometry = ArrayGeometry.upa(4, 3)
    phi, psi = 0.7, 0.2
    b = upa_response(geometry, phi, psi)
    assert b.shape == (12,)
    azimuth = np.exp(-1j * math.pi * np.arange(4) * math.cos(phi))
    elevation = np.exp(-1j * math.pi * np.arange(3) * math.sin(psi))
    np.testing.assert_allclose(b, np.kron(azimuth, elevation))
    # a ULA is a single elevation row
    np.testing.assert_allclose(upa_response(ArrayGeometry.ula(4), phi, psi), azimuth)


@pytest.mark.parametrize("mx, my", [(0, 1), (4, 0)])
def test_array_geometry_rejects_empty_axes(mx, my):
    with pytest.raises(ValueError):
        ArrayGeometry(ArrayKind.UPA, mx, my)


def test_ula_has_one_elevation_row():
    with pytest.raises(ValueError):
        ArrayGeometry(ArrayKind.ULA, 4, 2)


# ----------------------------------------------------------------
# Scenario validation
# ----------------------------------------------------------------
def test_nlos_scenario_rejects_los_path():
    with pytest.raises(ScenarioError, match="NLoS"):
        _scenario([PropagationPath(10.0, 0.1, 0.2, is_los=True)], kappa=0.0)


def test_nlos_scenario_needs_paths():
    with pytest.raises(ScenarioError, match="identically zero"):
        _scenario([], kappa=0.0)


def test_at_most_one_los_path():
    with pytest.raises(ScenarioError, match="at most one"):
        _scenario(
            [PropagationPath(10.0, 0.1, 0.2, is_los=True), PropagationPath(12.0, 0.3, 0.4, is_los=True)],
            kappa=1.0,
        )


def test_ricean_scenario_without_los_has_no_responses():
    scenario = _scenario([PropagationPath(10.0, 0.1, 0.2)], kappa=2.5)
    with pytest.raises(ScenarioError, match="no LoS"):
        path_responses(scenario, 0)


@pytest.mark.parametrize("name", ["rho_bs", "rho_ue", "sigma2_bs", "sigma2_ue"])
def test_powers_must_be_positive(name):
    with pytest.raises(ScenarioError, match=name):
        _scenario([PropagationPath(10.0, 0.1, 0.2)], **{name: 0.0})


def test_shaping_groups_must_partition(rng):
    scenario = make_scenario(rng, num_ues=3)
    with pytest.raises(ScenarioError, match="partition"):
        Scenario(**{**scenario.__dict__, "shaping_groups": ((0, 1), (1, 2))})


def test_snr_definitions():
    scenario = _scenario([PropagationPath(10.0, 0.1, 0.2)], rho_bs=2.0, rho_ue=3.0, sigma2_bs=0.5, sigma2_ue=0.25)
    assert scenario.snr_bs == pytest.approx(8.0)
    assert scenario.snr_ue == pytest.approx(6.0)


# ----------------------------------------------------------------
# Path weights and channel sampling
# ----------------------------------------------------------------
def test_path_weights_split_power_by_ricean_factor():
    los = PropagationPath(10.0, 0.1, 0.2, is_los=True)
    reflected = PropagationPath(20.0, 0.5, 0.6)
    responses = path_responses(_scenario([los, reflected], kappa=2.5), 0)
    np.testing.assert_allclose(responses.weights, [2.5 / 3.5 * 10.0**-2, 1.0 / 3.5 * 20.0**-2])
    assert responses.los_index == 0
    assert not responses.weights.flags.writeable


def test_path_responses_index_out_of_range(scenario):
    with pytest.raises(IndexError):
        path_responses(scenario, scenario.num_ues)


def test_pure_los_channel_has_constant_norm(rng):
    scenario = _scenario([PropagationPath(5.0, 0.4, 1.1, is_los=True)], kappa=1.0)
    weight = 0.5 * 5.0**-2
    for _ in range(5):
        h = sample_channel(scenario, 0, rng)
        assert h.shape == (2, 4)
        assert np.linalg.norm(h) == pytest.approx(math.sqrt(weight * 2 * 4))


@pytest.mark.parametrize("kappa", [0.0, 2.5])
def test_sampled_channels_match_covariance(rng, kappa):
    scenario = make_scenario(rng, num_ues=1, n=2, m=4, paths=3, kappa=kappa)
    trials = 20_000
    samples = np.array([sample_channel(scenario, 0, rng).reshape(-1, order="F") for _ in range(trials)])
    empirical = samples.T @ samples.conj() / trials
    expected = path_covariance(scenario, 0).densify()
    assert np.linalg.norm(empirical - expected) / np.linalg.norm(expected) < 0.05


def test_sample_channels_draws_every_ue(scenario, rng):
    channels = sample_channels(scenario, rng)
    assert len(channels) == scenario.num_ues
    assert all(h.shape == (2, 8) for h in channels)


def test_same_seed_same_channels(scenario):
    first = sample_channels(scenario, np.random.default_rng(7))
    second = sample_channels(scenario, np.random.default_rng(7))
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------
# Layouts
# ----------------------------------------------------------------
def test_nlos_layout_builds_reflected_paths_only():
    layout = load_layout(SCENARIOS / "nlos_2ue.json")
    scenario = layout.build()
    assert scenario.num_ues == 2
    assert scenario.num_bs_antennas == 128
    assert scenario.rho_bs == pytest.approx(1.0)
    assert scenario.sigma2_bs == pytest.approx(1e-11)
    assert not any(p.is_los for paths in scenario.paths for p in paths)
    assert [len(p) for p in scenario.paths] == [2, 2]


def test_los_layout_puts_los_path_first():
    scenario = load_scenario(SCENARIOS / "los_2ue.json")
    assert scenario.ricean_factor == pytest.approx(2.5)
    for paths in scenario.paths:
        assert paths[0].is_los
        assert sum(p.is_los for p in paths) == 1


def test_rich_layout_spreads_equal_length_paths():
    scenario = load_scenario(SCENARIOS / "rich_1ue.json")
    (paths,) = scenario.paths
    assert len(paths) == 128
    np.testing.assert_allclose([p.distance for p in paths], 80.0, atol=1e-2)
    cosines = np.cos([p.bs_azimuth for p in paths])
    assert np.min(np.abs(np.diff(np.sort(cosines)))) > 2.0 / 256
    assert [len(p) for p in load_scenario(SCENARIOS / "rich_2ue.json").paths] == [128, 128]


def test_row_spacing_moves_ues():
    layout = load_layout(SCENARIOS / "nlos_2ue.json")
    gap = lambda l: float(np.linalg.norm(l.ue_position(1) - l.ue_position(0)))  # noqa: E731
    assert gap(layout) == pytest.approx(4.0)
    assert gap(layout.with_spacing(10.0)) == pytest.approx(10.0)
    with pytest.raises(ScenarioError):
        layout.with_spacing(0.0)


def test_upa_layout_keeps_elevation_rows():
    layout = load_layout(SCENARIOS / "nlos_8ue_upa.json")
    assert layout.bs_array.kind is ArrayKind.UPA
    assert layout.bs_position[2] == pytest.approx(20.0)
    smaller = layout.with_bs_antennas(64)
    assert (smaller.bs_array.n_azimuth, smaller.bs_array.n_elevation) == (8, 8)
    with pytest.raises(ScenarioError):
        layout.with_bs_antennas(60)
    scenario = smaller.build()
    assert scenario.groups() == ((0, 1, 2, 3), (4, 5, 6, 7))
    assert all(p.bs_elevation < 0.0 for paths in scenario.paths for p in paths)


def test_with_powers_only_touches_given_values():
    layout = load_layout(SCENARIOS / "nlos_2ue.json")
    changed = layout.with_powers(rho_ue_dbm=5.0)
    assert changed.rho_ue_dbm == 5.0
    assert changed.rho_bs_dbm == layout.rho_bs_dbm
    assert changed.sigma2_ue_dbm == layout.sigma2_ue_dbm


def test_layout_requires_powers():
    document = {"bs": {"mx": 4}, "ues": [{"slot": 0}], "noise": {"sigma2_bs_dbm": -80, "sigma2_ue_dbm": -80}}
    with pytest.raises(ScenarioError, match="powers"):
        layout_from_dict(document, name="broken")


def test_ue_needs_exactly_one_placement():
    with pytest.raises(ScenarioError):
        UePlacement()
    with pytest.raises(ScenarioError):
        UePlacement(position=(0.0, 1.0, 0.0), slot=0.0)


def test_scatterer_index_out_of_range():
    document = {
        "bs": {"mx": 4},
        "ues": [{"position": [0, 50], "scatterers": [3]}],
        "scatterers": [[5, 20]],
        "powers": {"rho_bs_dbm": 30, "rho_ue_dbm": 25},
        "noise": {"sigma2_bs_dbm": -80, "sigma2_ue_dbm": -80},
    }
    with pytest.raises(ScenarioError, match="out of range"):
        layout_from_dict(document).build()
