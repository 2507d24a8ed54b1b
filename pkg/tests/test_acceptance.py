"""End-to-end behaviour on the bundled scenarios; run with ``pytest -m slow``."""

import math
from dataclasses import replace

import numpy as np
import pytest

from lib.covariance_model import path_covariance
from lib.pilots_estimation import PilotMode
from lib.scenario_geometry import load_layout
from lib.shaping_optimizer import MONOTONE_SLACK, OptimizerSettings, exhaustive_oracle, optimize_multi, optimize_pair
from src.config import Precoder, Scheme, SweepVariable, load_config
from src.harness import run_estimation, run_point
from tests.conftest import CONFIGS, SCENARIOS

pytestmark = pytest.mark.slow


def _record(records, scheme, precoder):
    return next(r for r in records if r.scheme == scheme.value and r.precoder == precoder.value)


@pytest.mark.parametrize("name", ["nlos_2ue", "los_2ue", "nlos_4ue", "nlos_8ue_upa"])
def test_optimizer_converges_quickly_on_bundled_scenarios(name):
    scenario = load_layout(SCENARIOS / f"{name}.json").build()
    sigmas = [path_covariance(scenario, k) for k in range(scenario.num_ues)]
    for group in scenario.groups():
        members = [sigmas[k] for k in group]
        settings = OptimizerSettings(accuracy=1e-6)
        report = optimize_pair(*members, settings) if len(members) == 2 else optimize_multi(members, settings)
        assert report.converged and report.iterations <= 10
        assert np.all(np.diff(report.objective_trace) <= MONOTONE_SLACK)


@pytest.mark.parametrize("name", ["nlos_2ue", "los_2ue"])
def test_descent_matches_exhaustive_search(name):
    scenario = load_layout(SCENARIOS / f"{name}.json").with_bs_antennas(32).build()
    sigmas = [path_covariance(scenario, k) for k in range(2)]
    report = optimize_pair(*sigmas, OptimizerSettings())
    oracle = exhaustive_oracle(sigmas, samples_per_ue=1000, seed=0)
    assert report.objective <= 1.1 * oracle.objective


def test_effective_estimation_beats_full_estimation():
    base = load_layout(SCENARIOS / "nlos_2ue.json")
    for rho_ue in (5.0, 15.0, 25.0):
        layout = base.with_powers(rho_ue_dbm=rho_ue)
        effective = run_estimation(layout, PilotMode.EFFECTIVE, trials=2000, seed=4, groups=1, threads=4)
        full = run_estimation(layout, PilotMode.FULL, trials=2000, seed=4, groups=1, threads=4)
        assert np.mean(effective) < np.mean(full)


def test_rate_crossover_with_array_size():
    config = replace(load_config(CONFIGS / "rate_vs_M.json"), trials=500, precoders=(Precoder.MMSE,))
    for point, m in enumerate((64, 128, 256)):
        records = run_point(config, m, point=point, threads=4)
        cs = _record(records, Scheme.COVARIANCE_SHAPING, Precoder.MMSE)
        sm = _record(records, Scheme.SPATIAL_MULTIPLEXING, Precoder.MMSE)
        margin = 2.0 * math.hypot(cs.stderr, sm.stderr)
        if m < 256:
            assert cs.mean_sum_rate_bps_hz - sm.mean_sum_rate_bps_hz > margin
        else:
            assert sm.mean_sum_rate_bps_hz > cs.mean_sum_rate_bps_hz


def test_scheduling_costs_spatial_multiplexing_rate():
    unscheduled = replace(load_config(CONFIGS / "rate_vs_d_4ue.json"), trials=300)
    scheduled = replace(load_config(CONFIGS / "rate_vs_d_4ue_scheduled.json"), trials=300)
    plain = _record(run_point(unscheduled, 4.0, threads=4), Scheme.SPATIAL_MULTIPLEXING, Precoder.MMSE)
    split = _record(run_point(scheduled, 4.0, threads=4), Scheme.SPATIAL_MULTIPLEXING, Precoder.MMSE)
    assert split.mean_sum_rate_bps_hz < plain.mean_sum_rate_bps_hz


def test_ergodic_bound_tightens_with_array_size():
    config = load_config(CONFIGS / "ergodic_vs_M.json")
    assert config.sweep.variable is SweepVariable.M
    gaps = []
    for point, m in enumerate(config.sweep.values):
        (record,) = run_point(config, m, point=point, threads=4)
        gaps.append(abs(record.ergodic_lb_imperfect - record.mean_sum_rate_bps_hz))
    assert gaps[0] > gaps[1] > gaps[2]


def test_single_ue_rate_matches_the_ergodic_bound():
    config = load_config(CONFIGS / "ergodic_single_ue.json")
    (record,) = run_point(config, 64, point=1, threads=4)
    assert record.precoder == Precoder.MRT.value
    assert abs(record.mean_sum_rate_bps_hz - record.ergodic_lb_imperfect) <= 2.0 * record.stderr
