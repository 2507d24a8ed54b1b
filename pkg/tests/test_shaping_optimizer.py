import logging

import numpy as np
import pytest

from lib.covariance_model import DimensionMismatchError, ShapingVector, delta_metric, kronecker_covariance, path_covariance, receive_cov
from lib.shaping_optimizer import (
    MONOTONE_SLACK,
    InitStrategy,
    OptimizerSettings,
    OracleSizeError,
    RankDeficiencyError,
    dominant_vector,
    eta_weights,
    exhaustive_oracle,
    objective_matrix,
    optimize_multi,
    optimize_pair,
    rayleigh_min,
    summed_objective,
    _relative_change,
)
from tests.conftest import make_scenario, random_psd


def _quotient(a, b, v):
    v = np.asarray(v)
    return np.vdot(v, a @ v).real / np.vdot(v, b @ v).real


def _non_increasing(trace):
    return bool(np.all(np.diff(np.asarray(trace)) <= MONOTONE_SLACK))


# ----------------------------------------------------------------
# Generalized Rayleigh quotient
# ----------------------------------------------------------------
def test_rayleigh_min_diagonal():
    v = rayleigh_min(np.diag([3.0, 1.0]), np.eye(2))
    np.testing.assert_allclose(np.abs(v.coefficients), [0.0, 1.0], atol=1e-12)


def test_rayleigh_min_beats_random_vectors(rng):
    a, b = random_psd(rng, 4), random_psd(rng, 4)
    best = _quotient(a, b, rayleigh_min(a, b))
    for _ in range(200):
        x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        assert best <= _quotient(a, b, x) + 1e-10


def test_rayleigh_min_breaks_ties_towards_denominator_power():
    # every vector gives the same quotient, pick the one with most power under B
    b = np.diag([1.0, 4.0])
    v = rayleigh_min(2.0 * b, b)
    np.testing.assert_allclose(np.abs(v.coefficients), [0.0, 1.0], atol=1e-8)


def test_rayleigh_min_regularizes_singular_denominator(caplog):
    with caplog.at_level(logging.WARNING, logger="lib.shaping_optimizer"):
        v = rayleigh_min(np.eye(2), np.diag([1.0, 0.0]))
    np.testing.assert_allclose(np.abs(v.coefficients), [1.0, 0.0], atol=1e-8)
    assert "regularizing" in caplog.text


def test_rayleigh_min_rejects_zero_denominator():
    with pytest.raises(RankDeficiencyError):
        rayleigh_min(np.eye(2), np.zeros((2, 2)))


def test_vectors_have_canonical_phase(rng):
    a, b = random_psd(rng, 3), random_psd(rng, 3)
    v = rayleigh_min(a, b).coefficients
    assert abs(v[0].imag) < 1e-12 and v[0].real > 0.0
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_objective_matrix_reproduces_delta_numerator(sigmas, rng):
    """v_k^H A_k v_k = trace(Phi_k Phi_j) / trace(Phi_j)."""
    from lib.covariance_model import effective_covariance, trace_product
    from lib.shaping_optimizer import random_vectors

    v_k, v_j = random_vectors([2, 2], rng)
    a = objective_matrix(sigmas[0], eta_weights(sigmas[1], v_j))
    phi_k, phi_j = effective_covariance(sigmas[0], v_k), effective_covariance(sigmas[1], v_j)
    expected = trace_product(phi_k, phi_j) / phi_j.trace
    assert np.vdot(v_k.coefficients, a @ v_k.coefficients).real == pytest.approx(expected, rel=1e-10)
    dense = objective_matrix(sigmas[0].to_dense(), eta_weights(sigmas[1], v_j))
    np.testing.assert_allclose(dense, a, atol=1e-12)


def test_dominant_vector_is_principal_eigenvector(sigmas):
    r = receive_cov(sigmas[0])
    v = dominant_vector(sigmas[0])
    assert np.vdot(v.coefficients, r @ v.coefficients).real == pytest.approx(np.linalg.eigvalsh(r)[-1])


# ----------------------------------------------------------------
# Settings
# ----------------------------------------------------------------
@pytest.mark.parametrize(
    "overrides",
    [{"accuracy": 0.0}, {"step_size": 0.0}, {"step_size": 1.5}, {"max_iterations": 0}],
)
def test_settings_validation(overrides):
    with pytest.raises(ValueError):
        OptimizerSettings(**overrides)


def test_initial_vectors_must_match_ues(sigmas):
    settings = OptimizerSettings(initial_vectors=(ShapingVector.basis(3),))
    with pytest.raises(DimensionMismatchError):
        optimize_pair(*sigmas, settings)


# ----------------------------------------------------------------
# Pair and multi-UE descent
# ----------------------------------------------------------------
def test_pair_descent_is_monotone_and_converges(sigmas):
    report = optimize_pair(*sigmas, OptimizerSettings())
    assert report.converged
    assert _non_increasing(report.objective_trace)
    assert len(report.objective_trace) == report.iterations + 1
    assert report.objective == pytest.approx(delta_metric(*sigmas, *report.vectors), rel=1e-12)


def test_pair_descent_from_random_start_is_reproducible(sigmas):
    settings = OptimizerSettings(init=InitStrategy.RANDOM, seed=11)
    first, second = optimize_pair(*sigmas, settings), optimize_pair(*sigmas, settings)
    assert first.objective_trace == second.objective_trace
    assert _non_increasing(first.objective_trace)


def test_pair_descent_respects_iteration_cap(sigmas, caplog):
    settings = OptimizerSettings(accuracy=1e-300, max_iterations=2, init=InitStrategy.RANDOM, seed=3)
    with caplog.at_level(logging.WARNING, logger="lib.shaping_optimizer"):
        report = optimize_pair(*sigmas, settings)
    assert report.iterations <= 2
    if not report.converged:
        assert "without converging" in caplog.text


def test_multi_with_two_ues_matches_pair(sigmas):
    settings = OptimizerSettings(accuracy=1e-300, max_iterations=4)
    pair = optimize_pair(*sigmas, settings)
    multi = optimize_multi(sigmas, settings)
    assert multi.iterations == pair.iterations
    np.testing.assert_allclose(multi.objective_trace, 2.0 * np.asarray(pair.objective_trace), rtol=1e-12)
    for a, b in zip(multi.vectors, pair.vectors):
        np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-12)


def test_multi_with_two_ues_stops_with_pair(sigmas):
    pair = optimize_pair(*sigmas, OptimizerSettings())
    multi = optimize_multi(sigmas, OptimizerSettings())
    assert multi.converged and multi.iterations == pair.iterations


def test_relative_change_follows_the_summed_objective():
    before = {(0, 1): 1.0, (0, 2): 1e-9, (1, 2): 0.5}
    after = {(0, 1): 1.0, (0, 2): 2e-9, (1, 2): 0.5}
    # a tiny pair doubling its delta barely moves the objective
    assert _relative_change(before, after) == pytest.approx(1e-9 / (1.5 + 1e-9), rel=1e-9)
    assert _relative_change({(0, 1): 1e-16}, {(0, 1): 1.0}) == 0.0
    assert _relative_change({(0, 1): 2.0}, {(0, 1): 1.0}) == pytest.approx(0.5)


def test_descent_ignores_the_phase_of_the_start(rng):
    scenario = make_scenario(rng, num_ues=3, n=3, m=8)
    sigmas = [path_covariance(scenario, k) for k in range(3)]
    start = [dominant_vector(sigma) for sigma in sigmas]
    rotated = [ShapingVector(v.coefficients * np.exp(1j * phase)) for v, phase in zip(start, (0.4, 2.1, -1.3))]
    plain = optimize_multi(sigmas, OptimizerSettings(initial_vectors=tuple(start)))
    turned = optimize_multi(sigmas, OptimizerSettings(initial_vectors=tuple(rotated)))
    np.testing.assert_allclose(turned.objective_trace, plain.objective_trace, rtol=1e-10)
    for a, b in zip(turned.vectors, plain.vectors):
        np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-8)


def test_converged_vectors_are_a_fixed_point(rng):
    scenario = make_scenario(rng, num_ues=3, n=2, m=8, paths=5)
    sigmas = [path_covariance(scenario, k) for k in range(3)]
    report = optimize_multi(sigmas, OptimizerSettings(accuracy=1e-10, max_iterations=500))
    again = optimize_multi(sigmas, OptimizerSettings(initial_vectors=report.vectors, max_iterations=1))
    assert abs(again.objective - report.objective) <= 1e-6 * report.objective


@pytest.mark.parametrize("num_ues", [3, 4])
def test_multi_descent_is_monotone(rng, num_ues):
    scenario = make_scenario(rng, num_ues=num_ues, n=3, m=10, paths=5)
    sigmas = [path_covariance(scenario, k) for k in range(num_ues)]
    report = optimize_multi(sigmas, OptimizerSettings())
    assert _non_increasing(report.objective_trace)
    assert report.objective == pytest.approx(summed_objective(sigmas, report.vectors), rel=1e-12)


def test_damped_steps_keep_unit_vectors(rng):
    scenario = make_scenario(rng, num_ues=3, n=2, m=8)
    sigmas = [path_covariance(scenario, k) for k in range(3)]
    report = optimize_multi(sigmas, OptimizerSettings(step_size=0.5, max_iterations=50))
    assert report.iterations <= 50
    assert len(report.objective_trace) == report.iterations + 1
    for v in report.vectors:
        assert np.linalg.norm(v.coefficients) == pytest.approx(1.0, abs=1e-12)


def test_distributed_mode_matches_centralized(rng):
    scenario = make_scenario(rng, num_ues=3)
    sigmas = [path_covariance(scenario, k) for k in range(3)]
    central = optimize_multi(sigmas, OptimizerSettings())
    local = optimize_multi(sigmas, OptimizerSettings(distributed=True))
    assert local.objective_trace == central.objective_trace
    for a, b in zip(local.vectors, central.vectors):
        np.testing.assert_array_equal(a.coefficients, b.coefficients)


def test_multi_needs_two_ues(sigmas):
    with pytest.raises(ValueError):
        optimize_multi(sigmas[:1], OptimizerSettings())


def test_kronecker_objective_is_flat(rng):
    sigmas = [kronecker_covariance(random_psd(rng, 2), random_psd(rng, 6)) for _ in range(2)]
    report = optimize_pair(*sigmas, OptimizerSettings())
    trace = np.asarray(report.objective_trace)
    assert report.converged
    assert np.ptp(trace) <= 1e-10 * trace[0]


# ----------------------------------------------------------------
# Exhaustive search
# ----------------------------------------------------------------
def test_oracle_objective_matches_its_vectors(rng):
    scenario = make_scenario(rng, num_ues=3, n=2, m=6)
    sigmas = [path_covariance(scenario, k) for k in range(3)]
    result = exhaustive_oracle(sigmas, samples_per_ue=20, seed=5)
    assert result.combinations == 20**3
    expected = summed_objective(sigmas, result.vectors) / 2.0
    assert result.objective == pytest.approx(expected, rel=1e-10)


def test_oracle_is_reproducible(sigmas):
    first = exhaustive_oracle(sigmas, samples_per_ue=50, seed=9)
    second = exhaustive_oracle(sigmas, samples_per_ue=50, seed=9)
    assert first.objective == second.objective


def test_oracle_dense_and_path_forms_agree(sigmas):
    paths = exhaustive_oracle(sigmas, samples_per_ue=30, seed=1)
    dense = exhaustive_oracle([s.to_dense() for s in sigmas], samples_per_ue=30, seed=1)
    assert dense.objective == pytest.approx(paths.objective, rel=1e-10)


def test_oracle_size_cap(sigmas):
    with pytest.raises(OracleSizeError):
        exhaustive_oracle(sigmas, samples_per_ue=1000, cap=10_000)


def test_descent_is_close_to_oracle(sigmas):
    report = optimize_pair(*sigmas, OptimizerSettings())
    oracle = exhaustive_oracle(sigmas, samples_per_ue=300, seed=0)
    assert report.objective <= oracle.objective * 1.1
