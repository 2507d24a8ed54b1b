"""
Self-checks of the numerical building blocks at small dimensions.

Every check returns a :class:`CheckResult` instead of raising; a failing
check is a report entry.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import pandas as pd

from lib.covariance_model import (
    BlockCovariance,
    CovarianceError,
    ShapingVector,
    block,
    checked_psd,
    delta_metric,
    effective_covariance,
    kronecker_covariance,
    path_covariance,
    per_antenna_cov,
    receive_cov,
    transmit_cov,
)
from lib.pilots_estimation import PilotMode, build_pilot_book
from lib.scenario_geometry import ArrayGeometry, PropagationPath, Scenario
from lib.shaping_optimizer import MONOTONE_SLACK, OptimizerSettings, optimize_multi, optimize_pair, random_vectors
from lib.transmission_rates import effective_sinr_imperfect, effective_sinr_perfect, moment_oracles
from src.config import ExperimentConfig
from src.harness import point_layout

logger = logging.getLogger(__name__)

VALIDATION_SEED = 2024
MOMENT_TRIALS = 20_000
MOMENT_SIGMAS = 4.0
EQUIVALENCE_TOLERANCE = 1e-10
KRONECKER_TOLERANCE = 1e-10
CLOSED_FORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""


def random_scenario(
    rng: np.random.Generator,
    num_ues: int = 2,
    n: int = 2,
    m: int = 8,
    paths: int = 4,
) -> Scenario:
    """Small NLoS scenario with random path geometry and unit-scale powers."""
    return Scenario(
        bs_array=ArrayGeometry.ula(m),
        ue_arrays=tuple(ArrayGeometry.ula(n) for _ in range(num_ues)),
        paths=tuple(
            tuple(
                PropagationPath(
                    distance=float(rng.uniform(1.0, 2.0)),
                    ue_angle=float(rng.uniform(0.0, math.pi)),
                    bs_azimuth=float(rng.uniform(0.0, math.pi)),
                )
                for _ in range(paths)
            )
            for _ in range(num_ues)
        ),
        ricean_factor=0.0,
        pathloss_exponent=2.0,
        rho_bs=1.0,
        rho_ue=1.0,
        sigma2_bs=0.1,
        sigma2_ue=0.1,
    )


def random_psd(rng: np.random.Generator, size: int) -> np.ndarray:
    x = rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))
    return x @ x.conj().T / size


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b), initial=0.0)), np.finfo(float).tiny)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0)) / scale


# ----------------------------------------------------------------
# Checks
# ----------------------------------------------------------------
def check_representations(rng: np.random.Generator) -> CheckResult:
    """Path-sum and dense forms agree on every covariance operation."""
    scenario = random_scenario(rng, n=3, m=6, paths=5)
    sigmas = [path_covariance(scenario, k) for k in range(scenario.num_ues)]
    dense = [s.to_dense() for s in sigmas]
    v = random_vectors([3, 3], rng)
    worst = max(
        _relative(effective_covariance(dense[0], v[0]).matrix, effective_covariance(sigmas[0], v[0]).matrix),
        _relative(receive_cov(dense[0]), receive_cov(sigmas[0])),
        _relative(transmit_cov(dense[0]), transmit_cov(sigmas[0])),
        _relative(per_antenna_cov(dense[0], 1), per_antenna_cov(sigmas[0], 1)),
        _relative(block(dense[0], 2, 4), block(sigmas[0], 2, 4)),
        _relative(
            np.array(delta_metric(dense[0], dense[1], v[0], v[1])),
            np.array(delta_metric(sigmas[0], sigmas[1], v[0], v[1])),
        ),
    )
    return CheckResult("representation_equivalence", worst <= EQUIVALENCE_TOLERANCE, worst, EQUIVALENCE_TOLERANCE)


def check_kronecker(rng: np.random.Generator) -> list[CheckResult]:
    """delta is shaping-invariant under Kronecker covariances, and the optimizer sees a constant objective."""
    n, m = 2, 6
    transmit = [random_psd(rng, m) for _ in range(2)]
    sigmas = [kronecker_covariance(random_psd(rng, n), t) for t in transmit]
    expected = float(np.trace(transmit[0] @ transmit[1]).real) / (
        float(np.trace(transmit[0]).real) * float(np.trace(transmit[1]).real)
    )
    values = np.array([delta_metric(sigmas[0], sigmas[1], *random_vectors([n, n], rng)) for _ in range(100)])
    spread = float(np.ptp(values)) / expected
    error = float(np.max(np.abs(values - expected))) / expected

    report = optimize_pair(sigmas[0], sigmas[1], OptimizerSettings())
    trace = np.asarray(report.objective_trace)
    variation = float(np.ptp(trace)) / expected
    constant = variation <= KRONECKER_TOLERANCE
    return [
        CheckResult("kronecker_delta_constant", spread <= KRONECKER_TOLERANCE, spread, KRONECKER_TOLERANCE),
        CheckResult("kronecker_delta_value", error <= KRONECKER_TOLERANCE, error, KRONECKER_TOLERANCE),
        CheckResult(
            "kronecker_optimizer_degenerate",
            constant,
            variation,
            KRONECKER_TOLERANCE,
            "constant objective" if constant else "objective varies",
        ),
    ]


def check_pilots() -> CheckResult:
    books = [
        build_pilot_book(PilotMode.FULL, 4, 2, 4, n_antennas=2),
        build_pilot_book(PilotMode.FULL, 3, 3, 7, n_antennas=2),
        build_pilot_book(PilotMode.EFFECTIVE, 4, 2, 2),
        build_pilot_book(PilotMode.EFFECTIVE, 5, 5, 8),
    ]
    worst = max(book.orthogonality_error() for book in books)
    return CheckResult("pilot_orthogonality", worst <= 1e-12, worst, 1e-12)


def check_covariances(sigmas: list[BlockCovariance], perturbation: float = 0.0) -> CheckResult:
    """Every covariance is Hermitian PSD; ``perturbation`` injects a non-Hermitian fault into the first."""
    for k, sigma in enumerate(sigmas):
        matrix = np.array(sigma.densify())
        if k == 0 and perturbation:
            matrix[0, 1] += perturbation * sigma.trace
        try:
            checked_psd(matrix)
        except CovarianceError as e:
            return CheckResult("covariance_psd", False, float("nan"), 0.0, f"UE {k}: {e}")
    return CheckResult("covariance_psd", True, 0.0, 0.0)


def check_moments(rng: np.random.Generator, trials: int = MOMENT_TRIALS) -> list[CheckResult]:
    scenario = random_scenario(rng, num_ues=2, n=2, m=8)
    sigmas = [path_covariance(scenario, k) for k in range(2)]
    shaping = random_vectors([2, 2], rng)
    phis = [effective_covariance(s, v).matrix for s, v in zip(sigmas, shaping)]
    results = []
    for label, groups in (("shared", 1), ("orthogonal", 2)):
        book = build_pilot_book(PilotMode.EFFECTIVE, 2, groups, groups)
        for check in moment_oracles(phis, book, scenario.rho_ue, scenario.sigma2_bs, trials, rng):
            deviation = abs(check.empirical - check.analytic) / check.stderr if check.stderr > 0 else 0.0
            results.append(
                CheckResult(
                    f"moment_{label}_{check.name}",
                    check.passed(MOMENT_SIGMAS),
                    deviation,
                    MOMENT_SIGMAS,
                    f"analytic {check.analytic:.6g}, empirical {check.empirical:.6g}",
                )
            )
    return results


def check_closed_form(rng: np.random.Generator, sets: int = 20) -> CheckResult:
    """Imperfect-CSI SINR tends to the perfect-CSI SINR at tau * snr_ue = 1e12 with orthogonal pilots."""
    worst = 0.0
    for _ in range(sets):
        phis = [random_psd(rng, 6) for _ in range(3)]
        book = build_pilot_book(PilotMode.EFFECTIVE, 3, 3, 3)
        imperfect = effective_sinr_imperfect(phis, book, snr_bs=10.0, snr_ue=1e12 / book.tau)
        perfect = effective_sinr_perfect(phis, snr_bs=10.0)
        worst = max(worst, float(np.max(np.abs(imperfect - perfect) / perfect)))
    return CheckResult("closed_form_perfect_limit", worst <= CLOSED_FORM_TOLERANCE, worst, CLOSED_FORM_TOLERANCE)


def check_monotone(sigmas: list[BlockCovariance], settings: OptimizerSettings, name: str) -> CheckResult:
    report = optimize_pair(*sigmas, settings) if len(sigmas) == 2 else optimize_multi(sigmas, settings)
    steps = np.diff(np.asarray(report.objective_trace))
    worst = float(np.max(steps, initial=0.0))
    return CheckResult(
        name,
        worst <= MONOTONE_SLACK,
        worst,
        MONOTONE_SLACK,
        f"{report.iterations} iterations, converged={report.converged}",
    )


def validate(config: ExperimentConfig | None = None, perturbation: float = 0.0, seed: int = VALIDATION_SEED) -> list[CheckResult]:
    """Run every check; with a config, also check its scenario at the first sweep value."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def guarded(name: str, check: Callable[[], CheckResult | list[CheckResult]]) -> None:
        try:
            outcome = check()
        except Exception as e:  # a crashing check is a failed check
            logger.debug("check %s raised", name, exc_info=True)
            outcome = CheckResult(name, False, float("nan"), 0.0, f"{type(e).__name__}: {e}")
        results.extend(outcome if isinstance(outcome, list) else [outcome])

    small = random_scenario(rng)
    small_sigmas = [path_covariance(small, k) for k in range(small.num_ues)]
    guarded("representation_equivalence", lambda: check_representations(rng))
    guarded("kronecker", lambda: check_kronecker(rng))
    guarded("pilot_orthogonality", check_pilots)
    guarded("covariance_psd", lambda: check_covariances(small_sigmas, perturbation))
    guarded("moments", lambda: check_moments(rng))
    guarded("closed_form_perfect_limit", lambda: check_closed_form(rng))
    guarded("optimizer_monotone", lambda: check_monotone(small_sigmas, OptimizerSettings(), "optimizer_monotone"))

    if config is not None:
        def scenario_checks() -> list[CheckResult]:
            scenario = point_layout(config, config.sweep.values[0]).build()
            sigmas = [path_covariance(scenario, k) for k in range(scenario.num_ues)]
            checks = [replace(check_covariances(sigmas), name="scenario_covariance_psd")]
            for i, group in enumerate(scenario.groups()):
                if len(group) >= 2:
                    checks.append(
                        check_monotone([sigmas[k] for k in group], config.optimizer, f"scenario_monotone[{i}]")
                    )
            return checks

        guarded("scenario", scenario_checks)

    for result in results:
        logger.debug("%s: %s (%.3g vs %.3g)", result.name, "ok" if result.passed else "FAIL", result.measured, result.tolerance)
    return results


def report_frame(results: list[CheckResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "check": r.name,
                "status": "pass" if r.passed else "FAIL",
                "measured": r.measured,
                "tolerance": r.tolerance,
                "detail": r.detail,
            }
            for r in results
        ]
    )
