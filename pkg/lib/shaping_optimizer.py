"""
`shaping_optimizer`
================================================================================

UE-side covariance shaping: picks unit-norm receive vectors v_k that minimize
the spatial correlation delta between the effective channels of co-scheduled
UEs.

Each coordinate step solves a generalized Rayleigh quotient

    min_v  v^H A_k v / v^H R_k v,   A_k = sum_mn eta_mn Sigma_k,mn

where eta is built from the other UEs' current effective covariances and R_k
is the receive covariance of UE k.

* :func:`optimize_pair` alternates the two UEs of a pair.
* :func:`optimize_multi` runs cyclic block coordinate descent over K UEs,
  optionally blending each update with the previous vector.
* :func:`exhaustive_oracle` searches random unit vectors for a reference value.
"""

import itertools
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.linalg

from lib.covariance_model import (
    BlockCovariance,
    DegenerateShapingError,
    DimensionMismatchError,
    ShapingVector,
    delta_metric,
    effective_covariance,
    receive_cov,
)

logger = logging.getLogger(__name__)

DEFAULT_ACCURACY = 1e-6
DEFAULT_MAX_ITERATIONS = 100
DEFAULT_ORACLE_SAMPLES = 1000
DEFAULT_ORACLE_CAP = 10_000_000
REGULARIZATION = 1e-12
# eigenvalues this close (relative) to the minimum are treated as a tie
TIE_TOLERANCE = 1e-10
# delta values below this are left out of the relative-change criterion
NEGLIGIBLE_DELTA = 1e-15
MONOTONE_SLACK = 1e-12


class RankDeficiencyError(ArithmeticError):
    pass


class OracleSizeError(ValueError):
    pass


class InitStrategy(str, Enum):
    DOMINANT = "dominant"
    RANDOM = "random"


@dataclass(frozen=True)
class OptimizerSettings:
    """
    :param accuracy: epsilon, relative objective change that stops the loop
    :param step_size: alpha in (0, 1], weight of the new solution in the blended update
    :param max_iterations: upper bound on full sweeps over the UEs
    :param initial_vectors: explicit starting vectors, one per UE
    :param init: starting point when ``initial_vectors`` is not given
    :param seed: seed of the random starting point
    :param distributed: every UE replays the whole algorithm and keeps its own vector
    """

    accuracy: float = DEFAULT_ACCURACY
    step_size: float = 1.0
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    initial_vectors: tuple[ShapingVector, ...] | None = None
    init: InitStrategy = InitStrategy.DOMINANT
    seed: int = 0
    distributed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "init", InitStrategy(self.init))
        if self.initial_vectors is not None:
            object.__setattr__(self, "initial_vectors", tuple(self.initial_vectors))
        if not self.accuracy > 0.0:
            raise ValueError(f"accuracy must be positive, got {self.accuracy}")
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError(f"step size must lie in (0, 1], got {self.step_size}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be at least 1, got {self.max_iterations}")


@dataclass(frozen=True)
class OptimizerReport:
    """Result of an optimizer run.

    ``objective_trace[0]`` is the objective at the initial vectors, entry
    ``i`` the value after sweep ``i``.
    """

    vectors: tuple[ShapingVector, ...]
    objective_trace: tuple[float, ...]
    iterations: int
    converged: bool

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


@dataclass(frozen=True)
class OracleResult:
    vectors: tuple[ShapingVector, ...]
    objective: float
    combinations: int


def _canonical(x: np.ndarray) -> ShapingVector:
    """Unit-norm copy of ``x`` whose first significant entry is real positive."""
    x = np.asarray(x, dtype=complex)
    magnitudes = np.abs(x)
    anchor = int(np.flatnonzero(magnitudes > 1e-8 * magnitudes.max())[0])
    x = x * (x[anchor].conjugate() / magnitudes[anchor])
    return ShapingVector(x / np.linalg.norm(x))


def eta_weights(sigma_j: BlockCovariance, v_j: ShapingVector) -> np.ndarray:
    """M x M weights eta_mn = v^H Sigma_j,mn^H v / v^H R_j v (Hermitian, unit trace)."""
    phi = effective_covariance(sigma_j, v_j)
    trace = phi.trace
    if trace <= 0.0:
        raise DegenerateShapingError("shaping vector nulls the whole channel")
    return phi.matrix / trace


def objective_matrix(sigma_k: BlockCovariance, eta_sum: np.ndarray) -> np.ndarray:
    """A_k = sum_mn eta_mn Sigma_k,mn (N x N, Hermitian PSD)."""
    eta_sum = np.asarray(eta_sum, dtype=complex)
    if eta_sum.shape != (sigma_k.m, sigma_k.m):
        raise DimensionMismatchError(f"eta has shape {eta_sum.shape}, expected {(sigma_k.m, sigma_k.m)}")
    if sigma_k.dense is not None:
        blocks = sigma_k.dense.reshape(sigma_k.m, sigma_k.n, sigma_k.m, sigma_k.n)
        a = np.einsum("mn,minj->ij", eta_sum, blocks)
    else:
        w, ue, bs = sigma_k.weights, sigma_k.ue_responses, sigma_k.bs_responses
        assert w is not None and ue is not None and bs is not None
        coefficients = w * np.einsum("pm,mn,pn->p", bs.conj(), eta_sum, bs).real
        a = (ue.T * coefficients) @ ue.conj()
    return (a + a.conj().T) / 2.0


def rayleigh_min(numerator: np.ndarray, denominator: np.ndarray) -> ShapingVector:
    """Unit-norm minimizer of v^H A v / v^H B v.

    Solves the Hermitian-definite generalized eigenproblem (A, B). A
    singular B is regularized once by 1e-12 trace(B)/N I. A multiple minimum
    eigenvalue is resolved by maximizing v^H B v inside its eigenspace.
    """
    a = np.asarray(numerator, dtype=complex)
    b = np.asarray(denominator, dtype=complex)
    a, b = (a + a.conj().T) / 2.0, (b + b.conj().T) / 2.0
    n = a.shape[0]
    scale = float(np.trace(b).real)
    if not scale > 0.0:
        raise RankDeficiencyError("denominator has zero trace")
    try:
        eigenvalues, eigenvectors = scipy.linalg.eigh(a, b)
    except np.linalg.LinAlgError:
        logger.warning("denominator is not positive definite, regularizing")
        try:
            eigenvalues, eigenvectors = scipy.linalg.eigh(a, b + REGULARIZATION * scale / n * np.eye(n))
        except np.linalg.LinAlgError as e:
            raise RankDeficiencyError("denominator stays singular after regularization") from e

    spread = max(float(np.max(np.abs(eigenvalues))), np.finfo(float).tiny)
    ties = np.flatnonzero(eigenvalues - eigenvalues[0] <= TIE_TOLERANCE * spread)
    if ties.size == 1:
        return _canonical(eigenvectors[:, 0])
    basis, _ = np.linalg.qr(eigenvectors[:, ties])
    _, inner = np.linalg.eigh(basis.conj().T @ b @ basis)
    return _canonical(basis @ inner[:, -1])


# ----------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------
def dominant_vector(sigma: BlockCovariance) -> ShapingVector:
    """Principal eigenvector of the receive covariance R."""
    _, eigenvectors = np.linalg.eigh(receive_cov(sigma))
    return _canonical(eigenvectors[:, -1])


def random_vectors(sizes: Sequence[int], rng: np.random.Generator) -> list[ShapingVector]:
    """Unit vectors drawn uniformly on the complex spheres of the given sizes."""
    return [_canonical(rng.standard_normal(n) + 1j * rng.standard_normal(n)) for n in sizes]


def initial_vectors(sigmas: Sequence[BlockCovariance], settings: OptimizerSettings) -> list[ShapingVector]:
    if settings.initial_vectors is not None:
        if len(settings.initial_vectors) != len(sigmas):
            raise DimensionMismatchError(
                f"{len(settings.initial_vectors)} initial vectors for {len(sigmas)} UEs"
            )
        for k, (v, sigma) in enumerate(zip(settings.initial_vectors, sigmas)):
            if v.size != sigma.n:
                raise DimensionMismatchError(f"UE {k}: initial vector of size {v.size}, N={sigma.n}")
        return list(settings.initial_vectors)
    if settings.init is InitStrategy.RANDOM:
        rng = np.random.default_rng(np.random.SeedSequence(settings.seed))
        return random_vectors([sigma.n for sigma in sigmas], rng)
    return [dominant_vector(sigma) for sigma in sigmas]


# ----------------------------------------------------------------
# Algorithms
# ----------------------------------------------------------------
def summed_objective(sigmas: Sequence[BlockCovariance], vectors: Sequence[ShapingVector]) -> float:
    """Sum of delta over ordered pairs k != j."""
    return 2.0 * sum(
        delta_metric(sigmas[k], sigmas[j], vectors[k], vectors[j])
        for k, j in itertools.combinations(range(len(sigmas)), 2)
    )


def _pair_deltas(sigmas: Sequence[BlockCovariance], vectors: Sequence[ShapingVector]) -> dict[tuple[int, int], float]:
    return {
        (k, j): delta_metric(sigmas[k], sigmas[j], vectors[k], vectors[j])
        for k, j in itertools.combinations(range(len(sigmas)), 2)
    }


def _relative_change(before: dict[tuple[int, int], float], after: dict[tuple[int, int], float]) -> float:
    """Relative change of the summed objective, pairs with negligible delta skipped.

    For two UEs this is |delta change| / delta, the pair stopping rule.
    """
    kept = [pair for pair in before if before[pair] >= NEGLIGIBLE_DELTA]
    if not kept:
        return 0.0
    return abs(sum(after[pair] - before[pair] for pair in kept)) / sum(before[pair] for pair in kept)


def _update(sigma_k: BlockCovariance, receive: np.ndarray, etas: Sequence[np.ndarray]) -> ShapingVector:
    return rayleigh_min(objective_matrix(sigma_k, sum(etas)), receive)


def optimize_pair(sigma_k: BlockCovariance, sigma_j: BlockCovariance, settings: OptimizerSettings) -> OptimizerReport:
    """Alternating minimization of delta(v_k, v_j) for two UEs."""
    if settings.distributed:
        return _replay_per_ue(lambda s: optimize_pair(sigma_k, sigma_j, s), 2, settings)
    v_k, v_j = initial_vectors([sigma_k, sigma_j], settings)
    receive_k, receive_j = receive_cov(sigma_k), receive_cov(sigma_j)

    trace = [delta_metric(sigma_k, sigma_j, v_k, v_j)]
    converged = False
    iteration = 0
    for iteration in range(1, settings.max_iterations + 1):
        try:
            v_k = _update(sigma_k, receive_k, [eta_weights(sigma_j, v_j)])
            v_j = _update(sigma_j, receive_j, [eta_weights(sigma_k, v_k)])
            delta = delta_metric(sigma_k, sigma_j, v_k, v_j)
        except DegenerateShapingError as e:
            raise DegenerateShapingError(f"iteration {iteration}: {e}") from e
        previous = trace[-1]
        trace.append(delta)
        logger.debug("pair iteration %d: delta %.6e", iteration, delta)
        if abs(previous - delta) <= settings.accuracy * previous or previous < NEGLIGIBLE_DELTA:
            converged = True
            break
    if not converged:
        logger.warning("pair optimizer stopped after %d iterations without converging", iteration)
    return OptimizerReport((v_k, v_j), tuple(trace), iteration, converged)


def optimize_multi(sigmas: Sequence[BlockCovariance], settings: OptimizerSettings) -> OptimizerReport:
    """Cyclic block coordinate descent on the summed delta objective of K >= 2 UEs.

    Each step minimizes the quotient of UE k against the others' current
    vectors, then blends v_k <- normalize(alpha v* + (1 - alpha) v_k).
    """
    sigmas = list(sigmas)
    if len(sigmas) < 2:
        raise ValueError(f"optimize_multi needs at least two UEs, got {len(sigmas)}")
    if len({sigma.m for sigma in sigmas}) != 1:
        raise DimensionMismatchError("all UEs must see the same BS array")
    if settings.distributed:
        return _replay_per_ue(lambda s: optimize_multi(sigmas, s), len(sigmas), settings)

    vectors = initial_vectors(sigmas, settings)
    receives = [receive_cov(sigma) for sigma in sigmas]
    alpha = settings.step_size

    deltas = _pair_deltas(sigmas, vectors)
    trace = [2.0 * sum(deltas.values())]
    converged = False
    iteration = 0
    for iteration in range(1, settings.max_iterations + 1):
        for k, sigma_k in enumerate(sigmas):
            try:
                etas = [eta_weights(sigmas[j], vectors[j]) for j in range(len(sigmas)) if j != k]
                candidate = _update(sigma_k, receives[k], etas)
            except DegenerateShapingError as e:
                raise DegenerateShapingError(f"iteration {iteration}, UE {k}: {e}") from e
            if alpha < 1.0:
                candidate = _canonical(
                    alpha * candidate.coefficients + (1.0 - alpha) * vectors[k].coefficients
                )
            vectors[k] = candidate
        try:
            updated = _pair_deltas(sigmas, vectors)
        except DegenerateShapingError as e:
            raise DegenerateShapingError(f"iteration {iteration}: {e}") from e
        change = _relative_change(deltas, updated)
        deltas = updated
        trace.append(2.0 * sum(deltas.values()))
        logger.debug("multi iteration %d: objective %.6e, relative change %.3e", iteration, trace[-1], change)
        if change <= settings.accuracy:
            converged = True
            break
    if not converged:
        logger.warning("multi-UE optimizer stopped after %d iterations without converging", iteration)
    return OptimizerReport(tuple(vectors), tuple(trace), iteration, converged)


def _replay_per_ue(run, n_ues: int, settings: OptimizerSettings) -> OptimizerReport:
    """Each UE runs the full algorithm on the shared statistics and keeps its own vector."""
    local = replace(settings, distributed=False)
    reports = [run(local) for _ in range(n_ues)]
    first = reports[0]
    return replace(first, vectors=tuple(report.vectors[k] for k, report in enumerate(reports)))


# ----------------------------------------------------------------
# Exhaustive search
# ----------------------------------------------------------------
def _sample_traces(sigma: BlockCovariance, samples: np.ndarray):
    """Per-sample effective traces plus the data needed for pairwise products."""
    if sigma.is_path_sum:
        w, ue, bs = sigma.weights, sigma.ue_responses, sigma.bs_responses
        assert w is not None and ue is not None and bs is not None
        power = w * np.abs(samples.conj() @ ue.T) ** 2
        return power @ np.sum(np.abs(bs) ** 2, axis=1), ("paths", power, bs)
    phis = np.stack([effective_covariance(sigma, x).matrix for x in samples])
    return np.einsum("smm->s", phis).real, ("dense", phis, None)


def _pair_matrix(data_k, data_j) -> np.ndarray:
    kind_k, x_k, b_k = data_k
    kind_j, x_j, b_j = data_j
    if kind_k == kind_j == "paths":
        return x_k @ (np.abs(b_k.conj() @ b_j.T) ** 2) @ x_j.T
    phis_k = x_k if kind_k == "dense" else np.einsum("sp,pm,pn->smn", x_k, b_k, b_k.conj())
    phis_j = x_j if kind_j == "dense" else np.einsum("sp,pm,pn->smn", x_j, b_j, b_j.conj())
    return np.einsum("smn,tnm->st", phis_k, phis_j).real


def exhaustive_oracle(
    sigmas: Sequence[BlockCovariance],
    samples_per_ue: int = DEFAULT_ORACLE_SAMPLES,
    seed: int = 0,
    cap: int = DEFAULT_ORACLE_CAP,
) -> OracleResult:
    """Best combination of ``samples_per_ue`` random unit vectors per UE.

    The objective is the sum of delta over unordered pairs (delta itself for
    two UEs). Ties resolve to the first combination in sampling order.
    """
    sigmas = list(sigmas)
    if samples_per_ue < 1:
        raise ValueError("need at least one sample per UE")
    combinations = samples_per_ue ** len(sigmas)
    if combinations > cap:
        raise OracleSizeError(
            f"{samples_per_ue} samples for {len(sigmas)} UEs is {combinations:.3e} combinations, cap is {cap:.3e}"
        )

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = []
    for sigma in sigmas:
        raw = rng.standard_normal((samples_per_ue, sigma.n)) + 1j * rng.standard_normal((samples_per_ue, sigma.n))
        samples.append(raw / np.linalg.norm(raw, axis=1, keepdims=True))

    traces, data = zip(*(_sample_traces(sigma, x) for sigma, x in zip(sigmas, samples)))
    k_ues = len(sigmas)
    total = np.zeros((samples_per_ue,) * k_ues)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, j in itertools.combinations(range(k_ues), 2):
            pair = _pair_matrix(data[k], data[j]) / np.outer(traces[k], traces[j])
            shape = [1] * k_ues
            shape[k], shape[j] = samples_per_ue, samples_per_ue
            total = total + pair.reshape(shape)
    total = np.where(np.isfinite(total), total, np.inf)

    best = float(total.min())
    first = int(np.flatnonzero(total.reshape(-1) <= best + TIE_TOLERANCE * abs(best))[0])
    index = np.unravel_index(first, total.shape)
    logger.debug("oracle searched %d combinations, best %.6e", combinations, best)
    return OracleResult(
        vectors=tuple(ShapingVector(samples[k][i]) for k, i in enumerate(index)),
        objective=best,
        combinations=combinations,
    )
