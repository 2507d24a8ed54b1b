"""
`pilots_estimation`
================================================================================

Uplink pilot phase and MMSE channel estimation under pilot contamination.

Two modes:

* ``FULL``: every UE sends an N x tau pilot matrix P_p, the BS estimates each
  row of H_k separately (needs tau >= P N).
* ``EFFECTIVE``: every UE pre-shapes with v_k and sends one 1 x tau pilot p_p,
  the BS estimates the effective row v_k^H H_k (needs tau >= P).

UEs sharing a pilot group contaminate each other's estimates. Estimation
filters depend only on statistics, so :func:`prepare_estimator` builds them
once and :meth:`MmseEstimator.estimate` applies them to any batch of
observations (leading axes are trials).
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.linalg

from lib.covariance_model import BlockCovariance, ShapingVector, effective_covariance, per_antenna_cov
from lib.scenario_geometry import ChannelRealization

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOLERANCE = 1e-12


class PilotLengthError(ValueError):
    pass


class PilotModeError(ValueError):
    pass


class SingularCovarianceError(ArithmeticError):
    pass


class PilotMode(str, Enum):
    FULL = "full"
    EFFECTIVE = "effective"


@dataclass(frozen=True, eq=False)
class PilotBook:
    """Pilot sequences and UE-to-group assignment.

    ``pilots[p]`` is N x tau (full) or a length-tau vector (effective).
    ``assignments[k]`` is the group of UE ``k``. ``n_antennas`` is the number
    of pilot rows per UE (1 in effective mode).
    """

    mode: PilotMode
    tau: int
    n_antennas: int
    assignments: tuple[int, ...]
    pilots: tuple[np.ndarray, ...]

    @property
    def num_groups(self) -> int:
        return len(self.pilots)

    @property
    def num_ues(self) -> int:
        return len(self.assignments)

    def group(self, p: int) -> tuple[int, ...]:
        """UEs of pilot group ``p`` (the set S_p)."""
        return tuple(k for k, q in enumerate(self.assignments) if q == p)

    def contaminators(self, ue: int) -> tuple[int, ...]:
        """Other UEs sharing the pilot of ``ue``."""
        return tuple(j for j in self.group(self.assignments[ue]) if j != ue)

    def same_pilot(self, k: int, j: int) -> bool:
        return self.assignments[k] == self.assignments[j]

    def pilot(self, ue: int) -> np.ndarray:
        return self.pilots[self.assignments[ue]]

    def total_energy(self, ue: int) -> float:
        """Pilot energy ||P||_F^2 of ``ue`` before the rho_UE power factor."""
        return float(np.sum(np.abs(self.pilot(ue)) ** 2))

    def orthogonality_error(self) -> float:
        """Largest deviation from the orthogonality conditions of the mode."""
        stacked = np.vstack([np.atleast_2d(p) for p in self.pilots])
        gram = stacked @ stacked.conj().T
        expected = (self.tau / self.n_antennas) * np.eye(stacked.shape[0])
        return float(np.max(np.abs(gram - expected))) / self.tau


def build_pilot_book(
    mode: PilotMode,
    num_ues: int,
    num_groups: int,
    tau: int,
    n_antennas: int = 1,
    assignments: Sequence[int] | None = None,
) -> PilotBook:
    """Orthogonal pilots from the rows of the unitary DFT matrix of size tau.

    The default assignment is ``k mod P``, so neighbouring UEs never share a
    pilot when P >= 2.
    """
    mode = PilotMode(mode)
    if num_groups < 1 or num_ues < 1:
        raise ValueError(f"need at least one UE and one pilot group, got K={num_ues}, P={num_groups}")
    rows = n_antennas if mode is PilotMode.FULL else 1
    if tau < num_groups * rows:
        raise PilotLengthError(
            f"{mode.value} pilots for P={num_groups}"
            + (f", N={n_antennas}" if mode is PilotMode.FULL else "")
            + f" need tau >= {num_groups * rows}, got {tau}"
        )
    if assignments is None:
        assignments = [k % num_groups for k in range(num_ues)]
    assignments = tuple(int(p) for p in assignments)
    if len(assignments) != num_ues or any(not 0 <= p < num_groups for p in assignments):
        raise ValueError(f"assignments {assignments} do not map {num_ues} UEs onto {num_groups} groups")

    basis = scipy.linalg.dft(tau, scale="sqrtn")
    if mode is PilotMode.FULL:
        pilots = tuple(math.sqrt(tau / n_antennas) * basis[p * rows:(p + 1) * rows] for p in range(num_groups))
    else:
        pilots = tuple(math.sqrt(tau) * basis[p] for p in range(num_groups))
    for pilot in pilots:
        pilot.setflags(write=False)
    book = PilotBook(mode, tau, rows, assignments, pilots)
    error = book.orthogonality_error()
    if error > ORTHOGONALITY_TOLERANCE:
        logger.warning("pilot book orthogonality error %.3e", error)
    return book


def effective_channels(channels: ChannelRealization | Sequence[np.ndarray], shaping: Sequence[ShapingVector]) -> tuple[np.ndarray, ...]:
    """Effective rows v_k^H H_k (length M), batched over leading axes of H_k."""
    if len(channels) != len(shaping):
        raise PilotModeError(f"{len(channels)} channels but {len(shaping)} shaping vectors")
    return tuple(
        np.einsum("n,...nm->...m", np.asarray(v, dtype=complex).conj(), h) for h, v in zip(channels, shaping)
    )


def _noise(shape: tuple[int, ...], sigma2: float, rng: np.random.Generator) -> np.ndarray:
    return math.sqrt(sigma2 / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def simulate_effective_rx(
    rows: Sequence[np.ndarray],
    book: PilotBook,
    rho_ue: float,
    sigma2_bs: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Observation sum_k sqrt(rho) g_k^H p_k + Z for effective rows g_k."""
    if book.mode is not PilotMode.EFFECTIVE:
        raise PilotModeError("effective rows need an effective-mode pilot book")
    if len(rows) != book.num_ues:
        raise PilotModeError(f"pilot book has {book.num_ues} UEs, got {len(rows)} rows")
    received = sum(
        math.sqrt(rho_ue) * np.asarray(g).conj()[..., :, None] * book.pilot(k) for k, g in enumerate(rows)
    )
    assert isinstance(received, np.ndarray)
    return received + _noise(received.shape, sigma2_bs, rng)


def simulate_pilot_rx(
    channels: ChannelRealization | Sequence[np.ndarray],
    book: PilotBook,
    rho_ue: float,
    sigma2_bs: float,
    rng: np.random.Generator,
    shaping: Sequence[ShapingVector] | None = None,
) -> np.ndarray:
    """Received pilot signal at the BS, M x tau (batched over leading axes of H_k).

    ``shaping`` must be given exactly when the book is in effective mode.
    """
    if (shaping is not None) != (book.mode is PilotMode.EFFECTIVE):
        raise PilotModeError(f"shaping vectors are {'required' if shaping is None else 'not used'} in {book.mode.value} mode")
    if shaping is not None:
        return simulate_effective_rx(effective_channels(channels, shaping), book, rho_ue, sigma2_bs, rng)

    if len(channels) != book.num_ues:
        raise PilotModeError(f"pilot book has {book.num_ues} UEs, got {len(channels)} channels")
    received = None
    for k, h in enumerate(channels):
        if h.shape[-2] != book.n_antennas:
            raise PilotModeError(f"UE {k}: channel has {h.shape[-2]} antennas, pilots are built for {book.n_antennas}")
        term = math.sqrt(rho_ue) * np.swapaxes(h, -1, -2).conj() @ book.pilot(k)
        received = term if received is None else received + term
    assert received is not None
    return received + _noise(received.shape, sigma2_bs, rng)


@dataclass(frozen=True, eq=False)
class EstimateSet:
    """Per-UE channel estimates.

    ``estimates[k]`` is H_k-hat (..., N, M) in full mode or the effective row
    (..., M) in effective mode. ``q_matrices[k]`` and ``covariances[k]`` are
    (N, M, M) per-antenna stacks in full mode and (M, M) in effective mode.
    """

    mode: PilotMode
    estimates: tuple[np.ndarray, ...]
    q_matrices: tuple[np.ndarray, ...]
    covariances: tuple[np.ndarray, ...]

    def stacked(self) -> np.ndarray:
        """All estimated rows on top of each other: (..., K, M) or (..., K N, M)."""
        if self.mode is PilotMode.EFFECTIVE:
            return np.stack(self.estimates, axis=-2)
        return np.concatenate(self.estimates, axis=-2)

    def streams(self) -> tuple[int, ...]:
        """Owning UE of every stacked row."""
        if self.mode is PilotMode.EFFECTIVE:
            return tuple(range(len(self.estimates)))
        return tuple(k for k, h in enumerate(self.estimates) for _ in range(h.shape[-2]))

    def channel_energy(self) -> float:
        """E||H||_F^2 implied by the covariances the estimator was built with."""
        return float(sum(np.trace(c, axis1=-2, axis2=-1).real.sum() for c in self.covariances))


class MmseEstimator:
    """Model-matched MMSE filters Phi Q^-1 for one pilot book and one set of statistics."""

    def __init__(self, book: PilotBook, covariances: Sequence[np.ndarray], rho_ue: float, sigma2_bs: float):
        self.book = book
        self.rho_ue = rho_ue
        self.covariances = tuple(np.asarray(c, dtype=complex) for c in covariances)
        if len(self.covariances) != book.num_ues:
            raise PilotModeError(f"pilot book has {book.num_ues} UEs, got {len(self.covariances)} covariances")

        snr_ue = rho_ue / sigma2_bs
        rows = book.n_antennas
        self._scale = rows / (book.tau * math.sqrt(rho_ue))
        regularizer = rows / (book.tau * snr_ue)

        q_matrices, filters = [], []
        for k, phi in enumerate(self.covariances):
            q = phi + sum((self.covariances[j] for j in book.contaminators(k)), np.zeros_like(phi))
            q = q + regularizer * np.eye(phi.shape[-1])
            q_matrices.append(q)
            filters.append(self._filter(k, phi, q))
        self.q_matrices = tuple(q_matrices)
        self.filters = tuple(filters)

    @staticmethod
    def _filter(ue: int, phi: np.ndarray, q: np.ndarray) -> np.ndarray:
        try:
            if phi.ndim == 2:
                return scipy.linalg.solve(q, phi, assume_a="her").conj().T
            return np.stack([scipy.linalg.solve(qn, pn, assume_a="her").conj().T for qn, pn in zip(q, phi)])
        except np.linalg.LinAlgError as e:
            raise SingularCovarianceError(f"UE {ue}: Q matrix is singular") from e

    def estimate(self, observation: np.ndarray) -> EstimateSet:
        """Estimates from an observation of shape (..., M, tau)."""
        estimates = []
        for k, f in enumerate(self.filters):
            pilot = self.book.pilot(k)
            if self.book.mode is PilotMode.EFFECTIVE:
                despread = observation @ pilot.conj()
                estimates.append(self._scale * np.einsum("ij,...j->...i", f, despread).conj())
            else:
                despread = observation @ pilot.conj().T
                estimates.append(self._scale * np.einsum("nij,...jn->...ni", f, despread).conj())
        return EstimateSet(self.book.mode, tuple(estimates), self.q_matrices, self.covariances)


def prepare_estimator(
    book: PilotBook,
    covariances: Sequence[BlockCovariance],
    rho_ue: float,
    sigma2_bs: float,
    shaping: Sequence[ShapingVector] | None = None,
) -> MmseEstimator:
    """MMSE filters for the statistics of ``covariances`` (and ``shaping`` in effective mode)."""
    if (shaping is not None) != (book.mode is PilotMode.EFFECTIVE):
        raise PilotModeError(f"shaping vectors are {'required' if shaping is None else 'not used'} in {book.mode.value} mode")
    if shaping is not None:
        if len(shaping) != len(covariances):
            raise PilotModeError(f"{len(covariances)} covariances but {len(shaping)} shaping vectors")
        phis = [effective_covariance(sigma, v).matrix for sigma, v in zip(covariances, shaping)]
    else:
        for k, sigma in enumerate(covariances):
            if sigma.n != book.n_antennas:
                raise PilotModeError(f"UE {k}: {sigma.n} antennas, pilots are built for {book.n_antennas}")
        phis = [np.stack([per_antenna_cov(sigma, n) for n in range(sigma.n)]) for sigma in covariances]
    return MmseEstimator(book, phis, rho_ue, sigma2_bs)


def mmse_estimate(
    observation: np.ndarray,
    book: PilotBook,
    covariances: Sequence[BlockCovariance],
    rho_ue: float,
    sigma2_bs: float,
    shaping: Sequence[ShapingVector] | None = None,
) -> EstimateSet:
    return prepare_estimator(book, covariances, rho_ue, sigma2_bs, shaping).estimate(observation)


# ----------------------------------------------------------------
# Estimation error
# ----------------------------------------------------------------
@dataclass(frozen=True)
class NmseReport:
    values: np.ndarray
    excluded: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def trial_nmse(estimates: EstimateSet, truths: Sequence[np.ndarray]) -> np.ndarray:
    """Per-UE normalized squared error of one trial, NaN where the truth is zero.

    ``truths`` are the effective rows (effective mode) or the channels H_k
    (full mode, averaged over the N rows).
    """
    if len(truths) != len(estimates.estimates):
        raise ValueError(f"{len(estimates.estimates)} estimates but {len(truths)} truths")
    values = np.empty(len(truths))
    for k, (estimate, truth) in enumerate(zip(estimates.estimates, truths)):
        truth = np.asarray(truth)
        if estimate.shape != truth.shape:
            raise ValueError(f"UE {k}: estimate shape {estimate.shape} vs truth {truth.shape}")
        energy = np.sum(np.abs(truth) ** 2, axis=-1)
        if np.any(energy == 0.0):
            values[k] = np.nan
            continue
        values[k] = float(np.mean(np.sum(np.abs(estimate - truth) ** 2, axis=-1) / energy))
    return values


def summarize_nmse(ratios: np.ndarray) -> NmseReport:
    """Average per-trial NMSE rows (trials x UEs), skipping excluded trials."""
    ratios = np.atleast_2d(ratios)
    excluded = np.sum(np.isnan(ratios), axis=0)
    if np.any(excluded):
        logger.debug("NMSE: excluded zero-norm trials per UE %s", excluded.tolist())
    with np.errstate(invalid="ignore"):
        values = np.nanmean(ratios, axis=0) if ratios.size else np.zeros(ratios.shape[1])
    return NmseReport(values=values, excluded=excluded)


def nmse(estimates: Sequence[EstimateSet], truths: Sequence[Sequence[np.ndarray]]) -> NmseReport:
    """Mean NMSE per UE over trials."""
    return summarize_nmse(np.array([trial_nmse(e, t) for e, t in zip(estimates, truths)]))
