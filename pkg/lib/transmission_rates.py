"""
`transmission_rates`
================================================================================

Downlink precoding, UE combining and rate metrics.

* Spatial multiplexing (full-MIMO estimation): one stream per UE antenna,
  MMSE combiners at the UEs from the true channel.
* Covariance shaping: one stream per UE over the effective row v_k^H H_k.

Closed-form effective SINRs give the ergodic lower bound for MRT with
covariance shaping; :func:`moment_oracles` checks the second and fourth
moments those expressions are built from against Monte-Carlo samples.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from lib.covariance_model import ShapingVector
from lib.pilots_estimation import EstimateSet, MmseEstimator, PilotBook, simulate_effective_rx

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PrecodingMatrix:
    """M x L precoder; ``streams[l]`` is the UE served by column ``l``."""

    matrix: np.ndarray
    streams: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.streams):
            raise ValueError(f"precoder shape {self.matrix.shape} does not match {len(self.streams)} streams")

    @property
    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.matrix))

    def columns(self, ue: int) -> np.ndarray:
        return self.matrix[:, [l for l, k in enumerate(self.streams) if k == ue]]


@dataclass(frozen=True, eq=False)
class RateBreakdown:
    """Per-stream SINRs and rates in bit/s/Hz."""

    sinr: np.ndarray
    rates: np.ndarray
    streams: tuple[int, ...]

    @property
    def total(self) -> float:
        return float(np.sum(self.rates))

    def per_ue(self, num_ues: int) -> np.ndarray:
        totals = np.zeros(num_ues)
        np.add.at(totals, np.asarray(self.streams, dtype=int), self.rates)
        return totals

    def scaled(self, fraction: float) -> "RateBreakdown":
        """Rates of a transmission that occupies ``fraction`` of the time."""
        return RateBreakdown(self.sinr, self.rates * fraction, self.streams)


def _breakdown(sinr: np.ndarray, streams: Sequence[int]) -> RateBreakdown:
    sinr = np.clip(np.nan_to_num(np.asarray(sinr, dtype=float), nan=0.0), 0.0, None)
    return RateBreakdown(sinr, np.log2(1.0 + sinr), tuple(streams))


# ----------------------------------------------------------------
# Precoders and combiners
# ----------------------------------------------------------------
def mrt_precoder(estimates: EstimateSet) -> PrecodingMatrix:
    """W = H-hat^H / sqrt(E||H||_F^2), normalized in expectation only."""
    rows = estimates.stacked()
    energy = estimates.channel_energy()
    if energy <= 0.0:
        return PrecodingMatrix(np.zeros_like(rows.conj().T), estimates.streams())
    return PrecodingMatrix(rows.conj().T / math.sqrt(energy), estimates.streams())


def mmse_precoder(estimates: EstimateSet, snr_bs: float) -> PrecodingMatrix:
    """Regularized zero-forcing H-hat^H (H-hat H-hat^H + L/snr I)^-1 scaled to ||W||_F = 1."""
    rows = estimates.stacked()
    n_streams = rows.shape[0]
    gram = rows @ rows.conj().T + (n_streams / snr_bs) * np.eye(n_streams)
    w = scipy.linalg.solve(gram, rows, assume_a="her").conj().T
    norm = np.linalg.norm(w)
    if norm == 0.0:
        return PrecodingMatrix(w, estimates.streams())
    return PrecodingMatrix(w / norm, estimates.streams())


def ue_combiner_sm(channel: np.ndarray, precoder: PrecodingMatrix, ue: int, rho_bs: float, sigma2_ue: float) -> np.ndarray:
    """N x L_k MMSE combiner of UE ``ue`` from its true channel."""
    received = channel @ precoder.matrix
    covariance = rho_bs * received @ received.conj().T + sigma2_ue * np.eye(channel.shape[0])
    return scipy.linalg.solve(covariance, channel @ precoder.columns(ue), assume_a="her")


# ----------------------------------------------------------------
# Instantaneous rates
# ----------------------------------------------------------------
def sum_rate_sm(
    channels: Sequence[np.ndarray],
    precoder: PrecodingMatrix,
    combiners: Sequence[np.ndarray],
    snr_bs: float,
) -> RateBreakdown:
    """Spatial-multiplexing rates, one entry per stream."""
    sinr = np.zeros(len(precoder.streams))
    owned = {k: [l for l, owner in enumerate(precoder.streams) if owner == k] for k in range(len(channels))}
    for k, (h, v) in enumerate(zip(channels, combiners)):
        gains = np.abs(v.conj().T @ h @ precoder.matrix) ** 2
        noise = np.sum(np.abs(v) ** 2, axis=0) / snr_bs
        for i, l in enumerate(owned[k]):
            signal = gains[i, l]
            interference = gains[i].sum() - signal
            sinr[l] = signal / (interference + noise[i]) if signal > 0.0 else 0.0
    return _breakdown(sinr, precoder.streams)


def sum_rate_cs(
    effective_rows: Sequence[np.ndarray],
    precoder: PrecodingMatrix,
    shaping: Sequence[ShapingVector],
    snr_bs: float,
) -> RateBreakdown:
    """Covariance-shaping rates, one stream per UE."""
    rows = np.stack([np.asarray(g) for g in effective_rows])
    gains = np.abs(rows @ precoder.matrix) ** 2
    norms = np.array([np.linalg.norm(np.asarray(v)) ** 2 for v in shaping])
    signal = np.diag(gains)
    interference = gains.sum(axis=1) - signal
    with np.errstate(divide="ignore", invalid="ignore"):
        sinr = np.where(signal > 0.0, signal / (interference + norms / snr_bs), 0.0)
    return _breakdown(sinr, precoder.streams)


# ----------------------------------------------------------------
# Closed-form effective SINR and ergodic bound
# ----------------------------------------------------------------
def _norms(shaping_norms: Sequence[float] | None, k: int) -> np.ndarray:
    return np.ones(k) if shaping_norms is None else np.asarray(shaping_norms, dtype=float)


def effective_sinr_perfect(
    effective_covs: Sequence[np.ndarray],
    snr_bs: float,
    shaping_norms: Sequence[float] | None = None,
) -> np.ndarray:
    """gamma_k = tr(Phi_k)^2 / (sum_j tr(Phi_k Phi_j) + ||v_k||^2/snr sum_j tr(Phi_j)).

    The sum over j includes j = k.
    """
    phis = [np.asarray(phi, dtype=complex) for phi in effective_covs]
    norms = _norms(shaping_norms, len(phis))
    traces = np.array([np.trace(phi).real for phi in phis])
    gammas = np.zeros(len(phis))
    for k, phi_k in enumerate(phis):
        interference = sum(float(np.sum(phi_k * phi_j.T).real) for phi_j in phis)
        denominator = interference + norms[k] ** 2 / snr_bs * traces.sum()
        gammas[k] = traces[k] ** 2 / denominator if denominator > 0.0 else 0.0
    return gammas


def effective_sinr_imperfect(
    effective_covs: Sequence[np.ndarray],
    book: PilotBook,
    snr_bs: float,
    snr_ue: float,
    shaping_norms: Sequence[float] | None = None,
) -> np.ndarray:
    """Closed-form SINR of MRT on MMSE estimates under pilot contamination.

    gamma_k = tr(D_k)^2 / (sum_j tr(Phi_k D_j) + sum_{j in S_p \\ k} |tr(Phi_k Q_j^-1 Phi_j)|^2
    + ||v_k||^2/snr sum_j tr(Phi_j)) with D_j = Phi_j Q_j^-1 Phi_j.
    """
    estimator = MmseEstimator(book, effective_covs, rho_ue=snr_ue, sigma2_bs=1.0)
    phis = estimator.covariances
    norms = _norms(shaping_norms, len(phis))
    traces = np.array([np.trace(phi).real for phi in phis])
    products = [f @ phi for f, phi in zip(estimator.filters, phis)]

    gammas = np.zeros(len(phis))
    for k, phi_k in enumerate(phis):
        numerator = float(np.trace(products[k]).real) ** 2
        interference = sum(float(np.sum(phi_k * d_j.T).real) for d_j in products)
        contamination = sum(
            abs(np.sum(phi_k * estimator.filters[j].conj())) ** 2 for j in book.contaminators(k)
        )
        denominator = interference + contamination + norms[k] ** 2 / snr_bs * traces.sum()
        gammas[k] = numerator / denominator if denominator > 0.0 else 0.0
    return gammas


def ergodic_rate_lb(gammas: Sequence[float]) -> float:
    """Sum of log2(1 + gamma_k)."""
    gammas = np.asarray(gammas, dtype=float)
    if np.any(gammas < 0.0):
        raise ValueError("SINRs must be non-negative")
    return float(np.sum(np.log2(1.0 + gammas)))


# ----------------------------------------------------------------
# Moment identities
# ----------------------------------------------------------------
@dataclass(frozen=True)
class MomentCheck:
    name: str
    analytic: float
    empirical: float
    stderr: float

    def passed(self, n_sigma: float = 3.0) -> bool:
        return abs(self.empirical - self.analytic) <= n_sigma * self.stderr + 1e-9 * abs(self.analytic)


def _check(name: str, analytic: float, samples: np.ndarray) -> MomentCheck:
    stderr = float(np.std(samples, ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else 0.0
    return MomentCheck(name, float(analytic), float(np.mean(samples)), stderr)


def _gaussian(covariance: np.ndarray, trials: int, rng: np.random.Generator) -> np.ndarray:
    """``trials`` draws of CN(0, covariance) as rows."""
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    root = eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))
    m = covariance.shape[0]
    z = (rng.standard_normal((trials, m)) + 1j * rng.standard_normal((trials, m))) / math.sqrt(2.0)
    return z @ root.T


def moment_oracles(
    effective_covs: Sequence[np.ndarray],
    book: PilotBook,
    rho_ue: float,
    sigma2_bs: float,
    trials: int,
    rng: np.random.Generator,
) -> list[MomentCheck]:
    """Closed-form moments of effective channels and their MMSE estimates vs. samples.

    Channels are drawn directly from CN(0, Phi_k); the pilot phase and the
    estimator are the ones used by the simulator.
    """
    estimator = MmseEstimator(book, effective_covs, rho_ue, sigma2_bs)
    phis = estimator.covariances
    columns = [_gaussian(phi, trials, rng) for phi in phis]
    rows = [c.conj() for c in columns]
    observation = simulate_effective_rx(rows, book, rho_ue, sigma2_bs, rng)
    estimates = estimator.estimate(observation).estimates
    products = [f @ phi for f, phi in zip(estimator.filters, phis)]

    checks = [
        _check(
            "channel_energy",
            sum(np.trace(phi).real for phi in phis),
            sum(np.sum(np.abs(g) ** 2, axis=-1) for g in rows),
        )
    ]
    for k, phi_k in enumerate(phis):
        correlation = np.sum(rows[k] * estimates[k].conj(), axis=-1)
        checks.append(_check(f"estimate_correlation[{k}]", np.trace(products[k]).real, correlation.real))
        checks.append(_check(f"estimate_energy[{k}]", np.trace(products[k]).real, np.sum(np.abs(estimates[k]) ** 2, axis=-1)))
        checks.append(
            _check(
                f"estimate_variance[{k}]",
                np.sum(phi_k * products[k].T).real,
                np.abs(correlation - correlation.mean()) ** 2,
            )
        )
        for j in range(len(phis)):
            if j == k:
                continue
            analytic = float(np.sum(phi_k * products[j].T).real)
            if book.same_pilot(k, j):
                analytic += abs(np.sum(phi_k * estimator.filters[j].conj())) ** 2
            cross = np.abs(np.sum(rows[k] * estimates[j].conj(), axis=-1)) ** 2
            checks.append(_check(f"cross_power[{k},{j}]", analytic, cross))

    m = phis[0].shape[0]
    a = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    a = (a + a.conj().T) / 2.0
    x = _gaussian(np.eye(m), trials, rng)
    quadratic = np.einsum("ti,ij,tj->t", x.conj(), a, x).real
    trace_a = float(np.trace(a).real)
    checks.append(_check("gaussian_fourth_moment[trace]", (m + 1) * trace_a, np.sum(np.abs(x) ** 2, axis=1) * quadratic))
    checks.append(_check("gaussian_fourth_moment[0,0]", a[0, 0].real + trace_a, np.abs(x[:, 0]) ** 2 * quadratic))

    for check in checks:
        logger.debug("moment %s: analytic %.6e empirical %.6e (stderr %.2e)", check.name, check.analytic, check.empirical, check.stderr)
    return checks
