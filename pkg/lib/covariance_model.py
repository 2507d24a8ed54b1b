"""
`covariance_model`
================================================================================

Channel covariance structures for one UE.

The NM x NM covariance Sigma_k = E[vec(H_k) vec(H_k)^H] is kept either as a
dense matrix or as the low-rank path sum

    Sigma_k = sum_p w_p vec(a_p b_p^H) vec(a_p b_p^H)^H

vec() stacks the columns of H_k (N x M), so entry (n, m) of H_k sits at index
m*N + n and the N x N block Sigma_mn = E[h_m h_n^H] covers rows m*N..m*N+N-1
and columns n*N..n*N+N-1.

The effective covariance Phi_k(v) is the covariance of the column (v^H H_k)^H,
entry (n, m) = v^H Sigma_mn v. Every operation has a path-sum fast path that
never builds the NM x NM matrix.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from lib.scenario_geometry import Scenario, path_responses

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
HERMITIAN_TOLERANCE = 1e-10
UNIT_NORM_TOLERANCE = 1e-12
# effective traces at or below this fraction of trace(Sigma) count as zero
DEGENERATE_TRACE_RATIO = 1e-13


class CovarianceError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class DegenerateShapingError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ShapingVector:
    """Unit-norm UE beamformer v_k of length N."""

    coefficients: np.ndarray

    def __post_init__(self) -> None:
        coefficients = np.asarray(self.coefficients, dtype=complex).reshape(-1)
        norm = float(np.linalg.norm(coefficients))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"shaping vector must have unit norm, got {norm!r}")
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def normalized(cls, values: np.ndarray) -> "ShapingVector":
        values = np.asarray(values, dtype=complex).reshape(-1)
        norm = float(np.linalg.norm(values))
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError("cannot normalize a zero or non-finite vector")
        return cls(values / norm)

    @classmethod
    def basis(cls, n: int, index: int = 0) -> "ShapingVector":
        """Unit vector e_index: receive on a single antenna."""
        e = np.zeros(n, dtype=complex)
        e[index] = 1.0
        return cls(e)

    @property
    def size(self) -> int:
        return self.coefficients.size

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        return self.coefficients if dtype is None else self.coefficients.astype(dtype)


@dataclass(frozen=True, eq=False)
class BlockCovariance:
    """Channel covariance Sigma_k of a UE with ``n`` antennas seen by ``m`` BS antennas.

    Exactly one representation is set: ``dense`` (NM x NM) or the path sum
    (``weights`` (U,), ``ue_responses`` (U, N), ``bs_responses`` (U, M)).
    Use :meth:`from_dense` / :meth:`from_paths` rather than the constructor.
    """

    n: int
    m: int
    dense: np.ndarray | None = None
    weights: np.ndarray | None = None
    ue_responses: np.ndarray | None = None
    bs_responses: np.ndarray | None = None

    @classmethod
    def from_dense(cls, matrix: np.ndarray, n: int, m: int, check: bool = True) -> "BlockCovariance":
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.shape != (n * m, n * m):
            raise DimensionMismatchError(f"expected a {n * m}x{n * m} matrix for N={n}, M={m}, got {matrix.shape}")
        if check:
            matrix = checked_psd(matrix)
        matrix.setflags(write=False)
        return cls(n=n, m=m, dense=matrix)

    @classmethod
    def from_paths(cls, weights: np.ndarray, ue_responses: np.ndarray, bs_responses: np.ndarray) -> "BlockCovariance":
        weights = np.asarray(weights, dtype=float).reshape(-1)
        ue_responses = np.atleast_2d(np.asarray(ue_responses, dtype=complex))
        bs_responses = np.atleast_2d(np.asarray(bs_responses, dtype=complex))
        if not (weights.size == ue_responses.shape[0] == bs_responses.shape[0]):
            raise DimensionMismatchError(
                f"path count mismatch: {weights.size} weights, {ue_responses.shape[0]} UE responses, "
                f"{bs_responses.shape[0]} BS responses"
            )
        if np.any(weights < 0.0) or not np.all(np.isfinite(weights)):
            raise CovarianceError("path weights must be finite and non-negative")
        return cls(
            n=ue_responses.shape[1],
            m=bs_responses.shape[1],
            weights=weights,
            ue_responses=ue_responses,
            bs_responses=bs_responses,
        )

    @property
    def is_path_sum(self) -> bool:
        return self.dense is None

    def _paths(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        assert self.weights is not None and self.ue_responses is not None and self.bs_responses is not None
        return self.weights, self.ue_responses, self.bs_responses

    def _blocks(self) -> np.ndarray:
        """Dense matrix viewed as S[m, i, n, j] = Sigma_mn[i, j]."""
        assert self.dense is not None
        return self.dense.reshape(self.m, self.n, self.m, self.n)

    def densify(self) -> np.ndarray:
        """The NM x NM matrix."""
        if self.dense is not None:
            return self.dense
        w, a, b = self._paths()
        x = (b.conj()[:, :, None] * a[:, None, :]).reshape(w.size, self.m * self.n)
        return (x.T * w) @ x.conj()

    def to_dense(self) -> "BlockCovariance":
        if self.dense is not None:
            return self
        return BlockCovariance.from_dense(self.densify(), self.n, self.m, check=False)

    @property
    def trace(self) -> float:
        if self.dense is not None:
            return float(np.trace(self.dense).real)
        w, a, b = self._paths()
        return float(np.sum(w * np.sum(np.abs(a) ** 2, axis=1) * np.sum(np.abs(b) ** 2, axis=1)))

    def block(self, m: int, n: int) -> np.ndarray:
        return block(self, m, n)


@dataclass(frozen=True, eq=False)
class EffectiveCovariance:
    """Covariance of the effective MISO channel (M x M).

    ``shaping`` is the vector that produced it, ``None`` for a raw array.
    """

    matrix: np.ndarray
    shaping: ShapingVector | None = None

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)


def checked_psd(matrix: np.ndarray) -> np.ndarray:
    """Return the Hermitian part of ``matrix`` with small negative eigenvalues clipped.

    Raises :class:`CovarianceError` when the matrix is not Hermitian or has an
    eigenvalue below -1e-10 * trace.
    """
    scale = max(float(np.abs(np.trace(matrix))), float(np.max(np.abs(matrix), initial=0.0)), np.finfo(float).tiny)
    if not np.all(np.isfinite(matrix)):
        raise CovarianceError("covariance has non-finite entries")
    if np.max(np.abs(matrix - matrix.conj().T), initial=0.0) > HERMITIAN_TOLERANCE * scale:
        raise CovarianceError("covariance is not Hermitian")
    hermitian = (matrix + matrix.conj().T) / 2.0
    eigenvalues, eigenvectors = np.linalg.eigh(hermitian)
    smallest = float(eigenvalues[0]) if eigenvalues.size else 0.0
    if smallest < -PSD_TOLERANCE * scale:
        raise CovarianceError(f"covariance is not positive semidefinite (eigenvalue {smallest:.3e})")
    if smallest < 0.0:
        logger.debug("clipping eigenvalues down to %.3e", smallest)
        hermitian = (eigenvectors * np.clip(eigenvalues, 0.0, None)) @ eigenvectors.conj().T
    return hermitian


def path_covariance(scenario: Scenario, ue: int) -> BlockCovariance:
    """Analytic covariance of UE ``ue`` in path-sum form."""
    responses = path_responses(scenario, ue)
    return BlockCovariance.from_paths(responses.weights, responses.ue_responses, responses.bs_responses)


def block(sigma: BlockCovariance, m: int, n: int) -> np.ndarray:
    """N x N block Sigma_mn = E[h_m h_n^H]."""
    if not (0 <= m < sigma.m and 0 <= n < sigma.m):
        raise IndexError(f"block ({m}, {n}) out of range for M={sigma.m}")
    if sigma.dense is not None:
        N = sigma.n
        return sigma.dense[m * N:(m + 1) * N, n * N:(n + 1) * N]
    w, a, b = sigma._paths()
    coefficients = w * b[:, m].conj() * b[:, n]
    return (a.T * coefficients) @ a.conj()


def _shaping(sigma: BlockCovariance, v: ShapingVector | np.ndarray) -> np.ndarray:
    coefficients = np.asarray(v, dtype=complex).reshape(-1)
    if coefficients.size != sigma.n:
        raise DimensionMismatchError(f"shaping vector has {coefficients.size} entries, UE has N={sigma.n}")
    return coefficients


def _retained_power(sigma: BlockCovariance, v: np.ndarray) -> np.ndarray:
    """|v^H a_p|^2 w_p per path."""
    w, a, _ = sigma._paths()
    return w * np.abs(a @ v.conj()) ** 2


def effective_covariance(sigma: BlockCovariance, v: ShapingVector | np.ndarray) -> EffectiveCovariance:
    """Phi(v), the M x M covariance of (v^H H)^H."""
    coefficients = _shaping(sigma, v)
    shaping = v if isinstance(v, ShapingVector) else None
    if sigma.dense is not None:
        q = np.einsum("i,minj,j->mn", coefficients.conj(), sigma._blocks(), coefficients)
        return EffectiveCovariance(q.T, shaping)
    _, _, b = sigma._paths()
    return EffectiveCovariance((b.T * _retained_power(sigma, coefficients)) @ b.conj(), shaping)


def effective_trace(sigma: BlockCovariance, v: ShapingVector | np.ndarray) -> float:
    """trace(Phi(v)) = v^H R v."""
    coefficients = _shaping(sigma, v)
    if sigma.dense is not None:
        return float(np.vdot(coefficients, receive_cov(sigma) @ coefficients).real)
    _, _, b = sigma._paths()
    return float(np.sum(_retained_power(sigma, coefficients) * np.sum(np.abs(b) ** 2, axis=1)))


def receive_cov(sigma: BlockCovariance) -> np.ndarray:
    """R = E[H H^H] = sum_m Sigma_mm (N x N)."""
    if sigma.dense is not None:
        return np.einsum("mimj->ij", sigma._blocks())
    w, a, b = sigma._paths()
    return (a.T * (w * np.sum(np.abs(b) ** 2, axis=1))) @ a.conj()


def transmit_cov(sigma: BlockCovariance) -> np.ndarray:
    """T = E[H^H H] with T[m, n] = trace(Sigma_nm) (M x M)."""
    if sigma.dense is not None:
        return np.einsum("nimi->mn", sigma._blocks())
    w, a, b = sigma._paths()
    return (b.T * (w * np.sum(np.abs(a) ** 2, axis=1))) @ b.conj()


def per_antenna_cov(sigma: BlockCovariance, n: int) -> np.ndarray:
    """Covariance of row ``n`` of H (as a column), entry (m, m') = Sigma_m'm[n, n]."""
    if not 0 <= n < sigma.n:
        raise IndexError(f"UE antenna {n} out of range for N={sigma.n}")
    if sigma.dense is not None:
        return sigma._blocks()[:, n, :, n].T
    w, a, b = sigma._paths()
    return (b.T * (w * np.abs(a[:, n]) ** 2)) @ b.conj()


def _require_trace(trace: float, sigma: BlockCovariance, who: str) -> float:
    if trace <= DEGENERATE_TRACE_RATIO * sigma.trace or trace <= 0.0:
        raise DegenerateShapingError(f"{who}: shaping vector nulls the whole channel (effective trace {trace:.3e})")
    return trace


def trace_product(phi_k: EffectiveCovariance, phi_j: EffectiveCovariance) -> float:
    """trace(Phi_k Phi_j) for Hermitian inputs."""
    return float(np.sum(phi_k.matrix * phi_j.matrix.T).real)


def delta_metric(
    sigma_k: BlockCovariance,
    sigma_j: BlockCovariance,
    v_k: ShapingVector | np.ndarray,
    v_j: ShapingVector | np.ndarray,
) -> float:
    """Spatial correlation trace(Phi_k Phi_j) / (trace(Phi_k) trace(Phi_j)).

    Raises :class:`DegenerateShapingError` when either effective trace is zero.
    """
    if sigma_k.m != sigma_j.m:
        raise DimensionMismatchError(f"UEs see different BS arrays: M={sigma_k.m} vs M={sigma_j.m}")
    ck, cj = _shaping(sigma_k, v_k), _shaping(sigma_j, v_j)

    if sigma_k.is_path_sum and sigma_j.is_path_sum:
        pk, pj = _retained_power(sigma_k, ck), _retained_power(sigma_j, cj)
        _, _, bk = sigma_k._paths()
        _, _, bj = sigma_j._paths()
        trace_k = _require_trace(float(np.sum(pk * np.sum(np.abs(bk) ** 2, axis=1))), sigma_k, "UE k")
        trace_j = _require_trace(float(np.sum(pj * np.sum(np.abs(bj) ** 2, axis=1))), sigma_j, "UE j")
        overlap = np.abs(bk.conj() @ bj.T) ** 2
        numerator = float(pk @ overlap @ pj)
    else:
        phi_k, phi_j = effective_covariance(sigma_k, ck), effective_covariance(sigma_j, cj)
        trace_k = _require_trace(phi_k.trace, sigma_k, "UE k")
        trace_j = _require_trace(phi_j.trace, sigma_j, "UE j")
        numerator = max(trace_product(phi_k, phi_j), 0.0)
    return numerator / (trace_k * trace_j)


def omega_sample(
    g_k: np.ndarray,
    g_j: np.ndarray,
    phi_k: EffectiveCovariance,
    phi_j: EffectiveCovariance,
) -> complex:
    """Normalized inner product of two effective channel rows (v^H H).

    The traces come from the effective covariances built with the same
    shaping vectors that produced the rows.
    """
    trace_k, trace_j = phi_k.trace, phi_j.trace
    if trace_k <= 0.0 or trace_j <= 0.0:
        raise DegenerateShapingError("effective channel with zero trace")
    return complex(np.vdot(g_j, g_k)) / math.sqrt(trace_k * trace_j)


def kronecker_covariance(receive: np.ndarray, transmit: np.ndarray) -> BlockCovariance:
    """Kronecker-structured covariance T^T kron R, blocks Sigma_mn = T[m, n]^* R."""
    receive = checked_psd(np.asarray(receive, dtype=complex))
    transmit = checked_psd(np.asarray(transmit, dtype=complex))
    return BlockCovariance.from_dense(
        np.kron(transmit.T, receive), receive.shape[0], transmit.shape[0], check=False
    )
