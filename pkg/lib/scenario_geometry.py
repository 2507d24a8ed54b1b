"""
`scenario_geometry`
================================================================================

Array geometries, multipath scenarios and instantaneous channel sampling for
the discrete physical channel model

    H_k = sqrt(k/(1+k)) d_k^(-b/2) c_0 a(theta_k) b(phi_k, psi_k)^H
        + sqrt(1/(1+k)) sum_u d_ku^(-b/2) alpha_ku a(theta_ku) b(phi_ku, psi_ku)^H

with Ricean factor k, pathloss exponent b, a uniform random LoS phase c_0 and
i.i.d. CN(0, 1) reflected gains alpha_ku.

Two descriptions of a scenario live here:

* :class:`Scenario` carries explicit per-path distances and angles and is what
  every other module consumes.
* :class:`ScenarioLayout` carries BS, UE and scatterer positions (meters) and
  derives the single-bounce paths with :meth:`ScenarioLayout.build`. Scenario
  JSON files describe layouts.
"""

import functools
import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SPACING_RATIO = 0.5
DEFAULT_BS_HEIGHT_M = 20.0
DEFAULT_UE_DISTANCE_M = 50.0
DEFAULT_UE_ANTENNAS = 2

Vector3 = tuple[float, float, float]


class GeometryMismatchError(ValueError):
    pass


class ScenarioError(ValueError):
    pass


def dbm_to_watts(value_dbm: float) -> float:
    """Convert a power in dBm to watts."""
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


def watts_to_dbm(value_w: float) -> float:
    """Convert a power in watts to dBm."""
    if value_w <= 0.0:
        raise ValueError(f"power must be positive, got {value_w} W")
    return 10.0 * math.log10(value_w) + 30.0


class ArrayKind(str, Enum):
    ULA = "ula"
    UPA = "upa"


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear or planar array.

    :param kind: :attr:`ArrayKind.ULA` or :attr:`ArrayKind.UPA`
    :param n_azimuth: elements along the azimuth axis (M_x, or N for a UE ULA)
    :param n_elevation: elements along the elevation axis (M_y, 1 for a ULA)
    :param spacing_ratio: antenna spacing over wavelength
    """

    kind: ArrayKind
    n_azimuth: int
    n_elevation: int = 1
    spacing_ratio: float = DEFAULT_SPACING_RATIO

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ArrayKind(self.kind))
        if self.n_azimuth < 1 or self.n_elevation < 1:
            raise ValueError(
                f"array needs at least one element per axis, got {self.n_azimuth}x{self.n_elevation}"
            )
        if self.kind is ArrayKind.ULA and self.n_elevation != 1:
            raise ValueError("a ULA has a single elevation row")
        if not self.spacing_ratio > 0.0:
            raise ValueError(f"spacing ratio must be positive, got {self.spacing_ratio}")

    @classmethod
    def ula(cls, n: int, spacing_ratio: float = DEFAULT_SPACING_RATIO) -> "ArrayGeometry":
        return cls(ArrayKind.ULA, n, 1, spacing_ratio)

    @classmethod
    def upa(cls, mx: int, my: int, spacing_ratio: float = DEFAULT_SPACING_RATIO) -> "ArrayGeometry":
        return cls(ArrayKind.UPA, mx, my, spacing_ratio)

    @property
    def size(self) -> int:
        """Total number of elements."""
        return self.n_azimuth * self.n_elevation


@dataclass(frozen=True)
class PropagationPath:
    """One propagation path between the BS and a UE.

    Angles in radians. ``distance`` is the total travelled length in meters.
    """

    distance: float
    ue_angle: float
    bs_azimuth: float
    bs_elevation: float = 0.0
    is_los: bool = False

    def __post_init__(self) -> None:
        if not (math.isfinite(self.distance) and self.distance > 0.0):
            raise ValueError(f"path distance must be positive and finite, got {self.distance}")


@dataclass(frozen=True)
class Scenario:
    """Geometry of BS and UEs plus propagation constants.

    Powers and noise variances are in watts. ``paths[k]`` lists the reflected
    paths of UE ``k`` and, when the Ricean factor is positive, its LoS path.
    """

    bs_array: ArrayGeometry
    ue_arrays: tuple[ArrayGeometry, ...]
    paths: tuple[tuple[PropagationPath, ...], ...]
    ricean_factor: float
    pathloss_exponent: float
    rho_bs: float
    rho_ue: float
    sigma2_bs: float
    sigma2_ue: float
    shaping_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ue_arrays", tuple(self.ue_arrays))
        object.__setattr__(self, "paths", tuple(tuple(p) for p in self.paths))
        if self.shaping_groups is not None:
            object.__setattr__(self, "shaping_groups", tuple(tuple(g) for g in self.shaping_groups))

        if len(self.ue_arrays) < 1:
            raise ScenarioError("scenario needs at least one UE")
        if len(self.paths) != len(self.ue_arrays):
            raise ScenarioError(
                f"{len(self.ue_arrays)} UE arrays but {len(self.paths)} path lists"
            )
        for k, array in enumerate(self.ue_arrays):
            if array.kind is not ArrayKind.ULA:
                raise ScenarioError(f"UE {k}: UE arrays must be ULAs")
        if not (math.isfinite(self.ricean_factor) and self.ricean_factor >= 0.0):
            raise ScenarioError(f"Ricean factor must be >= 0, got {self.ricean_factor}")
        for k, ue_paths in enumerate(self.paths):
            n_los = sum(1 for p in ue_paths if p.is_los)
            if n_los > 1:
                raise ScenarioError(f"UE {k}: at most one LoS path, got {n_los}")
            if self.ricean_factor == 0.0 and n_los:
                raise ScenarioError(f"UE {k}: Ricean factor 0 describes an NLoS scenario, drop the LoS path")
            if self.ricean_factor == 0.0 and not ue_paths:
                raise ScenarioError(f"UE {k}: no reflected paths and no LoS, the channel is identically zero")
        for name in ("rho_bs", "rho_ue", "sigma2_bs", "sigma2_ue"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ScenarioError(f"{name} must be positive and finite, got {value}")
        if self.shaping_groups is not None:
            members = sorted(k for g in self.shaping_groups for k in g)
            if members != list(range(self.num_ues)):
                raise ScenarioError("shaping groups must partition the UEs")

    @property
    def num_ues(self) -> int:
        return len(self.ue_arrays)

    @property
    def num_bs_antennas(self) -> int:
        return self.bs_array.size

    @property
    def snr_bs(self) -> float:
        """Downlink transmit SNR rho_BS / sigma2_UE."""
        return self.rho_bs / self.sigma2_ue

    @property
    def snr_ue(self) -> float:
        """Uplink transmit SNR rho_UE / sigma2_BS."""
        return self.rho_ue / self.sigma2_bs

    def ue_antennas(self, ue: int) -> int:
        return self.ue_arrays[ue].size

    def groups(self) -> tuple[tuple[int, ...], ...]:
        """UE groups optimized independently (one group when unset)."""
        if self.shaping_groups is None:
            return (tuple(range(self.num_ues)),)
        return self.shaping_groups


@dataclass(frozen=True)
class ChannelRealization:
    """Instantaneous channels, ``matrices[k]`` is H_k of shape N x M."""

    matrices: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrices", tuple(self.matrices))
        for k, h in enumerate(self.matrices):
            if h.ndim != 2:
                raise ValueError(f"UE {k}: channel must be a matrix, got shape {h.shape}")
            if not np.all(np.isfinite(h)):
                raise ValueError(f"UE {k}: channel has non-finite entries")

    def __len__(self) -> int:
        return len(self.matrices)

    def __getitem__(self, ue: int) -> np.ndarray:
        return self.matrices[ue]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.matrices)


# ----------------------------------------------------------------
# Array responses
# ----------------------------------------------------------------
def _steering(n: int, spacing_ratio: float, cosine: float) -> np.ndarray:
    return np.exp(-1j * 2.0 * np.pi * spacing_ratio * np.arange(n) * cosine)


def ula_response(geometry: ArrayGeometry, theta: float) -> np.ndarray:
    """ULA response a(theta), element n is exp(-i 2 pi delta n cos(theta))."""
    if geometry.kind is not ArrayKind.ULA:
        raise GeometryMismatchError(f"ula_response needs a ULA, got {geometry.kind.value}")
    return _steering(geometry.n_azimuth, geometry.spacing_ratio, math.cos(theta))


def upa_response(geometry: ArrayGeometry, phi: float, psi: float) -> np.ndarray:
    """UPA response b(phi, psi): azimuth factor (cos phi) kron elevation factor (sin psi).

    A ULA is handled as a UPA with a single elevation row.
    """
    azimuth = _steering(geometry.n_azimuth, geometry.spacing_ratio, math.cos(phi))
    elevation = _steering(geometry.n_elevation, geometry.spacing_ratio, math.sin(psi))
    return np.kron(azimuth, elevation)


# ----------------------------------------------------------------
# Path-level quantities shared with the covariance model
# ----------------------------------------------------------------
@dataclass(frozen=True)
class PathResponses:
    """Per-path power weights and array responses of one UE.

    ``weights[p]`` is the mean power of path ``p``; rows of ``ue_responses``
    (N) and ``bs_responses`` (M) are a_p and b_p. ``los_index`` marks the LoS
    row, or is ``None``.
    """

    weights: np.ndarray
    ue_responses: np.ndarray
    bs_responses: np.ndarray
    los_index: int | None


def _los_path(scenario: Scenario, ue: int) -> PropagationPath | None:
    ue_paths = scenario.paths[ue]
    los = next((p for p in ue_paths if p.is_los), None)
    if scenario.ricean_factor > 0.0 and los is None:
        raise ScenarioError(f"UE {ue}: Ricean factor {scenario.ricean_factor} but no LoS path")
    return los


@functools.lru_cache(maxsize=512)
def path_responses(scenario: Scenario, ue: int) -> PathResponses:
    """Weights and responses of every path of UE ``ue`` (cached, read-only)."""
    if not 0 <= ue < scenario.num_ues:
        raise IndexError(f"UE index {ue} out of range for {scenario.num_ues} UEs")
    _los_path(scenario, ue)

    kappa = scenario.ricean_factor
    beta = scenario.pathloss_exponent
    ue_array = scenario.ue_arrays[ue]
    weights, a_rows, b_rows = [], [], []
    los_index = None
    for path in scenario.paths[ue]:
        if path.is_los:
            los_index = len(weights)
            share = kappa / (1.0 + kappa)
        else:
            share = 1.0 / (1.0 + kappa)
        weights.append(share * path.distance ** (-beta))
        a_rows.append(ula_response(ue_array, path.ue_angle))
        b_rows.append(upa_response(scenario.bs_array, path.bs_azimuth, path.bs_elevation))

    responses = PathResponses(
        weights=np.asarray(weights, dtype=float),
        ue_responses=np.asarray(a_rows, dtype=complex).reshape(len(a_rows), ue_array.size),
        bs_responses=np.asarray(b_rows, dtype=complex).reshape(len(b_rows), scenario.num_bs_antennas),
        los_index=los_index,
    )
    for array in (responses.weights, responses.ue_responses, responses.bs_responses):
        array.setflags(write=False)
    return responses


# ----------------------------------------------------------------
# Channel sampling
# ----------------------------------------------------------------
def path_gains(responses: PathResponses, rng: np.random.Generator) -> np.ndarray:
    """Draw one set of random path gains: CN(0, 1) for reflected paths and a
    uniform phase for the LoS path."""
    n_paths = responses.weights.size
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / math.sqrt(2.0)
    if responses.los_index is not None:
        gains[responses.los_index] = np.exp(1j * rng.uniform(0.0, 2.0 * math.pi))
    return gains


def sample_channel(scenario: Scenario, ue: int, rng: np.random.Generator) -> np.ndarray:
    """Draw H_k (N x M) from the discrete physical channel model."""
    responses = path_responses(scenario, ue)
    gains = path_gains(responses, rng) * np.sqrt(responses.weights)
    return (responses.ue_responses.T * gains) @ responses.bs_responses.conj()


def sample_channels(scenario: Scenario, rng: np.random.Generator) -> ChannelRealization:
    """Draw the channels of all UEs, in UE order, from one random source."""
    return ChannelRealization(tuple(sample_channel(scenario, k, rng) for k in range(scenario.num_ues)))


# ----------------------------------------------------------------
# Position-based layouts
# ----------------------------------------------------------------
def _vector3(values: Sequence[float], what: str) -> Vector3:
    coords = [float(v) for v in values]
    if len(coords) == 2:
        coords.append(0.0)
    if len(coords) != 3:
        raise ScenarioError(f"{what}: expected 2 or 3 coordinates, got {len(coords)}")
    return (coords[0], coords[1], coords[2])


def _bs_angles(direction: np.ndarray) -> tuple[float, float]:
    """Azimuth in the horizontal plane from the array x axis, elevation from
    the horizontal plane."""
    horizontal = math.hypot(direction[0], direction[1])
    return math.atan2(direction[1], direction[0]), math.atan2(direction[2], horizontal)


def _ue_angle(direction: np.ndarray, axis: np.ndarray) -> float:
    cosine = float(np.dot(direction, axis) / (np.linalg.norm(direction) * np.linalg.norm(axis)))
    return math.acos(min(1.0, max(-1.0, cosine)))


@dataclass(frozen=True)
class UePlacement:
    """One UE of a layout.

    The position is either absolute (``position``) or on the layout's UE row:
    ``row_origin + shift + slot * row_spacing * row_direction``. ``scatterers``
    restricts the visible scatterers (indices), ``None`` means all.
    """

    position: Vector3 | None = None
    slot: float | None = None
    shift: Vector3 = (0.0, 0.0, 0.0)
    n_antennas: int = DEFAULT_UE_ANTENNAS
    spacing_ratio: float = DEFAULT_SPACING_RATIO
    axis: Vector3 = (1.0, 0.0, 0.0)
    scatterers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if (self.position is None) == (self.slot is None):
            raise ScenarioError("a UE needs exactly one of 'position' or 'slot'")


@dataclass(frozen=True)
class ScenarioLayout:
    """Positions of BS, UEs and scatterers plus propagation constants.

    Powers are kept in dBm, the unit of scenario files; :meth:`build`
    converts them to watts.
    """

    bs_array: ArrayGeometry
    bs_position: Vector3
    ues: tuple[UePlacement, ...]
    scatterers: tuple[Vector3, ...]
    kappa: float
    beta: float
    rho_bs_dbm: float
    rho_ue_dbm: float
    sigma2_bs_dbm: float
    sigma2_ue_dbm: float
    row_origin: Vector3 = (0.0, DEFAULT_UE_DISTANCE_M, 0.0)
    row_direction: Vector3 = (1.0, 0.0, 0.0)
    row_spacing: float = 4.0
    shaping_groups: tuple[tuple[int, ...], ...] | None = None
    name: str = ""

    def ue_position(self, ue: int) -> np.ndarray:
        placement = self.ues[ue]
        if placement.position is not None:
            return np.asarray(placement.position, dtype=float)
        assert placement.slot is not None
        direction = np.asarray(self.row_direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
        return (
            np.asarray(self.row_origin, dtype=float)
            + np.asarray(placement.shift, dtype=float)
            + placement.slot * self.row_spacing * direction
        )

    def _ue_paths(self, ue: int) -> tuple[PropagationPath, ...]:
        placement = self.ues[ue]
        bs = np.asarray(self.bs_position, dtype=float)
        position = self.ue_position(ue)
        axis = np.asarray(placement.axis, dtype=float)
        visible = range(len(self.scatterers)) if placement.scatterers is None else placement.scatterers

        paths = []
        if self.kappa > 0.0:
            to_ue = position - bs
            distance = float(np.linalg.norm(to_ue))
            if distance == 0.0:
                raise ScenarioError(f"UE {ue} sits on the BS")
            azimuth, elevation = _bs_angles(to_ue)
            paths.append(PropagationPath(distance, _ue_angle(-to_ue, axis), azimuth, elevation, is_los=True))
        for s in visible:
            if not 0 <= s < len(self.scatterers):
                raise ScenarioError(f"UE {ue}: scatterer index {s} out of range")
            scatterer = np.asarray(self.scatterers[s], dtype=float)
            to_scatterer = scatterer - bs
            from_ue = scatterer - position
            first, second = float(np.linalg.norm(to_scatterer)), float(np.linalg.norm(from_ue))
            if first == 0.0 or second == 0.0:
                raise ScenarioError(f"UE {ue}: scatterer {s} coincides with the BS or the UE")
            azimuth, elevation = _bs_angles(to_scatterer)
            paths.append(PropagationPath(first + second, _ue_angle(from_ue, axis), azimuth, elevation))
        return tuple(paths)

    def build(self) -> Scenario:
        """Derive single-bounce paths and return the path-based scenario."""
        return Scenario(
            bs_array=self.bs_array,
            ue_arrays=tuple(ArrayGeometry.ula(u.n_antennas, u.spacing_ratio) for u in self.ues),
            paths=tuple(self._ue_paths(k) for k in range(len(self.ues))),
            ricean_factor=self.kappa,
            pathloss_exponent=self.beta,
            rho_bs=dbm_to_watts(self.rho_bs_dbm),
            rho_ue=dbm_to_watts(self.rho_ue_dbm),
            sigma2_bs=dbm_to_watts(self.sigma2_bs_dbm),
            sigma2_ue=dbm_to_watts(self.sigma2_ue_dbm),
            shaping_groups=self.shaping_groups,
        )

    def with_spacing(self, d: float) -> "ScenarioLayout":
        """Same layout with inter-UE distance ``d`` along the UE row."""
        if not d > 0.0:
            raise ScenarioError(f"inter-UE distance must be positive, got {d}")
        return replace(self, row_spacing=float(d))

    def with_bs_antennas(self, m: int) -> "ScenarioLayout":
        """Same layout with ``m`` BS antennas; a UPA keeps its elevation rows."""
        rows = self.bs_array.n_elevation
        if m < 1 or m % rows:
            raise ScenarioError(f"{m} BS antennas cannot fill {rows} elevation rows")
        return replace(self, bs_array=replace(self.bs_array, n_azimuth=m // rows))

    def with_powers(self, rho_bs_dbm: float | None = None, rho_ue_dbm: float | None = None,
                    sigma2_ue_dbm: float | None = None) -> "ScenarioLayout":
        return replace(
            self,
            rho_bs_dbm=self.rho_bs_dbm if rho_bs_dbm is None else float(rho_bs_dbm),
            rho_ue_dbm=self.rho_ue_dbm if rho_ue_dbm is None else float(rho_ue_dbm),
            sigma2_ue_dbm=self.sigma2_ue_dbm if sigma2_ue_dbm is None else float(sigma2_ue_dbm),
        )


def _require(document: dict[str, Any], key: str, where: str) -> Any:
    try:
        return document[key]
    except KeyError:
        raise ScenarioError(f"{where}: missing field '{key}'") from None


def layout_from_dict(document: dict[str, Any], name: str = "") -> ScenarioLayout:
    """Build a :class:`ScenarioLayout` from a parsed scenario document."""
    bs = _require(document, "bs", name)
    kind = ArrayKind(str(bs.get("kind", "ula")).lower())
    mx = int(_require(bs, "mx", f"{name}: bs"))
    my = int(bs.get("my", 1))
    spacing = float(bs.get("spacing", DEFAULT_SPACING_RATIO))
    bs_array = ArrayGeometry(kind, mx, my, spacing)
    default_height = DEFAULT_BS_HEIGHT_M if kind is ArrayKind.UPA else 0.0
    bs_position = _vector3(bs.get("position", [0.0, 0.0, default_height]), f"{name}: bs position")

    ues = []
    for k, entry in enumerate(_require(document, "ues", name)):
        scatterers = entry.get("scatterers")
        ues.append(
            UePlacement(
                position=_vector3(entry["position"], f"{name}: UE {k}") if "position" in entry else None,
                slot=float(entry["slot"]) if "slot" in entry else None,
                shift=_vector3(entry.get("shift", [0.0, 0.0, 0.0]), f"{name}: UE {k} shift"),
                n_antennas=int(entry.get("n_antennas", DEFAULT_UE_ANTENNAS)),
                spacing_ratio=float(entry.get("spacing", DEFAULT_SPACING_RATIO)),
                axis=_vector3(entry.get("axis", [1.0, 0.0, 0.0]), f"{name}: UE {k} axis"),
                scatterers=None if scatterers is None else tuple(int(s) for s in scatterers),
            )
        )

    row = document.get("ue_row", {})
    powers = _require(document, "powers", name)
    noise = _require(document, "noise", name)
    groups = document.get("shaping_groups")
    return ScenarioLayout(
        bs_array=bs_array,
        bs_position=bs_position,
        ues=tuple(ues),
        scatterers=tuple(_vector3(s, f"{name}: scatterer") for s in document.get("scatterers", [])),
        kappa=float(document.get("kappa", 0.0)),
        beta=float(document.get("beta", 2.0)),
        rho_bs_dbm=float(_require(powers, "rho_bs_dbm", f"{name}: powers")),
        rho_ue_dbm=float(_require(powers, "rho_ue_dbm", f"{name}: powers")),
        sigma2_bs_dbm=float(_require(noise, "sigma2_bs_dbm", f"{name}: noise")),
        sigma2_ue_dbm=float(_require(noise, "sigma2_ue_dbm", f"{name}: noise")),
        row_origin=_vector3(row.get("origin", [0.0, DEFAULT_UE_DISTANCE_M, 0.0]), f"{name}: ue_row origin"),
        row_direction=_vector3(row.get("direction", [1.0, 0.0, 0.0]), f"{name}: ue_row direction"),
        row_spacing=float(row.get("spacing", 4.0)),
        shaping_groups=None if groups is None else tuple(tuple(int(k) for k in g) for g in groups),
        name=str(document.get("name", name)),
    )


def load_layout(path: str | Path) -> ScenarioLayout:
    """Read a scenario JSON file."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: invalid JSON ({e})") from e
    layout = layout_from_dict(document, name=path.stem)
    logger.debug("loaded scenario %s: %d UEs, %d scatterers", path, len(layout.ues), len(layout.scatterers))
    return layout


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario JSON file and derive its paths."""
    return load_layout(path).build()
