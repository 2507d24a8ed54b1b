import math
from pathlib import Path

import numpy as np
import pytest

from lib.covariance_model import BlockCovariance, path_covariance
from lib.scenario_geometry import ArrayGeometry, PropagationPath, Scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
CONFIGS = ROOT / "configs"


def make_scenario(
    rng: np.random.Generator,
    num_ues: int = 2,
    n: int = 2,
    m: int = 8,
    paths: int = 4,
    kappa: float = 0.0,
) -> Scenario:
    """Random single-bounce geometry with unit-scale powers (a LoS path first when kappa > 0)."""

    def ue_paths() -> tuple[PropagationPath, ...]:
        drawn = [
            PropagationPath(
                distance=float(rng.uniform(1.0, 2.0)),
                ue_angle=float(rng.uniform(0.0, math.pi)),
                bs_azimuth=float(rng.uniform(0.0, math.pi)),
            )
            for _ in range(paths)
        ]
        if kappa > 0.0:
            drawn.insert(0, PropagationPath(1.0, float(rng.uniform(0.0, math.pi)), float(rng.uniform(0.0, math.pi)), is_los=True))
        return tuple(drawn)

    return Scenario(
        bs_array=ArrayGeometry.ula(m),
        ue_arrays=tuple(ArrayGeometry.ula(n) for _ in range(num_ues)),
        paths=tuple(ue_paths() for _ in range(num_ues)),
        ricean_factor=kappa,
        pathloss_exponent=2.0,
        rho_bs=1.0,
        rho_ue=1.0,
        sigma2_bs=0.1,
        sigma2_ue=0.1,
    )


def random_psd(rng: np.random.Generator, size: int, rank: int | None = None) -> np.ndarray:
    rank = size if rank is None else rank
    x = rng.standard_normal((size, rank)) + 1j * rng.standard_normal((size, rank))
    return x @ x.conj().T / rank


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def scenario(rng) -> Scenario:
    return make_scenario(rng)


@pytest.fixture
def sigmas(scenario) -> list[BlockCovariance]:
    return [path_covariance(scenario, k) for k in range(scenario.num_ues)]
