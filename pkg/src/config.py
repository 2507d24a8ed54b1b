"""
Experiment configuration.

An experiment is described by a JSON file:

    {
        "scenario": "../scenarios/nlos_2ue.json",
        "schemes": ["covariance_shaping", "spatial_multiplexing"],
        "precoders": ["mmse"],
        "sweep": {"variable": "rho_bs", "values": [10, 20, 30, 40]},
        "fixed": {"M": 64, "d": 4.0},
        "trials": 500,
        "seed": 1,
        "scheduling": false,
        "pilot": {"groups": 1, "tau": null},
        "optimizer": {"accuracy": 1e-6, "step_size": 1.0, "init": "dominant"},
        "shaping": "optimized"
    }

Relative scenario paths are resolved against the config file's directory.
"""

import importlib.metadata
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from lib.shaping_optimizer import DEFAULT_ACCURACY, DEFAULT_MAX_ITERATIONS, InitStrategy, OptimizerSettings

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 500
DEFAULT_SLOTS = 2
THREADS_ENV = "COVSHAPE_THREADS"

try:
    LIBRARY_VERSION = importlib.metadata.version("covshape")
except importlib.metadata.PackageNotFoundError:
    LIBRARY_VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


class Scheme(str, Enum):
    COVARIANCE_SHAPING = "covariance_shaping"
    SPATIAL_MULTIPLEXING = "spatial_multiplexing"


class Precoder(str, Enum):
    MRT = "mrt"
    MMSE = "mmse"


class SweepVariable(str, Enum):
    RHO_BS = "rho_bs"
    RHO_UE = "rho_ue"
    D = "d"
    M = "M"


class ShapingMode(str, Enum):
    OPTIMIZED = "optimized"
    # every UE receives on its first antenna only
    BASELINE = "baseline"


@dataclass(frozen=True)
class SweepSpec:
    variable: SweepVariable
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ConfigError("sweep grid is empty")
        _check_value(self.variable, self.values)


@dataclass(frozen=True)
class PilotSpec:
    """Number of pilot groups P (default ceil(K/2)) and pilot length tau (default: the minimum)."""

    groups: int | None = None
    tau: int | None = None

    def groups_for(self, num_ues: int) -> int:
        return self.groups if self.groups is not None else math.ceil(num_ues / 2)


def _check_value(variable: SweepVariable, values: tuple[float, ...]) -> None:
    for value in values:
        if not math.isfinite(value):
            raise ConfigError(f"{variable.value}: non-finite value {value}")
        if variable is SweepVariable.D and value <= 0.0:
            raise ConfigError(f"inter-UE distance must be positive, got {value}")
        if variable is SweepVariable.M and (value < 1 or value != int(value)):
            raise ConfigError(f"BS antenna count must be a positive integer, got {value}")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Path
    schemes: tuple[Scheme, ...]
    precoders: tuple[Precoder, ...]
    sweep: SweepSpec
    fixed: dict[SweepVariable, float] = field(default_factory=dict)
    trials: int = DEFAULT_TRIALS
    seed: int = 0
    scheduling: bool = False
    slots: int = DEFAULT_SLOTS
    pilot: PilotSpec = PilotSpec()
    optimizer: OptimizerSettings = OptimizerSettings()
    shaping: ShapingMode = ShapingMode.OPTIMIZED
    shaping_groups: tuple[tuple[int, ...], ...] | None = None
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not self.schemes or not self.precoders:
            raise ConfigError("at least one scheme and one precoder are required")
        if self.slots < 1:
            raise ConfigError(f"slots must be at least 1, got {self.slots}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        for variable, value in self.fixed.items():
            _check_value(variable, (value,))

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready echo of the configuration."""
        return {
            "scenario": str(self.scenario),
            "schemes": [s.value for s in self.schemes],
            "precoders": [p.value for p in self.precoders],
            "sweep": {"variable": self.sweep.variable.value, "values": list(self.sweep.values)},
            "fixed": {k.value: v for k, v in self.fixed.items()},
            "trials": self.trials,
            "seed": self.seed,
            "scheduling": self.scheduling,
            "slots": self.slots,
            "pilot": {"groups": self.pilot.groups, "tau": self.pilot.tau},
            "optimizer": {
                "accuracy": self.optimizer.accuracy,
                "step_size": self.optimizer.step_size,
                "max_iterations": self.optimizer.max_iterations,
                "init": self.optimizer.init.value,
                "seed": self.optimizer.seed,
                "distributed": self.optimizer.distributed,
            },
            "shaping": self.shaping.value,
            "shaping_groups": None if self.shaping_groups is None else [list(g) for g in self.shaping_groups],
            "threads": self.threads,
        }


def _as_tuple(value: Any) -> tuple:
    return tuple(value) if isinstance(value, (list, tuple)) else (value,)


def _enum(kind: type[Enum], value: Any, what: str):
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(str(m.value) for m in kind)  # type: ignore[attr-defined]
        raise ConfigError(f"{what}: unknown value {value!r} (choose from {choices})") from None


def config_from_dict(document: dict[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed config document."""
    try:
        scenario = Path(document["scenario"])
        sweep = document["sweep"]
        variable = _enum(SweepVariable, sweep["variable"], "sweep variable")
        values = tuple(float(v) for v in sweep["values"])
    except KeyError as e:
        raise ConfigError(f"missing field {e}") from None
    if not scenario.is_absolute():
        scenario = base_dir / scenario

    schemes = _as_tuple(document.get("schemes", document.get("scheme", [s.value for s in Scheme])))
    precoders = _as_tuple(document.get("precoders", document.get("precoder", Precoder.MMSE.value)))
    pilot = document.get("pilot", {})
    optimizer = document.get("optimizer", {})
    groups = document.get("shaping_groups")
    try:
        settings = OptimizerSettings(
            accuracy=float(optimizer.get("accuracy", DEFAULT_ACCURACY)),
            step_size=float(optimizer.get("step_size", 1.0)),
            max_iterations=int(optimizer.get("max_iterations", DEFAULT_MAX_ITERATIONS)),
            init=_enum(InitStrategy, optimizer.get("init", InitStrategy.DOMINANT.value), "optimizer init"),
            seed=int(optimizer.get("seed", 0)),
            distributed=bool(optimizer.get("distributed", False)),
        )
    except ValueError as e:
        raise ConfigError(f"optimizer: {e}") from e

    return ExperimentConfig(
        scenario=scenario,
        schemes=tuple(_enum(Scheme, s, "scheme") for s in schemes),
        precoders=tuple(_enum(Precoder, p, "precoder") for p in precoders),
        sweep=SweepSpec(variable, values),
        fixed={_enum(SweepVariable, k, "fixed"): float(v) for k, v in document.get("fixed", {}).items()},
        trials=int(document.get("trials", DEFAULT_TRIALS)),
        seed=int(document.get("seed", 0)),
        scheduling=bool(document.get("scheduling", False)),
        slots=int(document.get("slots", DEFAULT_SLOTS)),
        pilot=PilotSpec(
            groups=None if pilot.get("groups") is None else int(pilot["groups"]),
            tau=None if pilot.get("tau") is None else int(pilot["tau"]),
        ),
        optimizer=settings,
        shaping=_enum(ShapingMode, document.get("shaping", ShapingMode.OPTIMIZED.value), "shaping"),
        shaping_groups=None if groups is None else tuple(tuple(int(k) for k in g) for g in groups),
        threads=None if document.get("threads") is None else int(document["threads"]),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    config = config_from_dict(document, base_dir=path.parent)
    logger.debug("loaded config %s: %s sweep over %d values", path, config.sweep.variable.value, len(config.sweep.values))
    return config


def resolve_threads(requested: int | None = None, config: ExperimentConfig | None = None) -> int:
    """Worker count: command line, then $COVSHAPE_THREADS, then the config, then the CPU count."""
    if requested is not None:
        return max(1, requested)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if config is not None and config.threads is not None:
        return config.threads
    return max(1, os.cpu_count() or 1)
