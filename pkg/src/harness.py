"""
Monte-Carlo experiment harness.

For every sweep point the statistics-only work (covariances, shaping
vectors, MMSE filters) is done once; trials then draw channels and pilot
noise from a random source derived from (seed, point, trial, stream) and run
in parallel. Results are aggregated in trial order, so the output does not
depend on the number of workers.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from lib.covariance_model import BlockCovariance, ShapingVector, effective_covariance, path_covariance
from lib.pilots_estimation import (
    MmseEstimator,
    PilotBook,
    PilotMode,
    build_pilot_book,
    effective_channels,
    prepare_estimator,
    simulate_effective_rx,
    simulate_pilot_rx,
    summarize_nmse,
    trial_nmse,
)
from lib.scenario_geometry import Scenario, ScenarioLayout, load_layout, sample_channels
from lib.shaping_optimizer import OptimizerReport, OptimizerSettings, dominant_vector, optimize_multi, optimize_pair
from lib.transmission_rates import (
    PrecodingMatrix,
    effective_sinr_imperfect,
    effective_sinr_perfect,
    ergodic_rate_lb,
    mmse_precoder,
    mrt_precoder,
    sum_rate_cs,
    sum_rate_sm,
    ue_combiner_sm,
)
from src.config import LIBRARY_VERSION, ExperimentConfig, Precoder, Scheme, ShapingMode, SweepVariable

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "sweep_var",
    "value",
    "scheme",
    "precoder",
    "mean_sum_rate_bps_hz",
    "stderr",
    "mean_nmse",
    "iterations",
    "trials",
    "seed",
]
CSV_FLOAT_FORMAT = "%.12g"

# independent random streams of one trial
_CHANNEL_STREAM = 0
_PILOT_STREAM = {Scheme.COVARIANCE_SHAPING: 1, Scheme.SPATIAL_MULTIPLEXING: 2}


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResultRecord:
    """Aggregated outcome of one (sweep point, scheme, precoder)."""

    sweep_var: str
    value: float
    scheme: str
    precoder: str
    mean_sum_rate_bps_hz: float
    stderr: float
    mean_nmse: float
    iterations: int
    trials: int
    seed: int
    per_ue_rate: tuple[float, ...] = ()
    per_ue_nmse: tuple[float, ...] = ()
    nmse_excluded: tuple[int, ...] = ()
    wall_time_s: float = 0.0
    objective_traces: tuple[tuple[float, ...], ...] = ()
    mean_precoder_norm: float | None = None
    ergodic_lb_imperfect: float | None = None
    ergodic_lb_perfect: float | None = None
    pilot_energy: tuple[float, ...] = ()

    def to_row(self) -> dict[str, Any]:
        return {column: getattr(self, column) for column in CSV_COLUMNS}


# ----------------------------------------------------------------
# Per-point preparation
# ----------------------------------------------------------------
def apply_sweep(layout: ScenarioLayout, variable: SweepVariable, value: float) -> ScenarioLayout:
    """Layout with one swept quantity replaced."""
    match variable:
        case SweepVariable.RHO_BS:
            return layout.with_powers(rho_bs_dbm=value)
        case SweepVariable.RHO_UE:
            return layout.with_powers(rho_ue_dbm=value)
        case SweepVariable.D:
            return layout.with_spacing(value)
        case SweepVariable.M:
            return layout.with_bs_antennas(int(value))
        case _:
            raise ExperimentError(f"unknown sweep variable {variable!r}")


def point_layout(config: ExperimentConfig, value: float, base: ScenarioLayout | None = None) -> ScenarioLayout:
    layout = base if base is not None else load_layout(config.scenario)
    for variable, fixed in config.fixed.items():
        layout = apply_sweep(layout, variable, fixed)
    return apply_sweep(layout, config.sweep.variable, value)


def shaping_groups(config: ExperimentConfig, scenario: Scenario) -> tuple[tuple[int, ...], ...]:
    if config.shaping_groups is not None:
        return config.shaping_groups
    return scenario.groups()


def shape_groups(
    sigmas: Sequence[BlockCovariance],
    groups: Sequence[Sequence[int]],
    settings: OptimizerSettings,
) -> tuple[list[ShapingVector], list[OptimizerReport]]:
    """Shaping vectors for every UE, optimized independently per group."""
    vectors: list[ShapingVector | None] = [None] * len(sigmas)
    reports = []
    for group in groups:
        members = [sigmas[k] for k in group]
        local = settings
        if settings.initial_vectors is not None:
            local = replace(settings, initial_vectors=tuple(settings.initial_vectors[k] for k in group))
        if len(group) == 1:
            vectors[group[0]] = dominant_vector(members[0])
            continue
        report = optimize_pair(*members, local) if len(group) == 2 else optimize_multi(members, local)
        reports.append(report)
        for k, v in zip(group, report.vectors):
            vectors[k] = v
    missing = [k for k, v in enumerate(vectors) if v is None]
    if missing:
        raise ExperimentError(f"UEs {missing} are not in any shaping group")
    return [v for v in vectors if v is not None], reports


def compute_shaping(
    config: ExperimentConfig,
    sigmas: Sequence[BlockCovariance],
    groups: Sequence[Sequence[int]],
) -> tuple[list[ShapingVector], list[OptimizerReport]]:
    if config.shaping is ShapingMode.BASELINE:
        return [ShapingVector.basis(sigma.n, 0) for sigma in sigmas], []
    return shape_groups(sigmas, groups, config.optimizer)


def slot_groups(groups: Sequence[Sequence[int]], slots: Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    """Shaping groups split along the scheduling slots; UEs of different slots never interfere."""
    return [
        part
        for group in groups
        for slot in slots
        if (part := tuple(k for k in group if k in slot))
    ]


def _slots(config: ExperimentConfig, num_ues: int) -> list[tuple[int, ...]]:
    if not config.scheduling:
        return [tuple(range(num_ues))]
    slots = [tuple(k for k in range(num_ues) if k % config.slots == s) for s in range(config.slots)]
    return [slot for slot in slots if slot]


def _book(config: ExperimentConfig, scheme: Scheme, members: Sequence[int], n_antennas: int) -> PilotBook:
    """Pilot book of one slot: shared groups unscheduled, orthogonal pilots when scheduled."""
    mode = PilotMode.EFFECTIVE if scheme is Scheme.COVARIANCE_SHAPING else PilotMode.FULL
    rows = 1 if mode is PilotMode.EFFECTIVE else n_antennas
    if config.scheduling:
        groups = len(members)
        tau = groups * rows
    else:
        groups = config.pilot.groups_for(len(members))
        tau = config.pilot.tau if config.pilot.tau is not None else groups * rows
    return build_pilot_book(mode, len(members), groups, tau, n_antennas=n_antennas)


@dataclass
class _Slot:
    members: tuple[int, ...]
    book: PilotBook
    estimator: MmseEstimator


@dataclass
class _SchemePlan:
    scheme: Scheme
    slots: list[_Slot]
    fraction: float
    shaping: list[ShapingVector] = field(default_factory=list)


@dataclass
class PointPlan:
    """Everything a trial needs that depends on statistics only."""

    scenario: Scenario
    sigmas: list[BlockCovariance]
    schemes: list[_SchemePlan]
    precoders: tuple[Precoder, ...]
    reports: list[OptimizerReport]
    seed: int
    point: int


def prepare_point(config: ExperimentConfig, layout: ScenarioLayout, point: int) -> PointPlan:
    scenario = layout.build()
    sigmas = [path_covariance(scenario, k) for k in range(scenario.num_ues)]
    slots = _slots(config, scenario.num_ues)
    fraction = 1.0 / len(slots)

    plans, reports = [], []
    for scheme in config.schemes:
        shaping: list[ShapingVector] = []
        if scheme is Scheme.COVARIANCE_SHAPING:
            groups = slot_groups(shaping_groups(config, scenario), slots)
            shaping, reports = compute_shaping(config, sigmas, groups)
        else:
            sizes = {sigma.n for sigma in sigmas}
            if len(sizes) != 1:
                raise ExperimentError("spatial multiplexing needs the same number of antennas at every UE")
        slot_plans = []
        for members in slots:
            n_antennas = sigmas[members[0]].n
            book = _book(config, scheme, members, n_antennas)
            estimator = prepare_estimator(
                book,
                [sigmas[k] for k in members],
                scenario.rho_ue,
                scenario.sigma2_bs,
                shaping=[shaping[k] for k in members] if shaping else None,
            )
            slot_plans.append(_Slot(members, book, estimator))
        plans.append(_SchemePlan(scheme, slot_plans, fraction, shaping))
    return PointPlan(scenario, sigmas, plans, config.precoders, reports, config.seed, point)


# ----------------------------------------------------------------
# One trial
# ----------------------------------------------------------------
def trial_rng(seed: int, point: int, trial: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, point, trial, stream]))


def _precode(precoder: Precoder, estimates, snr_bs: float) -> PrecodingMatrix:
    if precoder is Precoder.MRT:
        return mrt_precoder(estimates)
    return mmse_precoder(estimates, snr_bs)


def run_trial(plan: PointPlan, trial: int) -> dict[str, Any]:
    """Rates, NMSE and precoder norms of one channel realization."""
    scenario = plan.scenario
    channels = sample_channels(scenario, trial_rng(plan.seed, plan.point, trial, _CHANNEL_STREAM))
    num_ues = scenario.num_ues
    outcome: dict[str, Any] = {}

    for scheme_plan in plan.schemes:
        scheme = scheme_plan.scheme
        rng = trial_rng(plan.seed, plan.point, trial, _PILOT_STREAM[scheme])
        nmse = np.full(num_ues, np.nan)
        rates = {p: np.zeros(num_ues) for p in plan.precoders}
        norms = {p: 0.0 for p in plan.precoders}

        for slot in scheme_plan.slots:
            members = slot.members
            h = [channels[k] for k in members]
            if scheme is Scheme.COVARIANCE_SHAPING:
                shaping = [scheme_plan.shaping[k] for k in members]
                truths = effective_channels(h, shaping)
                observation = simulate_effective_rx(truths, slot.book, scenario.rho_ue, scenario.sigma2_bs, rng)
            else:
                truths = h
                observation = simulate_pilot_rx(h, slot.book, scenario.rho_ue, scenario.sigma2_bs, rng)
            estimates = slot.estimator.estimate(observation)
            nmse[list(members)] = trial_nmse(estimates, truths)

            for precoder in plan.precoders:
                w = _precode(precoder, estimates, scenario.snr_bs)
                if scheme is Scheme.COVARIANCE_SHAPING:
                    breakdown = sum_rate_cs(truths, w, shaping, scenario.snr_bs)
                else:
                    combiners = [
                        ue_combiner_sm(hk, w, i, scenario.rho_bs, scenario.sigma2_ue) for i, hk in enumerate(h)
                    ]
                    breakdown = sum_rate_sm(h, w, combiners, scenario.snr_bs)
                rates[precoder][list(members)] += breakdown.scaled(scheme_plan.fraction).per_ue(len(members))
                norms[precoder] += w.frobenius_norm * scheme_plan.fraction

        outcome[scheme.value] = {"nmse": nmse, "rates": rates, "norms": norms}
    return outcome


# ----------------------------------------------------------------
# Aggregation
# ----------------------------------------------------------------
def _stderr(samples: np.ndarray) -> float:
    if samples.size < 2:
        return 0.0
    return float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def _ergodic_bounds(plan: PointPlan, scheme_plan: _SchemePlan) -> tuple[float, float]:
    scenario = plan.scenario
    imperfect = perfect = 0.0
    for slot in scheme_plan.slots:
        phis = [effective_covariance(plan.sigmas[k], scheme_plan.shaping[k]).matrix for k in slot.members]
        imperfect += ergodic_rate_lb(effective_sinr_imperfect(phis, slot.book, scenario.snr_bs, scenario.snr_ue))
        perfect += ergodic_rate_lb(effective_sinr_perfect(phis, scenario.snr_bs))
    return imperfect * scheme_plan.fraction, perfect * scheme_plan.fraction


def run_point(
    config: ExperimentConfig,
    value: float,
    point: int = 0,
    layout: ScenarioLayout | None = None,
    threads: int = 1,
) -> list[ResultRecord]:
    """One record per (scheme, precoder) at sweep value ``value``."""
    started = time.perf_counter()
    plan = prepare_point(config, point_layout(config, value, layout), point)
    outcomes = Parallel(n_jobs=threads, prefer="threads")(
        delayed(run_trial)(plan, t) for t in range(config.trials)
    )
    elapsed = time.perf_counter() - started
    iterations = max((r.iterations for r in plan.reports), default=0)

    records = []
    for scheme_plan in plan.schemes:
        scheme = scheme_plan.scheme
        results = [outcome[scheme.value] for outcome in outcomes]
        nmse = summarize_nmse(np.array([r["nmse"] for r in results]))
        energies = tuple(slot.book.total_energy(i) for slot in scheme_plan.slots for i in range(len(slot.members)))
        shaped = scheme is Scheme.COVARIANCE_SHAPING
        bounds = _ergodic_bounds(plan, scheme_plan) if shaped else (None, None)
        for precoder in plan.precoders:
            per_trial = np.array([r["rates"][precoder] for r in results])
            totals = per_trial.sum(axis=1)
            mrt = precoder is Precoder.MRT
            records.append(
                ResultRecord(
                    sweep_var=config.sweep.variable.value,
                    value=float(value),
                    scheme=scheme.value,
                    precoder=precoder.value,
                    mean_sum_rate_bps_hz=float(np.mean(totals)),
                    stderr=_stderr(totals),
                    mean_nmse=float(np.mean(nmse.values)),
                    iterations=iterations if shaped else 0,
                    trials=config.trials,
                    seed=config.seed,
                    per_ue_rate=tuple(float(x) for x in per_trial.mean(axis=0)),
                    per_ue_nmse=tuple(float(x) for x in nmse.values),
                    nmse_excluded=tuple(int(x) for x in nmse.excluded),
                    wall_time_s=elapsed,
                    objective_traces=tuple(r.objective_trace for r in plan.reports) if shaped else (),
                    mean_precoder_norm=float(np.mean([r["norms"][precoder] for r in results])),
                    ergodic_lb_imperfect=bounds[0] if mrt else None,
                    ergodic_lb_perfect=bounds[1] if mrt else None,
                    pilot_energy=energies,
                )
            )
    logger.info(
        "%s=%g: %s (%.1f s)",
        config.sweep.variable.value,
        value,
        ", ".join(f"{r.scheme}/{r.precoder} {r.mean_sum_rate_bps_hz:.3f}" for r in records),
        elapsed,
    )
    return records


def run_sweep(config: ExperimentConfig, threads: int = 1, progress: bool = False) -> list[ResultRecord]:
    """Records for every grid value, in grid order."""
    try:
        base = load_layout(config.scenario)
    except OSError as e:
        raise ExperimentError(f"cannot read scenario {config.scenario}: {e}") from e
    records = []
    variable = config.sweep.variable.value
    for point, value in enumerate(tqdm(config.sweep.values, desc=f"sweep {variable}", disable=not progress)):
        try:
            records.extend(run_point(config, value, point=point, layout=base, threads=threads))
        except ExperimentError:
            raise
        except (ValueError, ArithmeticError) as e:
            raise ExperimentError(f"{variable}={value:g}: {e}") from e
    return records


# ----------------------------------------------------------------
# Stand-alone estimation runs
# ----------------------------------------------------------------
def run_estimation(
    layout: ScenarioLayout,
    mode: PilotMode,
    trials: int,
    seed: int,
    groups: int | None = None,
    tau: int | None = None,
    config: ExperimentConfig | None = None,
    threads: int = 1,
    settings: OptimizerSettings | None = None,
) -> np.ndarray:
    """Mean NMSE per UE of the pilot phase alone.

    Effective mode shapes with the optimized vectors of the scenario groups:
    ``config`` decides the mode and settings when given, ``settings`` (default
    ``OptimizerSettings()``) otherwise.
    """
    scenario = layout.build()
    sigmas = [path_covariance(scenario, k) for k in range(scenario.num_ues)]
    num_groups = groups if groups is not None else math.ceil(scenario.num_ues / 2)
    n_antennas = sigmas[0].n
    rows = 1 if mode is PilotMode.EFFECTIVE else n_antennas
    book = build_pilot_book(mode, scenario.num_ues, num_groups, tau if tau is not None else num_groups * rows, n_antennas)

    shaping = None
    if mode is PilotMode.EFFECTIVE:
        if config is not None:
            shaping, _ = compute_shaping(config, sigmas, shaping_groups(config, scenario))
        else:
            shaping, _ = shape_groups(sigmas, scenario.groups(), settings or OptimizerSettings())
    estimator = prepare_estimator(book, sigmas, scenario.rho_ue, scenario.sigma2_bs, shaping=shaping)

    def one(trial: int) -> np.ndarray:
        channels = sample_channels(scenario, trial_rng(seed, 0, trial, _CHANNEL_STREAM))
        rng = trial_rng(seed, 0, trial, 1 if shaping is not None else 2)
        if shaping is not None:
            truths = effective_channels(channels, shaping)
            observation = simulate_effective_rx(truths, book, scenario.rho_ue, scenario.sigma2_bs, rng)
        else:
            truths = list(channels)
            observation = simulate_pilot_rx(channels, book, scenario.rho_ue, scenario.sigma2_bs, rng)
        return trial_nmse(estimator.estimate(observation), truths)

    ratios = Parallel(n_jobs=threads, prefer="threads")(delayed(one)(t) for t in range(trials))
    return summarize_nmse(np.array(ratios)).values


# ----------------------------------------------------------------
# Output
# ----------------------------------------------------------------
def results_frame(records: Sequence[ResultRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=CSV_COLUMNS)


def write_results(records: Sequence[ResultRecord], config: ExperimentConfig, path: str | Path) -> Path:
    """Write the CSV and its JSON sidecar (same name, ``.json``); returns the sidecar path."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    payload = {
        "version": LIBRARY_VERSION,
        "config": config.to_dict(),
        "total_wall_time_s": sum({r.value: r.wall_time_s for r in records}.values()),
        "records": [asdict(r) for r in records],
    }
    try:
        results_frame(records).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        sidecar.write_text(json.dumps(payload, indent=2, allow_nan=True), encoding="utf-8")
    except OSError as e:
        raise ExperimentError(f"cannot write results to {e.filename or path}: {e.strerror or e}") from e
    logger.info("wrote %d records to %s (sidecar %s)", len(records), path, sidecar)
    return sidecar
