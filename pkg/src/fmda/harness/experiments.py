"""Twin-experiment protocols: single-step, noise sweep, and cycling.

All randomness is derived from the experiment seed through tagged
substreams, so every protocol is bitwise reproducible under serial
execution and the sigma = 0 rows of a noise sweep coincide exactly with a
single-step run at the same seed. Wall-clock columns are the one exception:
they measure real assimilation latency.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..baselines import OIConfig, interp_blend, optimal_interpolation
from ..dynamics import Trajectory, forecast, generate_dataset, make_background
from ..errors import ConfigError
from ..flow import FlowConfig, VelocityModel, euler_assimilate, load_checkpoint
from ..grid import GridState, VariableStats, rmse_per_variable
from ..obs import ObservationSet, perturb_observations, sample_observations
from .config import ExperimentConfig

# substream tags for seed derivation
_EVAL_TIMES, _BACKGROUND, _OBS, _NOISE, _CYCLE_OBS, _CYCLE_BG = range(6)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


@dataclass(frozen=True)
class CycleRecord:
    """One (evaluation point, variable) row of an experiment report."""

    experiment: str
    alpha: float
    sigma_noise: float
    location_mode: str
    cycle: int
    time_index: int
    variable: str
    rmse_background: float
    rmse_analysis: float
    rmse_freerun: float
    wall_ms: float

    def __post_init__(self):
        for name in ("rmse_background", "rmse_analysis", "rmse_freerun"):
            x = getattr(self, name)
            if not (np.isfinite(x) and x >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {x}")


class Assimilator:
    """Callable background-plus-observations -> analysis, with a call counter."""

    name = "base"

    def __init__(self):
        self.calls = 0

    def __call__(self, x_b: GridState, observations: ObservationSet) -> GridState:
        self.calls += 1
        return self._analyze(x_b, observations)

    def _analyze(self, x_b, observations):
        raise NotImplementedError


class FlowAssimilator(Assimilator):
    name = "flowda"

    def __init__(self, model: VelocityModel, flow: FlowConfig = FlowConfig()):
        super().__init__()
        self.model = model
        self.flow = flow

    def _analyze(self, x_b, observations):
        return euler_assimilate(self.model, x_b, observations, self.flow)


class InterpAssimilator(Assimilator):
    name = "interp"

    def __init__(self, scale: float = 1.0, stats: VariableStats | None = None):
        super().__init__()
        self.scale = scale
        self.stats = stats

    def _analyze(self, x_b, observations):
        return interp_blend(x_b, observations, self.scale, self.stats)


class OIAssimilator(Assimilator):
    name = "oi"

    def __init__(self, cfg: OIConfig = OIConfig()):
        super().__init__()
        self.cfg = cfg

    def _analyze(self, x_b, observations):
        return optimal_interpolation(x_b, observations, self.cfg)


def eval_trajectory(cfg: ExperimentConfig) -> Trajectory:
    """Held-out trajectory; its seed is disjoint from the training seed."""
    return generate_dataset(cfg.dynamics, cfg.eval_spinup, cfg.eval_length, cfg.eval_seed)


def build_assimilator(
    cfg: ExperimentConfig,
    sigma_noise: float = 0.0,
    stats: VariableStats | None = None,
    model: VelocityModel | None = None,
) -> Assimilator:
    """Assimilator selected by config; OI's sigma_o may track the noise level."""
    if cfg.assimilator == "flowda":
        if model is None:
            model = load_checkpoint(cfg.checkpoint)
        return FlowAssimilator(model, cfg.flow)
    if cfg.assimilator == "interp":
        return InterpAssimilator(cfg.interp_scale, stats)
    oi_cfg = cfg.oi
    if cfg.oi_sigma_auto:
        oi_cfg = OIConfig(
            length_scale=oi_cfg.length_scale,
            sigma_b=oi_cfg.sigma_b,
            sigma_o=max(sigma_noise, 0.01),
            solver_tol=oi_cfg.solver_tol,
            max_observations=oi_cfg.max_observations,
        )
    return OIAssimilator(oi_cfg)


def eval_times(cfg: ExperimentConfig, traj: Trajectory) -> list[int]:
    lead = cfg.train.lead
    if cfg.time_list:
        times = [int(t) for t in cfg.time_list]
        if any(t < lead or t >= len(traj) for t in times):
            raise ConfigError("eval.time_list entries must lie in [lead, T)")
        return times
    valid = len(traj) - lead
    if cfg.n_times > valid:
        raise ConfigError(
            f"eval.n_times = {cfg.n_times} exceeds the {valid} valid times"
        )
    rng = _rng(cfg.seed, _EVAL_TIMES)
    picked = rng.choice(valid, size=cfg.n_times, replace=False) + lead
    return sorted(int(t) for t in picked)


def _records_for(
    experiment: str,
    cfg: ExperimentConfig,
    alpha: float,
    sigma: float,
    cycle: int,
    t: int,
    names: tuple[str, ...],
    rmse_b: np.ndarray,
    rmse_a: np.ndarray,
    rmse_f: np.ndarray,
    wall_ms: float,
) -> list[CycleRecord]:
    return [
        CycleRecord(
            experiment=experiment,
            alpha=alpha,
            sigma_noise=sigma,
            location_mode=cfg.location_mode,
            cycle=cycle,
            time_index=t,
            variable=names[v],
            rmse_background=float(rmse_b[v]),
            rmse_analysis=float(rmse_a[v]),
            rmse_freerun=float(rmse_f[v]),
            wall_ms=wall_ms,
        )
        for v in range(len(names))
    ]


def _sweep(
    cfg: ExperimentConfig,
    experiment: str,
    sigmas: tuple[float, ...],
    model: VelocityModel | None = None,
) -> list[CycleRecord]:
    traj = eval_trajectory(cfg)
    stats = traj.climatology()
    names = traj[0].variable_names
    lead = cfg.train.lead
    if cfg.assimilator == "flowda" and model is None:
        model = load_checkpoint(cfg.checkpoint)
    assimilators = {
        sigma: build_assimilator(cfg, sigma, stats, model) for sigma in sigmas
    }
    records: list[CycleRecord] = []
    for ti, t in enumerate(eval_times(cfg, traj)):
        truth = traj[t]
        background = make_background(
            traj, t, lead, cfg.train.sigma_ic, _rng(cfg.seed, _BACKGROUND, ti),
            cfg.train.ic_scale,
        )
        rmse_b = rmse_per_variable(background, truth)
        for ai, alpha in enumerate(cfg.alphas):
            observations = sample_observations(
                truth, alpha, _rng(cfg.seed, _OBS, ti, ai)
            )
            for si, sigma in enumerate(sigmas):
                observed = perturb_observations(
                    observations, sigma, stats, _rng(cfg.seed, _NOISE, ti, ai, si)
                )
                start = time.perf_counter()
                analysis = assimilators[sigma](background, observed)
                wall_ms = 1e3 * (time.perf_counter() - start)
                rmse_a = rmse_per_variable(analysis, truth)
                records.extend(
                    _records_for(
                        experiment, cfg, alpha, sigma, 0, t, names,
                        rmse_b, rmse_a, rmse_b, wall_ms,
                    )
                )
    return records


def run_single_step(
    cfg: ExperimentConfig, model: VelocityModel | None = None
) -> list[CycleRecord]:
    """Single-step assimilation from a lead-interval background at each time.

    The free-run column repeats the background: in this protocol the
    background IS the free-running forecast valid at the analysis time.
    """
    return _sweep(cfg, "single_step", (0.0,), model)


def run_noise_sweep(
    cfg: ExperimentConfig, model: VelocityModel | None = None
) -> list[CycleRecord]:
    """Single-step assimilation across the configured noise grid."""
    return _sweep(cfg, "noise_sweep", tuple(cfg.sigmas), model)


def run_cycling(
    cfg: ExperimentConfig,
    model: VelocityModel | None = None,
    assimilator: Assimilator | None = None,
) -> list[CycleRecord]:
    """Long-horizon forecast-assimilate cycling against a free-run reference.

    The cycle-0 background is a free run from a perturbed truth state; a
    twin free-running forecast starts from that same state and never sees
    an observation (the assimilator call counter checks exactly one call
    per cycle).
    """
    traj = eval_trajectory(cfg)
    stats = traj.climatology()
    names = traj[0].variable_names
    t0 = cfg.cycle_start
    if t0 - cfg.free_run_intervals < 0:
        raise ConfigError("cycle_start must be >= free_run_intervals")
    if t0 + cfg.n_cycles > len(traj):
        raise ConfigError(
            f"cycling needs {t0 + cfg.n_cycles} trajectory states, have {len(traj)}"
        )
    if cfg.assimilator == "flowda" and model is None and assimilator is None:
        model = load_checkpoint(cfg.checkpoint)
    records: list[CycleRecord] = []
    for ai, alpha in enumerate(cfg.alphas):
        assim = assimilator or build_assimilator(cfg, cfg.cycle_sigma, stats, model)
        calls_before = assim.calls
        background = make_background(
            traj,
            t0,
            cfg.free_run_intervals,
            cfg.train.sigma_ic,
            _rng(cfg.seed, _CYCLE_BG, ai),
            cfg.train.ic_scale,
        )
        free_run = background
        fixed_locations = None
        if cfg.location_mode == "fixed":
            probe = sample_observations(
                traj[t0], alpha, _rng(cfg.seed, _CYCLE_OBS, ai, 0)
            )
            fixed_locations = probe.coords
        for cycle in range(cfg.n_cycles):
            t = t0 + cycle
            truth = traj[t]
            observations = sample_observations(
                truth,
                alpha,
                _rng(cfg.seed, _CYCLE_OBS, ai, cycle),
                locations=fixed_locations,
            )
            if cfg.cycle_sigma > 0.0:
                observations = perturb_observations(
                    observations, cfg.cycle_sigma, stats,
                    _rng(cfg.seed, _NOISE, ai, cycle),
                )
            start = time.perf_counter()
            analysis = assim(background, observations)
            wall_ms = 1e3 * (time.perf_counter() - start)
            records.extend(
                _records_for(
                    "cycle", cfg, alpha, cfg.cycle_sigma, cycle, t, names,
                    rmse_per_variable(background, truth),
                    rmse_per_variable(analysis, truth),
                    rmse_per_variable(free_run, truth),
                    wall_ms,
                )
            )
            if cycle + 1 < cfg.n_cycles:
                background = forecast(analysis, 1, cfg.dynamics)
                free_run = forecast(free_run, 1, cfg.dynamics)
        if assim.calls - calls_before != cfg.n_cycles:
            raise RuntimeError(
                "assimilator was called off-protocol during cycling"
            )
    return records
