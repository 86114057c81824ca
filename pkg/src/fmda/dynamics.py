"""Chaotic toy dynamics: a Lorenz-96 ring and a coupled-ring torus variant.

These systems stand in for both the reference dataset generator (truth
trajectories) and the forecast model that produces backgrounds. One DA
interval is ``substeps`` RK4 steps of size ``dt``; all twin-experiment
protocols count time in DA intervals.

The torus variant runs Lorenz-96 independently along every row and adds a
diffusive coupling c * (X[i+1,j] + X[i-1,j] - 2 X[i,j]) across rows, so
two-dimensional anisotropic observation kernels have real structure to
exploit. The uniform state X == F is an exact equilibrium of both systems.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .grid import GridState, VariableStats

VARIABLE_NAMES = ("x",)


class IntegrationBlowupError(FloatingPointError):
    """The integrator produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at RK4 step {step}")
        self.step = step


@dataclass(frozen=True)
class DynamicsConfig:
    system: str = "ring"  # "ring" or "torus"
    H: int = 1
    W: int = 40
    F: float = 8.0
    c: float = 0.5  # row coupling, torus only
    dt: float = 0.01
    substeps: int = 1  # RK4 steps per DA interval
    forecast_forcing_bias: float = 0.0  # imperfect-model mode: forecasts use F + bias

    def __post_init__(self):
        if self.system not in ("ring", "torus"):
            raise ValueError(f"unknown system {self.system!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.system == "ring":
            if self.H != 1:
                raise ValueError("ring system requires H = 1")
            if self.W < 4:
                raise ValueError("Lorenz-96 stencil needs W >= 4")
        else:
            if self.H < 3:
                raise ValueError("torus system requires H >= 3")
            if self.W < 4:
                raise ValueError("torus system requires W >= 4")

    @property
    def V(self) -> int:
        return 1

    def forecast_config(self) -> "DynamicsConfig":
        """Config used by the forecast model (biased forcing if configured)."""
        if self.forecast_forcing_bias == 0.0:
            return self
        return replace(self, F=self.F + self.forecast_forcing_bias, forecast_forcing_bias=0.0)


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered states at fixed DA-interval cadence."""

    states: tuple[GridState, ...]
    config: DynamicsConfig
    seed: int

    def __post_init__(self):
        if len(self.states) < 1:
            raise ValueError("trajectory needs at least one state")
        shape = self.states[0].shape
        if any(s.shape != shape for s in self.states):
            raise ValueError("trajectory states must share one shape")
        object.__setattr__(self, "states", tuple(self.states))

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, t: int) -> GridState:
        return self.states[t]

    def climatology(self) -> VariableStats:
        """Per-variable mean/std pooled over all times and grid points (cached)."""
        cached = getattr(self, "_clim", None)
        if cached is None:
            stacked = np.stack([s.values for s in self.states])
            mean = stacked.mean(axis=(0, 1, 2))
            std = stacked.std(axis=(0, 1, 2))
            cached = VariableStats(tuple(mean), tuple(std))
            object.__setattr__(self, "_clim", cached)
        return cached


def _check_state(x: GridState, cfg: DynamicsConfig) -> None:
    if x.shape != (cfg.H, cfg.W, cfg.V):
        raise ValueError(
            f"state shape {x.shape} does not match config ({cfg.H}, {cfg.W}, {cfg.V})"
        )


@lru_cache(maxsize=None)
def _shift_index(length: int, shift: int) -> np.ndarray:
    # x[..., idx] == np.roll(x, shift, axis=-1); fancy indexing beats roll
    # by a wide margin on the small arrays the RK4 inner loop touches.
    idx = (np.arange(length) - shift) % length
    idx.flags.writeable = False
    return idx


def _tendency_array(x: np.ndarray, cfg: DynamicsConfig) -> np.ndarray:
    # x has shape (H, W); Lorenz-96 along each row, periodic in both axes.
    w = x.shape[1]
    adv = (x[:, _shift_index(w, -1)] - x[:, _shift_index(w, 2)]) * x[:, _shift_index(w, 1)]
    out = adv - x + cfg.F
    if cfg.system == "torus":
        h = x.shape[0]
        out = out + cfg.c * (
            x[_shift_index(h, -1), :] + x[_shift_index(h, 1), :] - 2.0 * x
        )
    return out


def tendency(x: GridState, cfg: DynamicsConfig) -> GridState:
    """Instantaneous dX/dt of the configured system."""
    _check_state(x, cfg)
    return x.with_values(_tendency_array(x.values[:, :, 0], cfg)[:, :, None])


def _rk4_array(x: np.ndarray, cfg: DynamicsConfig) -> np.ndarray:
    dt = cfg.dt
    k1 = _tendency_array(x, cfg)
    k2 = _tendency_array(x + 0.5 * dt * k1, cfg)
    k3 = _tendency_array(x + 0.5 * dt * k2, cfg)
    k4 = _tendency_array(x + dt * k3, cfg)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(x: GridState, cfg: DynamicsConfig) -> GridState:
    """One classical RK4 step of size cfg.dt."""
    _check_state(x, cfg)
    out = _rk4_array(x.values[:, :, 0], cfg)
    if not np.isfinite(out).all():
        raise IntegrationBlowupError(1)
    return x.with_values(out[:, :, None])


def _advance_intervals(x: np.ndarray, n_intervals: int, cfg: DynamicsConfig, step0: int = 0):
    """Yield the raw field after each of n_intervals DA intervals."""
    step = step0
    for _ in range(n_intervals):
        for _ in range(cfg.substeps):
            step += 1
            x = _rk4_array(x, cfg)
            if not np.isfinite(x).all():
                raise IntegrationBlowupError(step)
        yield x


def rollout(x: GridState, n_intervals: int, cfg: DynamicsConfig) -> Trajectory:
    """Integrate n_intervals DA intervals, recording one state per interval.

    The returned trajectory starts with x itself, so it holds
    n_intervals + 1 states; rollout(x, 0) is the single-state trajectory [x].
    """
    _check_state(x, cfg)
    if n_intervals < 0:
        raise ValueError("n_intervals must be >= 0")
    states = [x]
    for field in _advance_intervals(x.values[:, :, 0], n_intervals, cfg):
        states.append(x.with_values(field[:, :, None]))
    return Trajectory(tuple(states), cfg, seed=0)


def forecast(x: GridState, n_intervals: int, cfg: DynamicsConfig) -> GridState:
    """Terminal state of an n-interval forecast using the forecast config."""
    return rollout(x, n_intervals, cfg.forecast_config()).states[-1]


def generate_dataset(
    cfg: DynamicsConfig, spinup_intervals: int, length: int, seed: int
) -> Trajectory:
    """Spin up from a seeded standard-normal state, then record `length` states."""
    if length < 10:
        raise ValueError("dataset length must be >= 10 to support training offsets")
    if spinup_intervals < 0:
        raise ValueError("spinup_intervals must be >= 0")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((cfg.H, cfg.W))
    step = 0
    for x in _advance_intervals(x, spinup_intervals, cfg):
        step += cfg.substeps
    states = []
    template = GridState(np.zeros((cfg.H, cfg.W, 1)), VARIABLE_NAMES)
    for field in _advance_intervals(x, length, cfg, step0=step):
        states.append(template.with_values(field[:, :, None]))
    return Trajectory(tuple(states), cfg, seed=seed)


DEFAULT_IC_SCALE = 6.0


@lru_cache(maxsize=None)
def _smoothing_kernel(length: int, scale: float) -> tuple[np.ndarray, float]:
    """Toroidal Gaussian smoothing matrix and the std of a smoothed unit field."""
    d = np.arange(length)[:, None] - np.arange(length)[None, :]
    d = np.abs((d + length / 2) % length - length / 2)
    kernel = np.exp(-0.5 * (d / scale) ** 2)
    kernel.flags.writeable = False
    return kernel, float(np.linalg.norm(kernel[0]))


def perturbation_field(
    rng: np.random.Generator, h: int, w: int, scale: float = DEFAULT_IC_SCALE
) -> np.ndarray:
    """Unit-std Gaussian noise field, toroidally smoothed to `scale` grid units.

    scale = 0 gives iid noise. Smoothing keeps the perturbation's spatial
    structure broad enough that sparse observations can see the resulting
    forecast error; iid perturbations decorrelate into an unobservable field.
    """
    noise = rng.standard_normal((h, w))
    if scale <= 0.0:
        return noise
    kw, nw = _smoothing_kernel(w, scale)
    noise = noise @ kw.T / nw
    if h > 1:
        kh, nh = _smoothing_kernel(h, scale)
        noise = kh @ noise / nh
    return noise


def make_background(
    traj: Trajectory,
    t: int,
    lead: int = 8,
    sigma_ic: float = 0.11,
    seed: int | np.random.Generator = 0,
    ic_scale: float = DEFAULT_IC_SCALE,
) -> GridState:
    """Forecast-style background valid at time t.

    Perturbs the truth at t - lead with a smoothed Gaussian field of std
    sigma_ic * (climatological std) and correlation scale ic_scale, then
    integrates `lead` intervals with the forecast model. sigma_ic = 0 under
    a perfect model reproduces the truth up to integration tolerance.
    """
    if lead < 0:
        raise ValueError("lead must be >= 0")
    if not 0 <= t < len(traj):
        raise IndexError(f"time index {t} outside trajectory of length {len(traj)}")
    if t - lead < 0:
        raise IndexError(f"t - lead = {t - lead} is before the trajectory start")
    start = traj[t - lead]
    if sigma_ic > 0.0:
        rng = np.random.default_rng(seed)
        std = traj.climatology().std_array()
        field = perturbation_field(rng, start.H, start.W, ic_scale)
        start = start.with_values(start.values + field[:, :, None] * (sigma_ic * std))
    if lead == 0:
        return start
    return forecast(start, lead, traj.config)
