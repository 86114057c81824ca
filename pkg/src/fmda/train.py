"""Two-stage training: single-step assimilation, then cycling fine-tuning.

Stage I draws independent (background, truth, observations, tau) samples
and regresses the conditional velocity. Stage II warm-starts from a Stage-I
model and replays short forecast-assimilate rollouts, accumulating the
per-step flow-matching loss; gradients are truncated at cycle boundaries
(the analysis that feeds the next forecast is treated as data).

Observation rates are drawn log-uniformly so sparse regimes stay well
represented. Observation noise is augmented during training: each sample is
clean with probability `noise_clean_prob`, otherwise its noise level is
uniform on (0, noise_max]. Training is fully determined by (seed, config,
dataset) when run serially.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory, forecast, make_background
from .errors import NumericalError
from .flow import (
    FlowConfig,
    ModelArch,
    TrainSample,
    VelocityModel,
    cfm_loss_and_grad,
    euler_assimilate,
    init_model,
)
from .grid import GridState
from .obs import perturb_observations, sample_observations


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    iters_stage1: int = 3000
    iters_stage2: int = 250
    batch_size: int = 8
    alpha_range: tuple[float, float] = (0.02, 0.4)
    lead: int = 8
    rollout_max: int = 8
    sigma_ic: float = 0.11
    ic_scale: float = 6.0
    noise_max: float = 0.2
    noise_clean_prob: float = 0.5
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"alpha_range must satisfy 0 < lo <= hi <= 1, got {self.alpha_range}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lead < 1:
            raise ValueError("lead must be >= 1")
        if self.rollout_max < 1:
            raise ValueError("rollout_max must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.sigma_ic < 0 or self.noise_max < 0 or self.ic_scale < 0:
            raise ValueError("noise levels and ic_scale must be >= 0")
        if not 0.0 <= self.noise_clean_prob <= 1.0:
            raise ValueError("noise_clean_prob must lie in [0, 1]")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update with decoupled weight decay."""
    if theta.shape != grad.shape:
        raise ValueError("theta and gradient shapes differ")
    if not np.isfinite(grad).all():
        raise NumericalError("non-finite gradient passed to the optimizer")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta_new = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta_new, AdamState(m, v, t)


@dataclass(frozen=True)
class IterationResult:
    loss: float
    alpha: float
    T: int
    model: VelocityModel
    opt: AdamState


def _draw_alpha(rng: np.random.Generator, cfg: TrainConfig) -> float:
    lo, hi = cfg.alpha_range
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _draw_noise(rng: np.random.Generator, cfg: TrainConfig) -> float:
    if cfg.noise_max == 0.0:
        return 0.0
    if rng.random() < cfg.noise_clean_prob:
        return 0.0
    return float(rng.uniform(0.0, cfg.noise_max))


def _draw_sample(
    model: VelocityModel, traj: Trajectory, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[TrainSample, float]:
    t = int(rng.integers(cfg.lead, len(traj)))
    x_g = traj[t]
    x_b = make_background(traj, t, cfg.lead, cfg.sigma_ic, rng, cfg.ic_scale)
    alpha = _draw_alpha(rng, cfg)
    observations = sample_observations(x_g, alpha, rng)
    sigma = _draw_noise(rng, cfg)
    if sigma > 0.0:
        observations = perturb_observations(observations, sigma, model.stats, rng)
    tau = float(rng.random())
    return TrainSample(x_b, x_g, observations, tau), alpha


def stage1_iteration(
    model: VelocityModel,
    traj: Trajectory,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: AdamState,
) -> IterationResult:
    """One single-step-DA optimizer step on a freshly drawn batch."""
    if len(traj) <= cfg.lead:
        raise ValueError("trajectory too short for the configured lead")
    samples = []
    alphas = []
    for _ in range(cfg.batch_size):
        sample, alpha = _draw_sample(model, traj, cfg, rng)
        samples.append(sample)
        alphas.append(alpha)
    loss, grad = cfm_loss_and_grad(model, samples)
    theta, opt = adam_step(model.theta, grad, opt, cfg.lr, weight_decay=cfg.weight_decay)
    return IterationResult(loss, float(np.mean(alphas)), 1, model.with_theta(theta), opt)


def stage2_iteration(
    model: VelocityModel,
    traj: Trajectory,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: AdamState,
    flow: FlowConfig = FlowConfig(),
) -> IterationResult:
    """One cycling rollout: forecast, assimilate, and supervise every step.

    Gradients do not flow through the assimilation rollout: each step's loss
    sees the current background as a constant, and the analysis produced by
    the full Euler sampler seeds the next forecast.
    """
    if len(traj) <= cfg.lead + 1:
        raise ValueError("trajectory too short for the configured lead")
    T = int(rng.integers(1, cfg.rollout_max + 1))
    t0 = int(rng.integers(cfg.lead, len(traj) - T + 1))
    x_b = make_background(traj, t0, cfg.lead, cfg.sigma_ic, rng, cfg.ic_scale)
    alpha = _draw_alpha(rng, cfg)
    grad_acc = np.zeros_like(model.theta)
    loss_acc = 0.0
    for s in range(T):
        x_g = traj[t0 + s]
        observations = sample_observations(x_g, alpha, rng)
        sigma = _draw_noise(rng, cfg)
        if sigma > 0.0:
            observations = perturb_observations(observations, sigma, model.stats, rng)
        tau = float(rng.random())
        loss, grad = cfm_loss_and_grad(
            model, [TrainSample(x_b, x_g, observations, tau)]
        )
        loss_acc += loss
        grad_acc += grad
        x_a = euler_assimilate(model, x_b, observations, flow)
        if s + 1 < T:
            x_b = forecast(x_a, 1, traj.config)
    loss = loss_acc / T
    theta, opt = adam_step(
        model.theta, grad_acc / T, opt, cfg.lr, weight_decay=cfg.weight_decay
    )
    return IterationResult(loss, alpha, T, model.with_theta(theta), opt)


class TrainLog:
    """Append-only iteration log, flushed on every write."""

    HEADER = ["iteration", "stage", "loss", "alpha", "T"]

    def __init__(self, path):
        self.path = path
        self._file = None
        if path is not None:
            try:
                new = not path.exists()
            except AttributeError:
                import os

                new = not os.path.exists(path)
            self._file = open(path, "a", newline="")
            self._writer = csv.writer(self._file)
            if new:
                self._writer.writerow(self.HEADER)
                self._file.flush()

    def write(self, iteration: int, stage: int, loss: float, alpha: float, t: int) -> None:
        if self._file is None:
            return
        self._writer.writerow([iteration, stage, repr(loss), repr(alpha), t])
        self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def train_stage1(
    traj: Trajectory,
    arch: ModelArch,
    cfg: TrainConfig,
    seed: int | None = None,
    log_path=None,
) -> tuple[VelocityModel, list[float]]:
    """Train a fresh model for single-step assimilation; returns loss history."""
    seed = cfg.seed if seed is None else seed
    stats = traj.climatology()
    names = traj[0].variable_names
    model = init_model(arch, stats, names, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    opt = AdamState.zeros(model.theta.size)
    losses = []
    with TrainLog(log_path) as log:
        for it in range(cfg.iters_stage1):
            res = stage1_iteration(model, traj, cfg, rng, opt)
            model, opt = res.model, res.opt
            losses.append(res.loss)
            log.write(it, 1, res.loss, res.alpha, res.T)
    return model, losses


def train_stage2(
    model: VelocityModel,
    traj: Trajectory,
    cfg: TrainConfig,
    seed: int | None = None,
    flow: FlowConfig = FlowConfig(),
    log_path=None,
) -> tuple[VelocityModel, list[float]]:
    """Fine-tune a Stage-I model for auto-regressive cycling."""
    if model is None:
        raise ValueError("stage 2 requires a Stage-I model to warm-start from")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    opt = AdamState.zeros(model.theta.size)
    losses = []
    with TrainLog(log_path) as log:
        for it in range(cfg.iters_stage2):
            res = stage2_iteration(model, traj, cfg, rng, opt, flow)
            model, opt = res.model, res.opt
            losses.append(res.loss)
            log.write(it, 2, res.loss, res.alpha, res.T)
    return model, losses
