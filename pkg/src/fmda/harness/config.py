"""Flat key-value experiment configuration.

The on-disk format is commented ``dotted.key = value`` text. Every key has
a registered type and default; unknown keys are rejected so typos fail
loudly. ``emit_config_template`` writes the full commented default file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..baselines import OIConfig
from ..dynamics import DynamicsConfig
from ..errors import ConfigError
from ..flow import FlowConfig, ModelArch
from ..train import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s: str) -> tuple[float, ...]:
    items = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(float(p) for p in items)


def _parse_int_list(s: str) -> tuple[int, ...]:
    items = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(int(p) for p in items)


_PARSERS = {
    "int": int,
    "float": float,
    "str": lambda s: s.strip(),
    "bool": _parse_bool,
    "floats": _parse_float_list,
    "ints": _parse_int_list,
    "float_or_auto": lambda s: "auto" if s.strip() == "auto" else float(s),
}


def _fmt(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("floats", "ints"):
        return ", ".join(repr(v) if kind == "floats" else str(v) for v in value)
    return str(value)


# key -> (type, default, comment)
REGISTRY: dict[str, tuple[str, object, str]] = {
    "seed": ("int", 0, "master seed; training and evaluation derive substreams from it"),
    # toy dynamics
    "dynamics.system": ("str", "ring", "ring (1 x W Lorenz-96) or torus (H x W coupled rings)"),
    "dynamics.H": ("int", 1, "grid rows; must be 1 for ring, >= 3 for torus"),
    "dynamics.W": ("int", 40, "grid columns (>= 4)"),
    "dynamics.F": ("float", 8.0, "forcing"),
    "dynamics.c": ("float", 0.5, "row-coupling strength, torus only"),
    "dynamics.dt": ("float", 0.01, "internal RK4 step"),
    "dynamics.substeps": ("int", 1, "RK4 steps per DA interval"),
    "dynamics.forecast_forcing_bias": (
        "float",
        0.0,
        "imperfect-model mode: forecasts integrate with F + bias",
    ),
    # dataset generation
    "data.spinup": ("int", 2000, "discarded spin-up intervals before recording"),
    "data.length": ("int", 8192, "recorded training-trajectory length (intervals)"),
    "data.path": ("str", "train.traj", "training-trajectory file"),
    # flow sampler
    "flow.L": ("int", 32, "Euler steps per assimilation (d_tau = 1/L)"),
    "flow.source_noise": (
        "float",
        0.0,
        "optional std of starting-state noise, climatological-std units",
    ),
    # setconv kernels
    "kernel.mode": ("str", "learned", "learned (trainable MLP pair) or gaussian"),
    "kernel.k": ("int", 9, "odd neighbor-window width, grid units"),
    "kernel.hidden": ("ints", (16, 16), "hidden sizes of each kernel MLP"),
    "kernel.scale_h": ("float", 1.0, "gaussian-mode length scale along h"),
    "kernel.scale_w": ("float", 1.0, "gaussian-mode length scale along w"),
    # velocity network
    "model.width": ("int", 64, "channels per hidden layer"),
    "model.depth": ("int", 6, "residual blocks"),
    "model.conv_size": ("int", 5, "conv kernel extent (1 x n on the ring, n x n on the torus)"),
    "model.d_tau": ("int", 8, "tau-embedding channels (even)"),
    # training
    "train.lr": ("float", 3e-4, "Adam learning rate"),
    "train.iters_stage1": ("int", 3000, "stage-I iterations"),
    "train.iters_stage2": ("int", 250, "stage-II iterations (~1/12 of stage I)"),
    "train.batch_size": ("int", 8, "samples per stage-I optimizer step"),
    "train.alpha_min": ("float", 0.02, "lower end of the log-uniform training rate range"),
    "train.alpha_max": ("float", 0.4, "upper end of the training rate range"),
    "train.lead": ("int", 8, "background forecast lead, DA intervals"),
    "train.rollout_max": ("int", 8, "stage-II rollout lengths are Unif{1..rollout_max}"),
    "train.sigma_ic": (
        "float",
        0.11,
        "initial-condition perturbation std, climatological-std units",
    ),
    "train.ic_scale": (
        "float",
        6.0,
        "correlation scale of the perturbation field, grid units (0 = iid)",
    ),
    "train.noise_max": (
        "float",
        0.2,
        "training noise augmentation: per-sample level drawn from [0, noise_max]",
    ),
    "train.noise_clean_prob": (
        "float",
        0.5,
        "fraction of training samples kept noise-free",
    ),
    "train.weight_decay": ("float", 0.0, "decoupled weight decay"),
    # assimilator selection
    "assimilator": ("str", "flowda", "flowda | interp | oi"),
    "checkpoint": ("str", "model.ckpt", "stage-I checkpoint path"),
    "checkpoint2": ("str", "model_stage2.ckpt", "stage-II checkpoint path"),
    "interp.scale": ("float", 1.0, "interp baseline kernel length scale"),
    "oi.length_scale": ("float", 2.0, "background-error correlation length"),
    "oi.sigma_b": ("float", 1.0, "background-error std, climatological-std units"),
    "oi.sigma_o": (
        "float_or_auto",
        "auto",
        "observation-error std; auto tracks the noise level with a 0.01 floor",
    ),
    # evaluation protocols
    "eval.alphas": ("floats", (0.05, 0.1, 0.2, 0.4), "observation rates to evaluate"),
    "eval.sigmas": ("floats", (0.0, 0.05, 0.1, 0.2), "noise levels for the sweep"),
    "eval.location_mode": ("str", "fixed", "cycling observation locations: fixed | shuffled"),
    "eval.n_cycles": ("int", 60, "assimilation cycles per cycling run"),
    "eval.free_run_intervals": ("int", 8, "free-run lead producing the cycle-0 background"),
    "eval.n_times": ("int", 64, "evaluation times drawn from the held-out trajectory"),
    "eval.time_list": ("ints", (), "explicit evaluation times (overrides n_times)"),
    "eval.seed": ("int", -1, "held-out trajectory seed; -1 means seed + 1"),
    "eval.spinup": ("int", 2000, "held-out trajectory spin-up"),
    "eval.length": ("int", 128, "held-out trajectory length"),
    "eval.cycle_start": ("int", -1, "cycle-0 time index; -1 means free_run_intervals"),
    "eval.cycle_sigma": ("float", 0.0, "observation noise during cycling"),
    # reporting
    "report.figures": ("bool", True, "render PNG figures next to the CSV/JSON output"),
    "out.dir": ("str", "out", "report output directory"),
}


def parse_value(key: str, raw: str):
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key {key!r}")
    kind = REGISTRY[key][0]
    try:
        return _PARSERS[kind](raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def read_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (p.strip() for p in line.split("=", 1))
            values[key] = parse_value(key, raw)
    return values


def emit_config_template(path) -> None:
    """Write the fully commented default configuration."""
    lines = ["# fmda experiment configuration (dotted keys, '#' comments)"]
    section = None
    for key, (kind, default, comment) in REGISTRY.items():
        head = key.split(".", 1)[0]
        if head != section:
            section = head
            lines.append("")
        lines.append(f"# {comment}")
        lines.append(f"{key} = {_fmt(kind, default)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated aggregate of every sub-config plus protocol settings."""

    seed: int
    dynamics: DynamicsConfig
    arch: ModelArch
    flow: FlowConfig
    train: TrainConfig
    oi: OIConfig
    oi_sigma_auto: bool
    interp_scale: float
    assimilator: str
    checkpoint: str
    checkpoint2: str
    data_spinup: int
    data_length: int
    data_path: str
    alphas: tuple[float, ...]
    sigmas: tuple[float, ...]
    location_mode: str
    n_cycles: int
    free_run_intervals: int
    n_times: int
    time_list: tuple[int, ...]
    eval_seed: int
    eval_spinup: int
    eval_length: int
    cycle_start: int
    cycle_sigma: float
    figures: bool
    out_dir: str

    def __post_init__(self):
        if self.assimilator not in ("flowda", "interp", "oi"):
            raise ConfigError(f"unknown assimilator {self.assimilator!r}")
        if self.location_mode not in ("fixed", "shuffled"):
            raise ConfigError(f"unknown location mode {self.location_mode!r}")
        if not self.alphas or any(not 0.0 < a <= 1.0 for a in self.alphas):
            raise ConfigError("eval.alphas must be non-empty with entries in (0, 1]")
        if any(s < 0 for s in self.sigmas):
            raise ConfigError("eval.sigmas must be >= 0")
        if self.n_cycles < 1:
            raise ConfigError("eval.n_cycles must be >= 1")
        if self.free_run_intervals < 0:
            raise ConfigError("eval.free_run_intervals must be >= 0")
        if not self.time_list and self.n_times < 1:
            raise ConfigError("eval.n_times must be >= 1")
        if self.cycle_sigma < 0:
            raise ConfigError("eval.cycle_sigma must be >= 0")


def build_experiment_config(values: dict) -> ExperimentConfig:
    """Merge defaults with parsed values and construct the validated config."""
    for key in values:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = {key: values.get(key, default) for key, (_, default, _) in REGISTRY.items()}

    def build(factory, **kwargs):
        try:
            return factory(**kwargs)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    system = cfg["dynamics.system"]
    dynamics = build(
        DynamicsConfig,
        system=system,
        H=cfg["dynamics.H"],
        W=cfg["dynamics.W"],
        F=cfg["dynamics.F"],
        c=cfg["dynamics.c"],
        dt=cfg["dynamics.dt"],
        substeps=cfg["dynamics.substeps"],
        forecast_forcing_bias=cfg["dynamics.forecast_forcing_bias"],
    )
    arch = build(
        ModelArch,
        width=cfg["model.width"],
        depth=cfg["model.depth"],
        conv_size=cfg["model.conv_size"],
        d_tau=cfg["model.d_tau"],
        two_dimensional=(system == "torus"),
        kernel_mode=cfg["kernel.mode"],
        kernel_hidden=cfg["kernel.hidden"],
        k_window=cfg["kernel.k"],
        gauss_scale_h=cfg["kernel.scale_h"],
        gauss_scale_w=cfg["kernel.scale_w"],
    )
    flow = build(FlowConfig, L=cfg["flow.L"], source_noise=cfg["flow.source_noise"])
    train = build(
        TrainConfig,
        lr=cfg["train.lr"],
        iters_stage1=cfg["train.iters_stage1"],
        iters_stage2=cfg["train.iters_stage2"],
        batch_size=cfg["train.batch_size"],
        alpha_range=(cfg["train.alpha_min"], cfg["train.alpha_max"]),
        lead=cfg["train.lead"],
        rollout_max=cfg["train.rollout_max"],
        sigma_ic=cfg["train.sigma_ic"],
        ic_scale=cfg["train.ic_scale"],
        noise_max=cfg["train.noise_max"],
        noise_clean_prob=cfg["train.noise_clean_prob"],
        weight_decay=cfg["train.weight_decay"],
        seed=cfg["seed"],
    )
    sigma_o = cfg["oi.sigma_o"]
    oi = build(
        OIConfig,
        length_scale=cfg["oi.length_scale"],
        sigma_b=cfg["oi.sigma_b"],
        sigma_o=0.01 if sigma_o == "auto" else sigma_o,
    )
    seed = cfg["seed"]
    eval_seed = cfg["eval.seed"]
    cycle_start = cfg["eval.cycle_start"]
    return ExperimentConfig(
        seed=seed,
        dynamics=dynamics,
        arch=arch,
        flow=flow,
        train=train,
        oi=oi,
        oi_sigma_auto=(sigma_o == "auto"),
        interp_scale=cfg["interp.scale"],
        assimilator=cfg["assimilator"],
        checkpoint=cfg["checkpoint"],
        checkpoint2=cfg["checkpoint2"],
        data_spinup=cfg["data.spinup"],
        data_length=cfg["data.length"],
        data_path=cfg["data.path"],
        alphas=cfg["eval.alphas"],
        sigmas=cfg["eval.sigmas"],
        location_mode=cfg["eval.location_mode"],
        n_cycles=cfg["eval.n_cycles"],
        free_run_intervals=cfg["eval.free_run_intervals"],
        n_times=cfg["eval.n_times"],
        time_list=cfg["eval.time_list"],
        eval_seed=seed + 1 if eval_seed == -1 else eval_seed,
        eval_spinup=cfg["eval.spinup"],
        eval_length=cfg["eval.length"],
        cycle_start=cfg["eval.free_run_intervals"] if cycle_start == -1 else cycle_start,
        cycle_sigma=cfg["eval.cycle_sigma"],
        figures=cfg["report.figures"],
        out_dir=cfg["out.dir"],
    )


def load_experiment_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Config file plus ``key=value`` override strings, validated."""
    values = read_config_file(path) if path is not None else {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = (p.strip() for p in item.split("=", 1))
        values[key] = parse_value(key, raw)
    return build_experiment_config(values)
