"""Conditional velocity network, flow-matching loss, gradients, and sampler.

The velocity field is a periodic-padding convolutional residual network
that reads, as stacked channels, the normalized flow state, the normalized
lifted observation estimate, log(1 + rho), and a sinusoidal embedding of
the generative time tau. Its output is a per-variable velocity in
normalized space, rescaled to physical units at the interface.

Training minimizes the straight-line conditional flow-matching objective:
the squared residual between the predicted velocity and the constant path
velocity (target minus source), evaluated at a lerped state, in normalized
space. Gradients are exact reverse-mode derivatives through both the
network and the learned SetConv kernels.

Assimilation integrates the learned field with forward Euler from the
background at tau = 0 to the analysis at tau = 1 in L equal steps; the
observation lift is computed once, before the loop.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import obs as obs_mod
from .errors import CheckpointMismatchError, FormatError, NumericalError
from .grid import GridState, VariableStats, check_same_shape
from .obs import (
    GaussianKernel,
    KernelParams,
    LearnedKernel,
    LiftResult,
    ObservationSet,
    gaussian_fit_theta,
    kernel_theta_size,
    lift_graph,
    setconv_lift,
    with_local_rates,
)

CHECKPOINT_MAGIC = b"FDACKPT1"
CHECKPOINT_FORMAT = 1
TAU_EMBED_MAX_FREQ = 32.0


@dataclass(frozen=True)
class ModelArch:
    """Architecture hyperparameters of the velocity network and its kernels."""

    width: int = 64
    depth: int = 6  # residual blocks
    conv_size: int = 5
    d_tau: int = 8
    two_dimensional: bool = False
    kernel_mode: str = "learned"  # or "gaussian"
    kernel_hidden: tuple[int, ...] = (16, 16)
    k_window: int = 9
    gauss_scale_h: float = 1.0
    gauss_scale_w: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.conv_size < 1 or self.conv_size % 2 == 0:
            raise ValueError("conv_size must be odd and >= 1")
        if self.d_tau < 2 or self.d_tau % 2:
            raise ValueError("d_tau must be even and >= 2")
        if self.kernel_mode not in ("learned", "gaussian"):
            raise ValueError(f"unknown kernel mode {self.kernel_mode!r}")
        object.__setattr__(self, "kernel_hidden", tuple(int(h) for h in self.kernel_hidden))

    @property
    def conv_kh(self) -> int:
        return self.conv_size if self.two_dimensional else 1

    def input_channels(self, v: int) -> int:
        return 2 * v + 1 + self.d_tau


@dataclass(frozen=True)
class FlowConfig:
    """Euler integration settings for assimilation."""

    L: int = 32
    source_noise: float = 0.0  # std of optional X_0 noise, in climatological-std units

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.source_noise < 0:
            raise ValueError("source_noise must be >= 0")

    @property
    def dtau(self) -> float:
        return 1.0 / self.L


@dataclass(frozen=True)
class TrainSample:
    """One flow-matching regression sample."""

    x_b: GridState
    x_g: GridState
    obs: ObservationSet
    tau: float
    lift: LiftResult | None = None

    def __post_init__(self):
        check_same_shape(self.x_b, self.x_g)
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")


def param_blocks(arch: ModelArch, v: int) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Named parameter blocks in the canonical flat-theta order."""
    k = arch.conv_kh * arch.conv_size
    c_in = arch.input_channels(v)
    blocks: list[tuple[str, tuple[int, ...]]] = []
    if arch.kernel_mode == "learned":
        n_kernel = kernel_theta_size(arch.kernel_hidden)
        if arch.two_dimensional:
            blocks.append(("kernel_h", (n_kernel,)))
        blocks.append(("kernel_w", (n_kernel,)))
    blocks.append(("stem_w", (k * c_in, arch.width)))
    blocks.append(("stem_b", (arch.width,)))
    for i in range(arch.depth):
        blocks.append((f"block{i}_a_w", (k * arch.width, arch.width)))
        blocks.append((f"block{i}_a_b", (arch.width,)))
        blocks.append((f"block{i}_b_w", (k * arch.width, arch.width)))
        blocks.append((f"block{i}_b_b", (arch.width,)))
    blocks.append(("head_w", (k * arch.width, v)))
    blocks.append(("head_b", (v,)))
    return tuple(blocks)


def theta_size(arch: ModelArch, v: int) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_blocks(arch, v))


@dataclass(eq=False)
class VelocityModel:
    """Parameter vector plus everything needed to evaluate the velocity field."""

    arch: ModelArch
    stats: VariableStats
    variable_names: tuple[str, ...]
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        expect = theta_size(self.arch, self.V)
        if self.theta.shape != (expect,):
            raise ValueError(
                f"theta has {self.theta.shape} entries, arch expects ({expect},)"
            )
        if not np.isfinite(self.theta).all():
            raise ValueError("model parameters must be finite")
        if len(self.variable_names) != self.stats.V:
            raise ValueError("variable_names must match stats")
        self.variable_names = tuple(self.variable_names)

    @property
    def V(self) -> int:
        return self.stats.V

    @property
    def blocks(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return param_blocks(self.arch, self.V)

    def block_slices(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        out = {}
        off = 0
        for name, shape in self.blocks:
            size = int(np.prod(shape))
            out[name] = (off, off + size, shape)
            off += size
        return out

    def with_theta(self, theta: np.ndarray) -> "VelocityModel":
        return VelocityModel(self.arch, self.stats, self.variable_names, theta)


def init_model(
    arch: ModelArch,
    stats: VariableStats,
    variable_names: tuple[str, ...],
    seed: int = 0,
) -> VelocityModel:
    """Seeded initialization: fitted kernels, scaled-normal convs, zero head.

    The zero head makes the initial model the identity assimilator. All
    parameters are snapped to float32-representable values so a fresh model
    survives a checkpoint round trip bitwise.
    """
    rng = np.random.default_rng(seed)
    pieces = []
    for name, shape in param_blocks(arch, len(variable_names)):
        if name.startswith("kernel_"):
            pieces.append(gaussian_fit_theta(arch.kernel_hidden, arch.k_window).copy())
        elif name.startswith("head"):
            pieces.append(np.zeros(int(np.prod(shape))))
        elif name.endswith("_b"):
            pieces.append(np.zeros(int(np.prod(shape))))
        else:
            fan_in = shape[0]
            pieces.append(rng.standard_normal(int(np.prod(shape))) / np.sqrt(fan_in))
    theta = np.concatenate(pieces).astype(np.float32).astype(np.float64)
    return VelocityModel(arch, stats, tuple(variable_names), theta)


def model_kernel_params(model: VelocityModel) -> KernelParams:
    """The model's SetConv kernel, as a standalone KernelParams value."""
    arch = model.arch
    if arch.kernel_mode == "gaussian":
        return GaussianKernel(arch.gauss_scale_h, arch.gauss_scale_w, arch.k_window)
    sl = model.block_slices()
    lo, hi, _ = sl["kernel_w"]
    theta_w = model.theta[lo:hi].copy()
    theta_h = None
    if "kernel_h" in sl:
        lo, hi, _ = sl["kernel_h"]
        theta_h = model.theta[lo:hi].copy()
    return LearnedKernel(theta_w, theta_h, arch.kernel_hidden, arch.k_window)


def tau_embed(tau: float, d_tau: int, f_max: float = TAU_EMBED_MAX_FREQ) -> np.ndarray:
    """Sinusoidal features [sin(2 pi f_i tau), cos(2 pi f_i tau)].

    Frequencies are geometric, spanning [1, f_max]; non-integer members make
    the embedding aperiodic on the unit interval.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if d_tau < 2 or d_tau % 2:
        raise ValueError("d_tau must be even and >= 2")
    freqs = np.geomspace(1.0, f_max, d_tau // 2)
    ang = 2.0 * np.pi * freqs * tau
    return np.concatenate([np.sin(ang), np.cos(ang)])


@lru_cache(maxsize=None)
def _conv_index(h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """(N, kh*kw) flat neighbor indices for a periodic conv window."""
    rows = np.arange(h)[:, None, None, None]
    cols = np.arange(w)[None, :, None, None]
    dh = np.arange(kh)[None, None, :, None] - kh // 2
    dw = np.arange(kw)[None, None, None, :] - kw // 2
    idx = ((rows + dh) % h) * w + (cols + dw) % w
    out = idx.reshape(h * w, kh * kw)
    out.flags.writeable = False
    return out


def _window_cols(x: ad.Tensor, idx: np.ndarray) -> ad.Tensor:
    """(N, C) -> (N, K*C) neighbor columns for a symmetric periodic window.

    Because the offset set is symmetric, the scatter in the backward pass is
    itself a gather through the mirrored index table idx[:, ::-1], which is
    far cheaper than a generic indexed accumulation.
    """
    n, k = idx.shape
    c = x.data.shape[1]
    out = x.data[idx.reshape(-1)].reshape(n, k * c)
    inv = idx[:, ::-1]
    arange_k = np.arange(k)[None, :]

    def back(g):
        g3 = g.reshape(n, k, c)
        return (g3[inv, arange_k, :].sum(axis=1),)

    return ad.Tensor(out, (x,), back)


def _conv(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor, idx: np.ndarray) -> ad.Tensor:
    """Periodic convolution as gather + matmul on (N, C) feature maps.

    Weight rows are neighbor-major: w[(j * C):(j * C + C), :] acts on the
    j-th window offset's channels.
    """
    return ad.matmul(_window_cols(x, idx), w) + b


def _check_finite(t: ad.Tensor, layer: str) -> ad.Tensor:
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite activations after layer {layer}")
    return t


def _theta_parts(model: VelocityModel) -> dict[str, ad.Tensor]:
    """Per-block leaf tensors viewing the flat parameter vector.

    Leaves keep gradient accumulation block-sized; the flat gradient is
    assembled afterwards by _collect_grad.
    """
    parts = {}
    for name, (lo, hi, shape) in model.block_slices().items():
        parts[name] = ad.Tensor(model.theta[lo:hi].reshape(shape))
    return parts


def _collect_grad(model: VelocityModel, parts: dict[str, ad.Tensor]) -> np.ndarray:
    grad = np.zeros_like(model.theta)
    for name, (lo, hi, _) in model.block_slices().items():
        g = parts[name].grad
        if g is not None:
            grad[lo:hi] = g.reshape(-1)
    return grad


def _forward_graph(
    model: VelocityModel,
    parts: dict[str, ad.Tensor],
    x_tau_norm: np.ndarray,
    xo_norm: ad.Tensor,
    log_rho: ad.Tensor,
    tau: float,
    h: int,
    w: int,
) -> ad.Tensor:
    """Normalized velocity (N, V) as a graph node."""
    arch = model.arch
    n = h * w
    tau_rows = np.broadcast_to(tau_embed(tau, arch.d_tau), (n, arch.d_tau))
    x_in = ad.concat([ad.Tensor(x_tau_norm), xo_norm, log_rho, ad.Tensor(tau_rows.copy())], axis=1)
    idx = _conv_index(h, w, arch.conv_kh, arch.conv_size)
    hid = _check_finite(
        ad.tanh(_conv(x_in, parts["stem_w"], parts["stem_b"], idx)), "stem"
    )
    for i in range(arch.depth):
        inner = ad.tanh(_conv(hid, parts[f"block{i}_a_w"], parts[f"block{i}_a_b"], idx))
        hid = _check_finite(
            hid + _conv(inner, parts[f"block{i}_b_w"], parts[f"block{i}_b_b"], idx),
            f"block{i}",
        )
    return _check_finite(_conv(hid, parts["head_w"], parts["head_b"], idx), "head")


def _lift_nodes(
    model: VelocityModel,
    parts: dict[str, ad.Tensor],
    observations: ObservationSet,
    provided: LiftResult | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """(xo_norm, log_rho) graph nodes; learned kernels stay differentiable."""
    mean = model.stats.mean_array()[None, :]
    std = model.stats.std_array()[None, :]
    if model.arch.kernel_mode == "learned":
        if observations.local_rates is None:
            observations = with_local_rates(observations, model.arch.k_window)
        x_o, rho = lift_graph(
            observations,
            model_kernel_params(model),
            fill=model.stats.mean_array(),
            theta_h=parts.get("kernel_h"),
            theta_w=parts["kernel_w"],
        )
    elif provided is not None:
        n = provided.x_o.H * provided.x_o.W
        x_o = ad.Tensor(provided.x_o.values.reshape(n, -1))
        rho = ad.Tensor(provided.rho.reshape(n, 1))
    else:
        if observations.local_rates is None:
            observations = with_local_rates(observations, model.arch.k_window)
        x_o, rho = lift_graph(
            observations, model_kernel_params(model), fill=model.stats.mean_array()
        )
    return (x_o - mean) / std, ad.log1p(rho)


def _loss_graph(model: VelocityModel, parts: dict[str, ad.Tensor], sample: TrainSample) -> ad.Tensor:
    x_b, x_g = sample.x_b, sample.x_g
    if (x_b.H, x_b.W, x_b.V) != (sample.obs.H, sample.obs.W, model.V):
        raise ValueError("sample fields, observations, and model disagree on shape")
    mean = model.stats.mean_array()
    std = model.stats.std_array()
    n = x_b.H * x_b.W
    tau = sample.tau
    x_tau = (1.0 - tau) * x_b.values + tau * x_g.values
    x_tau_norm = ((x_tau - mean) / std).reshape(n, -1)
    xo_norm, log_rho = _lift_nodes(model, parts, sample.obs, sample.lift)
    v_norm = _forward_graph(model, parts, x_tau_norm, xo_norm, log_rho, tau, x_b.H, x_b.W)
    target = ((x_g.values - x_b.values) / std).reshape(n, -1)
    return ad.tmean(ad.square(v_norm - target))


def cfm_loss(model: VelocityModel, sample: TrainSample) -> float:
    """Mean squared velocity residual for one sample, in normalized space."""
    return float(_loss_graph(model, _theta_parts(model), sample).data)


def cfm_loss_and_grad(
    model: VelocityModel, samples: list[TrainSample] | tuple[TrainSample, ...]
) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its exact gradient with respect to flat theta."""
    if not samples:
        raise ValueError("batch must be non-empty")
    parts = _theta_parts(model)
    total = _loss_graph(model, parts, samples[0])
    for sample in samples[1:]:
        total = total + _loss_graph(model, parts, sample)
    loss = total * (1.0 / len(samples))
    loss.backward()
    grad = _collect_grad(model, parts)
    if not np.isfinite(grad).all():
        for name, (lo, hi, _) in model.block_slices().items():
            if not np.isfinite(grad[lo:hi]).all():
                raise NumericalError(f"non-finite gradient in parameter block {name}")
        raise NumericalError("non-finite gradient")
    return float(loss.data), grad


def velocity(
    model: VelocityModel, x_tau: GridState, lift: LiftResult, tau: float
) -> GridState:
    """Physical-units velocity at flow state x_tau given a precomputed lift."""
    if x_tau.V != model.V:
        raise ValueError(f"state has V={x_tau.V}, model expects {model.V}")
    check_same_shape(x_tau, lift.x_o)
    mean = model.stats.mean_array()
    std = model.stats.std_array()
    n = x_tau.H * x_tau.W
    parts = _theta_parts(model)
    x_tau_norm = ((x_tau.values - mean) / std).reshape(n, -1)
    xo_norm = ad.Tensor(((lift.x_o.values - mean) / std).reshape(n, -1))
    log_rho = ad.Tensor(np.log1p(lift.rho).reshape(n, 1))
    v_norm = _forward_graph(model, parts, x_tau_norm, xo_norm, log_rho, tau, x_tau.H, x_tau.W)
    return x_tau.with_values((v_norm.data * std).reshape(x_tau.shape))


def euler_integrate(velocity_fn, x0: GridState, L: int) -> GridState:
    """Forward-Euler flow from tau = 0 to 1 in L steps of a velocity field."""
    if L < 1:
        raise ValueError("L must be >= 1")
    x = x0.values
    dtau = 1.0 / L
    for i in range(L):
        v = velocity_fn(x0.with_values(x), i * dtau)
        x = x + dtau * v.values
        if not np.isfinite(x).all():
            raise NumericalError(f"non-finite flow state at Euler step {i}")
    return x0.with_values(x)


def euler_assimilate(
    model: VelocityModel,
    x_b: GridState,
    observations: ObservationSet,
    flow: FlowConfig = FlowConfig(),
    seed: int | np.random.Generator = 0,
) -> GridState:
    """Algorithmic analysis: lift once, then integrate the learned velocity.

    Deterministic for the default flow config; source noise, if configured,
    perturbs the starting state with the given seed.
    """
    if observations.local_rates is None:
        observations = with_local_rates(observations, model.arch.k_window)
    lift = setconv_lift(
        observations, model_kernel_params(model), fill=model.stats.mean_array()
    )
    x0 = x_b
    if flow.source_noise > 0.0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(x_b.shape) * (
            flow.source_noise * model.stats.std_array()
        )
        x0 = x_b.with_values(x_b.values + noise)
    return euler_integrate(
        lambda x, tau: velocity(model, x, lift, tau), x0, flow.L
    )


# ---------------------------------------------------------------------------
# checkpoints


def _arch_manifest(model: VelocityModel) -> str:
    arch = model.arch
    for name in model.variable_names:
        if "," in name or "\n" in name or "=" in name:
            raise ValueError(f"variable name {name!r} not serializable")
    lines = [
        f"format={CHECKPOINT_FORMAT}",
        f"width={arch.width}",
        f"depth={arch.depth}",
        f"conv_size={arch.conv_size}",
        f"d_tau={arch.d_tau}",
        f"two_dimensional={int(arch.two_dimensional)}",
        f"kernel_mode={arch.kernel_mode}",
        "kernel_hidden=" + ",".join(str(h) for h in arch.kernel_hidden),
        f"k_window={arch.k_window}",
        f"gauss_scale_h={arch.gauss_scale_h!r}",
        f"gauss_scale_w={arch.gauss_scale_w!r}",
        f"v={model.V}",
        "variables=" + ",".join(model.variable_names),
        "mean=" + ",".join(repr(m) for m in model.stats.mean),
        "std=" + ",".join(repr(s) for s in model.stats.std),
        f"params={model.theta.size}",
        "blocks=" + ";".join(f"{n}:{int(np.prod(s))}" for n, s in model.blocks),
    ]
    return "\n".join(lines) + "\n"


def save_checkpoint(model: VelocityModel, path) -> None:
    """Write magic, length-prefixed manifest, then theta as little-endian f32."""
    manifest = _arch_manifest(model).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(model.theta.astype("<f4").tobytes())


def _parse_manifest(text: str) -> dict[str, str]:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    return fields


def load_checkpoint(path, expect_arch: ModelArch | None = None) -> VelocityModel:
    """Read a checkpoint; optionally require a specific architecture."""
    with open(path, "rb") as f:
        blob = f.read()
    buf = io.BytesIO(blob)
    magic = buf.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    raw_len = buf.read(4)
    if len(raw_len) < 4:
        raise FormatError(f"{path}: truncated checkpoint header")
    (manifest_len,) = struct.unpack("<I", raw_len)
    manifest = buf.read(manifest_len)
    if len(manifest) != manifest_len:
        raise FormatError(f"{path}: truncated checkpoint manifest")
    fields = _parse_manifest(manifest.decode("utf-8"))
    try:
        if int(fields["format"]) != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: unsupported format {fields['format']}")
        arch = ModelArch(
            width=int(fields["width"]),
            depth=int(fields["depth"]),
            conv_size=int(fields["conv_size"]),
            d_tau=int(fields["d_tau"]),
            two_dimensional=bool(int(fields["two_dimensional"])),
            kernel_mode=fields["kernel_mode"],
            kernel_hidden=tuple(
                int(h) for h in fields["kernel_hidden"].split(",") if h
            ),
            k_window=int(fields["k_window"]),
            gauss_scale_h=float(fields["gauss_scale_h"]),
            gauss_scale_w=float(fields["gauss_scale_w"]),
        )
        names = tuple(fields["variables"].split(","))
        stats = VariableStats(
            tuple(float(x) for x in fields["mean"].split(",")),
            tuple(float(x) for x in fields["std"].split(",")),
        )
        n_params = int(fields["params"])
    except KeyError as e:
        raise FormatError(f"{path}: manifest missing key {e}") from e
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointMismatchError(
            f"{path}: checkpoint arch {arch} != expected {expect_arch}"
        )
    if n_params != theta_size(arch, len(names)):
        raise FormatError(f"{path}: parameter count inconsistent with architecture")
    raw = buf.read()
    if len(raw) != 4 * n_params:
        raise FormatError(
            f"{path}: expected {4 * n_params} parameter bytes, found {len(raw)}"
        )
    theta = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return VelocityModel(arch, stats, names, theta)
