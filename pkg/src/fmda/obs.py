"""Synthetic observations and the SetConv lift onto the grid.

Observations are M scattered points with continuous toroidal grid
coordinates and V values. The lift turns them into a gridded value estimate
plus a local-density field via a kernel-weighted normalized scatter:

    rho[n]  = sum_m phi(m, n)
    x_o[n]  = sum_m phi(m, n) * y[m] / rho[n]

with the weight restricted to a k x k toroidal window around each
observation. Kernels are either fixed anisotropic Gaussians or a pair of
small positive-output MLPs (one per axis) that read the signed offset and
the observation's local rate; the learned path runs through the autodiff
graph so kernel parameters train jointly with the velocity network.

Where rho falls below EPS_RHO the value estimate is filled with the
per-variable climatological mean; rho itself is reported as computed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .grid import GridState, VariableStats

EPS_RHO = 1e-8


@dataclass(frozen=True)
class ObservationSet:
    """M scattered observations on an H x W torus."""

    coords: np.ndarray  # (M, 2) continuous (h, w) grid coordinates
    values: np.ndarray  # (M, V) physical units
    H: int
    W: int
    variable_names: tuple[str, ...]
    local_rates: np.ndarray | None = None  # (M,) in (0, 1]

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != coords.shape[0]:
            raise ValueError("values must be (M, V) matching coords")
        if not np.isfinite(values).all() or not np.isfinite(coords).all():
            raise ValueError("observation coords and values must be finite")
        if coords.size and (
            coords[:, 0].min() < 0
            or coords[:, 0].max() >= self.H
            or coords[:, 1].min() < 0
            or coords[:, 1].max() >= self.W
        ):
            raise ValueError("observation coordinates outside the domain")
        if len(self.variable_names) != values.shape[1]:
            raise ValueError("variable_names must match V")
        rates = self.local_rates
        if rates is not None:
            rates = np.asarray(rates, dtype=np.float64).reshape(-1)
            if rates.shape[0] != coords.shape[0]:
                raise ValueError("local_rates must have one entry per observation")
            if rates.size and (rates.min() <= 0.0 or rates.max() > 1.0):
                raise ValueError("local rates must lie in (0, 1]")
            rates = rates.copy()
            rates.flags.writeable = False
        coords = coords.copy()
        values = values.copy()
        coords.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "local_rates", rates)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))

    @property
    def M(self) -> int:
        return self.coords.shape[0]

    @property
    def V(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GaussianKernel:
    """Fixed anisotropic Gaussian weights, independent of the local rate."""

    scale_h: float = 1.0
    scale_w: float = 1.0
    k: int = 9

    def __post_init__(self):
        if self.scale_h <= 0 or self.scale_w <= 0:
            raise ValueError("kernel length scales must be positive")
        _check_k(self.k)


@dataclass(frozen=True)
class LearnedKernel:
    """Anisotropic MLP kernel: softplus-positive nets on (offset, local rate).

    theta_h is None on single-row domains, where the h factor is constant 1.
    """

    theta_w: np.ndarray
    theta_h: np.ndarray | None = None
    hidden: tuple[int, ...] = (16, 16)
    k: int = 9

    def __post_init__(self):
        _check_k(self.k)
        n = kernel_theta_size(self.hidden)
        tw = np.asarray(self.theta_w, dtype=np.float64)
        if tw.shape != (n,):
            raise ValueError(f"theta_w must have {n} entries for hidden={self.hidden}")
        object.__setattr__(self, "theta_w", tw)
        if self.theta_h is not None:
            th = np.asarray(self.theta_h, dtype=np.float64)
            if th.shape != (n,):
                raise ValueError(f"theta_h must have {n} entries for hidden={self.hidden}")
            object.__setattr__(self, "theta_h", th)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


KernelParams = GaussianKernel | LearnedKernel


@dataclass(frozen=True)
class LiftResult:
    """Gridded value estimate plus the local observation-density field."""

    x_o: GridState
    rho: np.ndarray  # (H, W), >= 0

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        if rho.shape != (self.x_o.H, self.x_o.W):
            raise ValueError("rho must be (H, W)")
        if rho.size and rho.min() < 0:
            raise ValueError("rho must be non-negative")
        rho = rho.copy()
        rho.flags.writeable = False
        object.__setattr__(self, "rho", rho)


def _check_k(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size k must be odd and >= 1, got {k}")


def _check_window(k: int, H: int, W: int) -> None:
    _check_k(k)
    if k > 2 * W - 1:
        raise ValueError(f"k={k} exceeds the 2W-1={2 * W - 1} window bound")
    if H > 1 and k > 2 * H - 1:
        raise ValueError(f"k={k} exceeds the 2H-1={2 * H - 1} window bound")


def wrap_offset(d, L: int):
    """Signed toroidal offset wrapped into (-L/2, L/2]."""
    m = np.mod(d, L)
    return np.where(m > L / 2, m - L, m)


# ---------------------------------------------------------------------------
# sampling and perturbation


def sample_observations(
    truth: GridState,
    alpha: float,
    seed: int | np.random.Generator = 0,
    locations: np.ndarray | None = None,
) -> ObservationSet:
    """Observe round(alpha * H * W) distinct grid points of the truth.

    Fresh mode samples locations uniformly without replacement; passing
    `locations` reuses a fixed integer-coordinate list instead (the fixed-
    network cycling protocol). Values are copied from the truth.
    """
    H, W = truth.H, truth.W
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"observation rate must lie in (0, 1], got {alpha}")
    if locations is None:
        m = int(round(alpha * H * W))
        if m < 1:
            raise ValueError(f"rate {alpha} yields zero observations on {H}x{W}")
        if m > H * W:
            raise ValueError(f"rate {alpha} asks for {m} > {H * W} observations")
        rng = np.random.default_rng(seed)
        flat = rng.choice(H * W, size=m, replace=False)
        coords = np.stack([flat // W, flat % W], axis=1).astype(np.float64)
    else:
        coords = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
        if not np.allclose(coords, np.round(coords)):
            raise ValueError("reused locations must sit at integer grid points")
    hi = np.round(coords[:, 0]).astype(int)
    wi = np.round(coords[:, 1]).astype(int)
    values = truth.values[hi, wi, :]
    return ObservationSet(coords, values, H, W, truth.variable_names)


def perturb_observations(
    obs: ObservationSet,
    sigma_tilde: float,
    stats: VariableStats,
    seed: int | np.random.Generator = 0,
) -> ObservationSet:
    """Add iid Gaussian noise with per-variable std sigma_tilde * std_v."""
    if sigma_tilde < 0:
        raise ValueError("sigma_tilde must be >= 0")
    if sigma_tilde == 0.0 or obs.M == 0:
        return obs
    if stats.V != obs.V:
        raise ValueError("stats must cover the observed variables")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(obs.values.shape) * (
        sigma_tilde * stats.std_array()
    )
    return replace(obs, values=obs.values + noise)


def local_rates(coords: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """Per-observation window density alpha_m = M_k / k^2 (M_k / k when H = 1).

    M_k counts observations, including the observation itself, whose wrapped
    offset is within (k - 1) / 2 along both axes.
    """
    _check_window(k, H, W)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    m = coords.shape[0]
    if m == 0:
        return np.zeros(0)
    r = (k - 1) / 2
    dh = np.abs(wrap_offset(coords[:, 0][:, None] - coords[:, 0][None, :], H))
    dw = np.abs(wrap_offset(coords[:, 1][:, None] - coords[:, 1][None, :], W))
    counts = ((dh <= r) & (dw <= r)).sum(axis=1)
    denom = k if H == 1 else k * k
    return np.minimum(counts / denom, 1.0)


def with_local_rates(obs: ObservationSet, k: int) -> ObservationSet:
    return replace(obs, local_rates=local_rates(obs.coords, k, obs.H, obs.W))


# ---------------------------------------------------------------------------
# kernels


def kernel_theta_size(hidden: tuple[int, ...]) -> int:
    sizes = (2, *hidden, 1)
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


def _unflatten_mlp(theta: ad.Tensor, hidden: tuple[int, ...]) -> list[tuple[ad.Tensor, ad.Tensor]]:
    sizes = (2, *hidden, 1)
    parts = []
    off = 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = ad.reshape(ad.tslice(theta, off, off + n_in * n_out), (n_in, n_out))
        off += n_in * n_out
        b = ad.tslice(theta, off, off + n_out)
        off += n_out
        parts.append((w, b))
    return parts


def _mlp_kernel(theta: ad.Tensor, hidden: tuple[int, ...], feats: np.ndarray) -> ad.Tensor:
    """Positive kernel values (P,) from input features (P, 2)."""
    h: ad.Tensor | np.ndarray = ad.Tensor(feats)
    parts = _unflatten_mlp(theta, hidden)
    for w, b in parts[:-1]:
        h = ad.tanh(ad.matmul(h, w) + b)
    w, b = parts[-1]
    return ad.reshape(ad.softplus(ad.matmul(h, w) + b), (-1,))


@lru_cache(maxsize=None)
def gaussian_fit_theta(hidden: tuple[int, ...], k: int) -> np.ndarray:
    """MLP kernel parameters fitted once to a unit-scale Gaussian bump.

    Used as the learned-kernel initialization so training starts from a
    sensible interpolator. Deterministic: fixed seed, fixed schedule; the
    result is snapped to float32 values so freshly initialized models
    round-trip checkpoints bitwise.
    """
    r = (k - 1) / 2 if k > 1 else 1.0
    deltas = np.linspace(-r, r, 41)
    alphas = np.linspace(0.05, 1.0, 9)
    dd, aa = np.meshgrid(deltas, alphas, indexing="ij")
    feats = np.stack([dd.ravel(), aa.ravel()], axis=1)
    target = np.exp(-0.5 * dd.ravel() ** 2)

    rng = np.random.default_rng(20240601)
    sizes = (2, *hidden, 1)
    theta0 = []
    for i in range(len(sizes) - 1):
        theta0.append(rng.standard_normal(sizes[i] * sizes[i + 1]) / math.sqrt(sizes[i]))
        theta0.append(np.zeros(sizes[i + 1]))
    theta = np.concatenate(theta0)

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    lr, b1, b2, eps = 2e-2, 0.9, 0.999, 1e-8
    for step in range(1, 801):
        t = ad.Tensor(theta)
        phi = _mlp_kernel(t, hidden, feats)
        loss = ad.tmean(ad.square(phi - target))
        loss.backward()
        g = t.grad
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**step)
        vh = v / (1 - b2**step)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
    out = theta.astype(np.float32).astype(np.float64)
    out.flags.writeable = False
    return out


def default_learned_kernel(H: int, hidden: tuple[int, ...] = (16, 16), k: int = 9) -> LearnedKernel:
    theta = gaussian_fit_theta(tuple(hidden), k)
    theta_h = theta.copy() if H > 1 else None
    return LearnedKernel(theta.copy(), theta_h, tuple(hidden), k)


def _phi_graph(
    params: KernelParams,
    dh: np.ndarray,
    dw: np.ndarray,
    alpha: np.ndarray,
    theta_h: ad.Tensor | None = None,
    theta_w: ad.Tensor | None = None,
) -> ad.Tensor:
    """Pairwise weights (P,) as a graph node; theta overrides enable training."""
    if isinstance(params, GaussianKernel):
        w = np.exp(
            -0.5 * (dh / params.scale_h) ** 2 - 0.5 * (dw / params.scale_w) ** 2
        )
        return ad.Tensor(w)
    if theta_w is None:
        theta_w = ad.Tensor(params.theta_w)
    if theta_h is None and params.theta_h is not None:
        theta_h = ad.Tensor(params.theta_h)
    phi = _mlp_kernel(theta_w, params.hidden, np.stack([dw, alpha], axis=1))
    if theta_h is not None:
        phi = phi * _mlp_kernel(theta_h, params.hidden, np.stack([dh, alpha], axis=1))
    return phi


def kernel_weight(dh: float, dw: float, alpha: float, params: KernelParams) -> float:
    """Weight of one observation on one grid point at wrapped offsets (dh, dw)."""
    out = _phi_graph(
        params, np.array([float(dh)]), np.array([float(dw)]), np.array([float(alpha)])
    )
    return float(out.data[0])


# ---------------------------------------------------------------------------
# the lift


def _axis_window(center: float, k: int, L: int) -> np.ndarray:
    """Integer indices within the k-window of `center` on a ring of length L."""
    if L == 1:
        return np.zeros(1, dtype=np.intp)
    r = (k - 1) / 2
    lo = math.ceil(center - r)
    hi = math.floor(center + r)
    if hi - lo + 1 >= L:
        return np.arange(L, dtype=np.intp)
    return np.arange(lo, hi + 1, dtype=np.intp) % L


def _lift_pairs(obs: ObservationSet, k: int):
    """(grid_idx, dh, dw, alpha, obs_idx) arrays over all in-window pairs."""
    grid_idx, dhs, dws, alphas, obs_idx = [], [], [], [], []
    for m in range(obs.M):
        hm, wm = obs.coords[m]
        hs = _axis_window(hm, k, obs.H)
        ws = _axis_window(wm, k, obs.W)
        hh, ww = np.meshgrid(hs, ws, indexing="ij")
        hh = hh.ravel()
        ww = ww.ravel()
        grid_idx.append(hh * obs.W + ww)
        dhs.append(wrap_offset(hh - hm, obs.H))
        dws.append(wrap_offset(ww - wm, obs.W))
        alphas.append(np.full(hh.size, obs.local_rates[m]))
        obs_idx.append(np.full(hh.size, m, dtype=np.intp))
    if not grid_idx:
        z = np.zeros(0)
        return z.astype(np.intp), z, z, z, z.astype(np.intp)
    return (
        np.concatenate(grid_idx).astype(np.intp),
        np.concatenate(dhs),
        np.concatenate(dws),
        np.concatenate(alphas),
        np.concatenate(obs_idx),
    )


def lift_graph(
    obs: ObservationSet,
    params: KernelParams,
    fill: np.ndarray | None = None,
    theta_h: ad.Tensor | None = None,
    theta_w: ad.Tensor | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable lift: returns (x_o (N, V), rho (N, 1)) graph nodes.

    `fill` is the per-variable value used where rho < EPS_RHO (defaults to
    zeros, i.e. the climatological mean of normalized fields).
    """
    if obs.local_rates is None:
        raise ValueError("observation local_rates must be populated before lifting")
    _check_window(params.k, obs.H, obs.W)
    n = obs.H * obs.W
    if fill is None:
        fill = np.zeros(obs.V)
    fill_row = np.asarray(fill, dtype=np.float64).reshape(1, obs.V)
    if obs.M == 0:
        return (
            ad.Tensor(np.broadcast_to(fill_row, (n, obs.V)).copy()),
            ad.Tensor(np.zeros((n, 1))),
        )
    grid_idx, dh, dw, alpha, obs_idx = _lift_pairs(obs, params.k)
    phi = _phi_graph(params, dh, dw, alpha, theta_h=theta_h, theta_w=theta_w)
    phi_col = ad.reshape(phi, (-1, 1))
    rho = ad.scatter_rows(phi_col, grid_idx, n)  # (N, 1)
    num = ad.scatter_rows(phi_col * obs.values[obs_idx], grid_idx, n)  # (N, V)
    mask = (rho.data >= EPS_RHO).astype(np.float64)  # constant w.r.t. theta
    denom = rho * mask + (1.0 - mask)
    x_o = (num / denom) * mask + fill_row * (1.0 - mask)
    return x_o, rho


def setconv_lift(
    obs: ObservationSet,
    params: KernelParams,
    fill: np.ndarray | None = None,
) -> LiftResult:
    """Lift observations to a gridded estimate and density field."""
    x_o, rho = lift_graph(obs, params, fill=fill)
    grid = GridState(
        x_o.data.reshape(obs.H, obs.W, obs.V), obs.variable_names
    )
    return LiftResult(grid, rho.data.reshape(obs.H, obs.W))


# ---------------------------------------------------------------------------
# CSV interchange


def write_observations_csv(obs: ObservationSet, path) -> None:
    """Write `h,w,v0,...,v{V-1}` rows, one observation per line."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["h", "w"] + [f"v{i}" for i in range(obs.V)])
        for m in range(obs.M):
            writer.writerow(
                [repr(obs.coords[m, 0]), repr(obs.coords[m, 1])]
                + [repr(x) for x in obs.values[m]]
            )


def read_observations_csv(
    path, H: int, W: int, variable_names: tuple[str, ...] | None = None
) -> ObservationSet:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) < 3 or header[:2] != ["h", "w"]:
            raise ValueError(f"{path}: expected header h,w,v0,... got {header}")
        v = len(header) - 2
        rows = [[float(x) for x in row] for row in reader if row]
    data = np.array(rows, dtype=np.float64).reshape(-1, v + 2)
    if variable_names is None:
        variable_names = tuple(f"v{i}" for i in range(v))
    return ObservationSet(data[:, :2], data[:, 2:], H, W, variable_names)
