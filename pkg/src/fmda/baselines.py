"""Classical reference assimilators for benchmarking.

``interp_blend`` smoothly relaxes the background toward a Gaussian-kernel
interpolation of the observations where the observation density is high.
``optimal_interpolation`` is the standard linear-Gaussian analysis

    x_a = x_b + B H' (H B H' + R)^-1 (y - H x_b)

with a stationary toroidal Gaussian background correlation (per variable,
no cross-variable terms), bilinear sampling as H, and diagonal R. With
point observations of state variables this coincides with the variational
optimum, so it stands in for an iterative 3D-Var comparator. The background
and observation error stds are expressed in climatological-std units, which
cancel out of the increment, so no explicit climatology is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError
from .grid import GridState, VariableStats
from .obs import (
    GaussianKernel,
    ObservationSet,
    setconv_lift,
    with_local_rates,
    wrap_offset,
)


@dataclass(frozen=True)
class OIConfig:
    length_scale: float = 2.0  # background-error correlation length, grid units
    sigma_b: float = 1.0  # background-error std, climatological-std units
    sigma_o: float = 0.01  # observation-error std, same units
    solver_tol: float = 1e-8
    max_observations: int = 5000  # dense M x M solve guard

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.sigma_b <= 0:
            raise ValueError("sigma_b must be positive")
        if self.sigma_o < 0:
            raise ValueError("sigma_o must be >= 0")
        if self.sigma_b**2 + self.sigma_o**2 <= 0:
            raise ValueError("sigma_b^2 + sigma_o^2 must be positive")


def _blend_window(scale: float, H: int, W: int) -> int:
    """Odd window covering ~4 length scales, capped to the valid range."""
    k = 2 * int(np.ceil(4.0 * scale)) + 1
    cap = 2 * W - 1 if H == 1 else min(2 * H - 1, 2 * W - 1)
    return min(k, cap)


def interp_blend(
    x_b: GridState,
    observations: ObservationSet,
    scale: float = 1.0,
    stats: VariableStats | None = None,
) -> GridState:
    """Density-weighted blend of the background with a kernel interpolation.

    x_a = x_b + rho / (rho + 1) * (x_o - x_b), so unobserved regions keep
    the background exactly and densely observed ones approach x_o.
    """
    kernel = GaussianKernel(scale, scale, _blend_window(scale, x_b.H, x_b.W))
    if observations.local_rates is None:
        observations = with_local_rates(observations, kernel.k)
    fill = stats.mean_array() if stats is not None else None
    lift = setconv_lift(observations, kernel, fill=fill)
    w = (lift.rho / (lift.rho + 1.0))[:, :, None]
    return x_b.with_values(x_b.values + w * (lift.x_o.values - x_b.values))


def _toroidal_correlation(d: np.ndarray, scale: float) -> np.ndarray:
    return np.exp(-0.5 * (d / scale) ** 2)


def _bilinear_corners(coords: np.ndarray, H: int, W: int):
    """Integer corner indices and weights for bilinear sampling on the torus."""
    h0 = np.floor(coords[:, 0]).astype(int)
    w0 = np.floor(coords[:, 1]).astype(int)
    fh = coords[:, 0] - h0
    fw = coords[:, 1] - w0
    corners = []
    for dh, dw, wt in (
        (0, 0, (1 - fh) * (1 - fw)),
        (0, 1, (1 - fh) * fw),
        (1, 0, fh * (1 - fw)),
        (1, 1, fh * fw),
    ):
        corners.append(((h0 + dh) % H, (w0 + dw) % W, wt))
    return corners


def _sample_bilinear(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """H x W x V field sampled at M fractional coordinates -> (M, V)."""
    H, W = field.shape[:2]
    out = np.zeros((coords.shape[0], field.shape[2]))
    for hi, wi, wt in _bilinear_corners(coords, H, W):
        out += wt[:, None] * field[hi, wi, :]
    return out


def optimal_interpolation(
    x_b: GridState, observations: ObservationSet, cfg: OIConfig = OIConfig()
) -> GridState:
    """Exact dense-solve optimal interpolation analysis."""
    m = observations.M
    if m == 0:
        return x_b
    if m > cfg.max_observations:
        raise ValueError(
            f"{m} observations exceed the dense-solve guard ({cfg.max_observations})"
        )
    H, W = x_b.H, x_b.W
    coords = observations.coords
    ell = cfg.length_scale

    dh = wrap_offset(coords[:, 0][:, None] - coords[:, 0][None, :], H)
    dw = wrap_offset(coords[:, 1][:, None] - coords[:, 1][None, :], W)
    c_obs = _toroidal_correlation(dh, ell) * _toroidal_correlation(dw, ell)
    a = cfg.sigma_b**2 * c_obs
    a[np.diag_indices(m)] += cfg.sigma_o**2 + 1e-10 * cfg.sigma_b**2

    innovation = observations.values - _sample_bilinear(x_b.values, coords)

    try:
        factor = scipy.linalg.cho_factor(a)
        weights = scipy.linalg.cho_solve(factor, innovation)
    except scipy.linalg.LinAlgError as e:
        raise NumericalError(f"singular observation system: {e}") from e
    residual = a @ weights - innovation
    if np.linalg.norm(residual) > cfg.solver_tol * (1.0 + np.linalg.norm(innovation)):
        raise NumericalError("observation-system solve exceeded tolerance")

    # B H' columns: bilinear blends of the stationary grid-to-point correlation.
    grid_h = np.arange(H)[:, None]
    grid_w = np.arange(W)[:, None]
    cols = np.zeros((H * W, m))
    for hi, wi, wt in _bilinear_corners(coords, H, W):
        ch = _toroidal_correlation(wrap_offset(grid_h - hi[None, :], H), ell)  # (H, M)
        cw = _toroidal_correlation(wrap_offset(grid_w - wi[None, :], W), ell)  # (W, M)
        cols += wt[None, :] * (ch[:, None, :] * cw[None, :, :]).reshape(H * W, m)
    increment = cfg.sigma_b**2 * (cols @ weights)
    return x_b.with_values(x_b.values + increment.reshape(x_b.shape))
