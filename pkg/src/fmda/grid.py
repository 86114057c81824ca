"""Gridded state fields, per-variable statistics, and the shared core ops.

A ``GridState`` is an immutable H x W x V field of float64 values in
physical units. Backgrounds, truths, analyses, lifted observation estimates
and flow states all share this representation, so arithmetic between any two
of them is well defined whenever shapes and variable names agree. The domain
is a flat torus: no latitude weighting anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridShapeError(ValueError):
    """Two fields were combined with incompatible shape or variables."""


@dataclass(frozen=True, eq=False)
class GridState:
    """An immutable H x W x V real field with named variables."""

    values: np.ndarray
    variable_names: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise GridShapeError(f"values must be 3-d (H, W, V), got ndim={vals.ndim}")
        h, w, v = vals.shape
        if h < 1:
            raise GridShapeError(f"H must be >= 1, got {h}")
        if w < 2:
            raise GridShapeError(f"W must be >= 2, got {w}")
        if v < 1:
            raise GridShapeError(f"V must be >= 1, got {v}")
        names = tuple(str(n) for n in self.variable_names)
        if len(names) != v:
            raise GridShapeError(
                f"V={v} values but {len(names)} variable names"
            )
        if not np.isfinite(vals).all():
            raise ValueError("GridState values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "variable_names", names)

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]

    @property
    def V(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "GridState":
        """Same grid and variables, new values."""
        return GridState(values, self.variable_names)


def check_same_shape(a: GridState, b: GridState) -> None:
    """Raise GridShapeError naming the first mismatched dimension."""
    for dim, (x, y) in zip("HWV", zip(a.shape, b.shape)):
        if x != y:
            raise GridShapeError(f"{dim} mismatch: {x} != {y}")
    if a.variable_names != b.variable_names:
        raise GridShapeError(
            f"variable names differ: {a.variable_names} != {b.variable_names}"
        )


@dataclass(frozen=True)
class VariableStats:
    """Per-variable climatological mean and std (physical units)."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        mean = tuple(float(m) for m in np.atleast_1d(self.mean))
        std = tuple(float(s) for s in np.atleast_1d(self.std))
        if len(mean) != len(std):
            raise ValueError(f"mean has {len(mean)} entries, std has {len(std)}")
        if any(not np.isfinite(m) for m in mean):
            raise ValueError("stats means must be finite")
        if any(not (s > 0.0 and np.isfinite(s)) for s in std):
            raise ValueError("stats stds must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def V(self) -> int:
        return len(self.mean)

    def mean_array(self) -> np.ndarray:
        return np.array(self.mean, dtype=np.float64)

    def std_array(self) -> np.ndarray:
        return np.array(self.std, dtype=np.float64)


def _check_stats(x: GridState, s: VariableStats) -> None:
    if s.V != x.V:
        raise GridShapeError(f"V mismatch: state has {x.V}, stats have {s.V}")


def rmse_per_variable(a: GridState, b: GridState) -> np.ndarray:
    """Per-variable root-mean-square difference over the H x W grid."""
    check_same_shape(a, b)
    d = a.values - b.values
    return np.sqrt(np.mean(d * d, axis=(0, 1)))


def normalize(x: GridState, s: VariableStats) -> GridState:
    """(x - mean) / std per variable."""
    _check_stats(x, s)
    return x.with_values((x.values - s.mean_array()) / s.std_array())


def denormalize(x: GridState, s: VariableStats) -> GridState:
    """Inverse of normalize: x * std + mean per variable."""
    _check_stats(x, s)
    return x.with_values(x.values * s.std_array() + s.mean_array())


def lerp_states(x0: GridState, x1: GridState, tau: float) -> GridState:
    """Point on the straight-line path (1 - tau) * x0 + tau * x1."""
    check_same_shape(x0, x1)
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    return x0.with_values((1.0 - tau) * x0.values + tau * x1.values)
