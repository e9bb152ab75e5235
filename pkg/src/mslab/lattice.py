"""1-D lattice tables for Monte Carlo estimated effective coefficients.

Effective coefficients are estimated at lattice points in y and linearly
interpolated along simulated paths (flat extrapolation outside the lattice,
which the explosion guard keeps harmless).  Only the scalar slow dimension
(d2 = 1) is supported by the table machinery; the shipped benchmarks are all
scalar in y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatticeField1D:
    """Piecewise-linear table y -> value array of shape ``value_shape``."""

    name: str
    ys: np.ndarray  # (m,), strictly increasing
    values: np.ndarray  # (m, *value_shape)
    stderr: np.ndarray | None = None  # (m, *value_shape)

    def __post_init__(self):
        ys = np.asarray(self.ys, float)
        if ys.ndim != 1 or ys.size < 2 or np.any(np.diff(ys) <= 0):
            raise ValueError(f"{self.name}: lattice must be strictly increasing, >=2 points")
        if self.values.shape[0] != ys.size:
            raise ValueError(f"{self.name}: values/lattice length mismatch")

    @property
    def value_shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def __call__(self, t, Y) -> np.ndarray:
        """Evaluate at slow states Y of shape (..., 1) -> (..., *value_shape)."""
        yq = np.asarray(Y, float)[..., 0]
        flat = self.values.reshape(self.ys.size, -1)
        cols = [np.interp(yq, self.ys, flat[:, j]) for j in range(flat.shape[1])]
        out = np.stack(cols, axis=-1)
        return out.reshape(yq.shape + self.value_shape)

    def scalar_table(self) -> tuple[np.ndarray, np.ndarray]:
        """(ys, vals) pair for kernels; requires scalar values."""
        if int(np.prod(self.value_shape)) != 1:
            raise ValueError(f"{self.name}: kernels need a scalar-valued table")
        return np.ascontiguousarray(self.ys, float), np.ascontiguousarray(
            self.values.reshape(self.ys.size), float)


def as_lattice_callable(obj):
    """Accept a LatticeField1D or a plain (t, Y) callable."""
    if isinstance(obj, LatticeField1D) or callable(obj):
        return obj
    raise TypeError(f"expected LatticeField1D or callable, got {type(obj)!r}")
