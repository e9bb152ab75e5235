"""Counter-based noise generation (Philox) and the time grid.

Every Gaussian increment is a pure function of
``(master seed, replica, stream, step, component)``:

* the bit generator is Philox keyed by ``SeedSequence((seed, replica, stream))``,
* uniform word ``j = step*dim + component`` maps to the normal via the
  inverse CDF, so any (stream, step) slot is addressable by advancing the
  Philox counter without generating predecessors.

Streams 0/1/2 carry the fast noise, the slow noise and the extra Brownian
motion used by the deviation-limit equations; the three are mutually
independent by key separation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

STREAM_W1 = 0
STREAM_W2 = 1
STREAM_WTILDE = 2

# half-ulp shift keeps the uniform strictly inside (0, 1) before ndtri
_U_SHIFT = 2.0 ** -54


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 + k*dt, k = 0..n_steps."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0.0 or self.n_steps <= 0:
            raise ValueError("TimeGrid requires dt > 0 and n_steps >= 1")

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def philox(seed: int, *key: int) -> np.random.Generator:
    """Generator over Philox keyed by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=(int(seed),) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seed=ss))


def subseed(seed: int, *key: int) -> int:
    """Derive an independent integer seed from (seed, *key)."""
    ss = np.random.SeedSequence(entropy=(int(seed),) + tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])


def normal_block(seed: int, key: tuple[int, ...], n_steps: int, dim: int) -> np.ndarray:
    """(n_steps, dim) standard normals for one stream (unscaled by sqrt(dt))."""
    u = philox(seed, *key).random((n_steps, dim))
    return ndtri(u + _U_SHIFT)


def normal_at(seed: int, key: tuple[int, ...], step: int, dim: int, component: int) -> float:
    """Address a single increment slot directly via the Philox counter."""
    j = step * dim + component
    ss = np.random.SeedSequence(entropy=(int(seed),) + tuple(int(k) for k in key))
    bitgen = np.random.Philox(seed=ss)
    bitgen.advance(j // 4)  # advance() counts 4-word Philox blocks
    u = np.random.Generator(bitgen).random(j % 4 + 1)[-1]
    return float(ndtri(u + _U_SHIFT))


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments (already scaled by sqrt(dt)) for one replica."""

    seed: int
    replica: int
    grid: TimeGrid
    d1: int
    d2: int
    w1: np.ndarray = field(repr=False)  # (n_steps, d1)
    w2: np.ndarray = field(repr=False)  # (n_steps, d2)
    wtilde: np.ndarray = field(repr=False)  # (n_steps, d2)


def generate_noise(grid: TimeGrid, d1: int, d2: int, seed: int,
                   replica: int = 0) -> NoiseBundle:
    """Materialize the three independent increment streams of one replica."""
    if d1 <= 0 or d2 <= 0:
        raise ValueError("dimensions must be positive")
    s = np.sqrt(grid.dt)
    return NoiseBundle(
        seed=int(seed),
        replica=int(replica),
        grid=grid,
        d1=d1,
        d2=d2,
        w1=s * normal_block(seed, (replica, STREAM_W1), grid.n_steps, d1),
        w2=s * normal_block(seed, (replica, STREAM_W2), grid.n_steps, d2),
        wtilde=s * normal_block(seed, (replica, STREAM_WTILDE), grid.n_steps, d2),
    )


def increments_for(seed: int, replica: int, stream: int, grid: TimeGrid,
                   dim: int) -> np.ndarray:
    """One stream only, scaled by sqrt(dt); used by the batch experiment paths."""
    return np.sqrt(grid.dt) * normal_block(seed, (replica, stream), grid.n_steps, dim)
