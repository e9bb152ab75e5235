"""Euler-Maruyama integration of the coupled system, the frozen process, the
averaged equations and the deviation-limit SDEs.

Public ops return full ``Path`` objects for a single replica and are pure
functions of (inputs, seed).  The experiment harness uses the ``run_*_chunk``
functions, which take pre-generated increment arrays for a block of replicas
and save only checkpoint states.

Hard integrator precondition: dt <= alpha_eps^2 * STIFFNESS_FRACTION.
Explosion handling is soft: a path leaving |state| < EXPLOSION_BOUND is
frozen at its last good state and flagged with the offending step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import StiffnessError, ValidationError
from .fields import CoefficientField, compile_bundle
from .lattice import LatticeField1D
from .model import MultiscaleSystem, ScaleSchedule
from .rng import NoiseBundle, TimeGrid

STIFFNESS_FRACTION = 0.05  # dt <= alpha^2 / 20
EXPLOSION_BOUND = 1.0e6


def _kernels():
    if backend.use_numba():
        from . import kernels_numba as K
    else:
        from . import kernels_numpy as K
    return K


@dataclass(frozen=True)
class Path:
    """States on a uniform grid; ``exploded_step`` is 1-based or None."""

    grid: TimeGrid
    states: np.ndarray  # (n_save, dim)
    exploded_step: int | None = None
    save_idx: np.ndarray | None = None  # None means the full grid 0..n_steps

    @property
    def exploded(self) -> bool:
        return self.exploded_step is not None

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def times(self) -> np.ndarray:
        ts = self.grid.times()
        return ts if self.save_idx is None else ts[self.save_idx]


def _expl_step(flag: int) -> int | None:
    return None if flag < 0 else int(flag)


# ---------------------------------------------------------------------------
# compiled evaluator plumbing

_ZERO_VEC = None


def _sys_scalar(system: MultiscaleSystem):
    return compile_bundle([system.b, system.c, system.sigma,
                           system.F, system.H, system.G])


def _sys_vector(system: MultiscaleSystem):
    cv = system.c.compile_vector() if system.has_c else None
    hv = system.H.compile_vector() if system.has_h else None
    return (system.b.compile_vector(), cv, system.sigma.compile_vector(),
            system.F.compile_vector(), hv, system.G.compile_vector())


def _frozen_scalar(system: MultiscaleSystem):
    return compile_bundle([system.b, system.sigma])


def _frozen_vector(system: MultiscaleSystem):
    return (system.b.compile_vector(), system.sigma.compile_vector())


def _scratch(system: MultiscaleSystem):
    d1, d2 = system.d1, system.d2
    return (np.empty(d1), np.empty(d1), np.empty(d1 * d1),
            np.empty(d2), np.empty(d2), np.empty(d2 * d2))


def scale_factors(schedule: ScaleSchedule, eps: float):
    if not (0.0 < eps < 1.0):
        raise ValidationError(f"eps must lie in (0,1), got {eps}")
    alpha, beta, gamma = schedule.scales(eps)
    return 1.0 / alpha ** 2, 1.0 / beta, 1.0 / gamma, 1.0 / alpha


def check_stiffness(schedule: ScaleSchedule, eps: float, dt: float) -> None:
    alpha = eps ** schedule.a_exp
    dt_max = STIFFNESS_FRACTION * alpha * alpha
    if dt > dt_max * (1.0 + 1e-12):
        raise StiffnessError(
            f"dt={dt:g} violates the stiffness precondition "
            f"dt <= alpha_eps^2/20 = {dt_max:g} at eps={eps:g}")


# ---------------------------------------------------------------------------
# chunk runners (replica blocks, checkpoint saves)

def run_multiscale_chunk(system, schedule, eps, t0, dt, n_steps, save_idx,
                         w1, w2, bound=EXPLOSION_BOUND):
    """Integrate a replica block of the coupled system.

    Returns (xs (R,S,d1), ys (R,S,d2), expl (R,)); expl entries are the
    1-based explosion step or -1.
    """
    check_stiffness(schedule, eps, dt)
    inv_a2, inv_b, inv_g, inv_a = scale_factors(schedule, eps)
    n_rep = w1.shape[0]
    save_idx = np.asarray(save_idx, np.int64)
    xs = np.empty((n_rep, save_idx.size, system.d1))
    ys = np.empty((n_rep, save_idx.size, system.d2))
    expl = np.empty(n_rep, np.int64)
    K = _kernels()
    if backend.use_numba():
        K.multiscale(_sys_scalar(system), t0, dt, system.x0, system.y0, w1, w2,
                     inv_a2, inv_b, inv_g, inv_a, system.has_c, system.has_h,
                     bound, save_idx, xs, ys, expl)
    else:
        K.multiscale(_sys_vector(system), t0, dt, system.x0, system.y0, w1, w2,
                     inv_a2, inv_b, inv_g, inv_a, system.has_c, system.has_h,
                     bound, save_idx, xs, ys, expl)
    return xs, ys, expl


def run_fluct_chunk(system, schedule, eps, rhs, t0, dt, n_steps, w1, w2,
                    bound=EXPLOSION_BOUND):
    """Coupled integration plus trapezoid accumulation of rhs(t, X, Y)."""
    check_stiffness(schedule, eps, dt)
    inv_a2, inv_b, inv_g, inv_a = scale_factors(schedule, eps)
    n_rep = w1.shape[0]
    out = np.empty((n_rep, rhs.k))
    expl = np.empty(n_rep, np.int64)
    K = _kernels()
    if backend.use_numba():
        K.multiscale_fluct(_sys_scalar(system), rhs.scalar(), t0, dt, system.x0,
                           system.y0, w1, w2, inv_a2, inv_b, inv_g, inv_a,
                           system.has_c, system.has_h, bound, out, expl)
    else:
        K.multiscale_fluct(_sys_vector(system), rhs.vector_xy(), t0, dt,
                           system.x0, system.y0, w1, w2, inv_a2, inv_b, inv_g,
                           inv_a, system.has_c, system.has_h, bound, out, expl)
    return out, expl


def run_frozen_chunk(system, y, dt, x_starts, w1, idx, sgn, save_idx,
                     bound=EXPLOSION_BOUND):
    y = np.asarray(y, float).reshape(system.d2)
    x_starts = np.ascontiguousarray(x_starts, float)
    save_idx = np.asarray(save_idx, np.int64)
    n_rep = x_starts.shape[0]
    xs = np.empty((n_rep, save_idx.size, system.d1))
    expl = np.empty(n_rep, np.int64)
    idx = np.asarray(idx, np.int64)
    sgn = np.asarray(sgn, float)
    K = _kernels()
    if backend.use_numba():
        K.frozen_paths(_frozen_scalar(system), y, dt, x_starts, w1, idx, sgn,
                       bound, save_idx, xs, expl)
    else:
        K.frozen_paths(_frozen_vector(system), y, dt, x_starts, w1, idx, sgn,
                       bound, save_idx, xs, expl)
    return xs, expl


def run_fk_chunk(system, rhs, t_anchor, y, dt, x_starts, w1, idx, sgn,
                 bound=EXPLOSION_BOUND):
    """Trapezoid FK integrals of ``rhs`` along frozen paths."""
    y = np.asarray(y, float).reshape(system.d2)
    x_starts = np.ascontiguousarray(x_starts, float)
    n_rep = x_starts.shape[0]
    out = np.empty((n_rep, rhs.k))
    expl = np.empty(n_rep, np.int64)
    idx = np.asarray(idx, np.int64)
    sgn = np.asarray(sgn, float)
    K = _kernels()
    if backend.use_numba():
        K.fk_integrals(_frozen_scalar(system), rhs.scalar(), t_anchor, y, dt,
                       x_starts, w1, idx, sgn, bound, out, expl)
    else:
        K.fk_integrals(_frozen_vector(system), rhs.vector_xy(), t_anchor, y,
                       dt, x_starts, w1, idx, sgn, bound, out, expl)
    return out, expl


def run_averaged_chunk(fbar, g_field: CoefficientField, y0, t0, dt, n_steps,
                       save_idx, w2, bound=EXPLOSION_BOUND):
    """Averaged slow equation; ``fbar`` is a CoefficientField or LatticeField1D."""
    y0 = np.asarray(y0, float)
    save_idx = np.asarray(save_idx, np.int64)
    n_rep, _, d2 = w2.shape
    ys = np.empty((n_rep, save_idx.size, d2))
    expl = np.empty(n_rep, np.int64)
    K = _kernels()
    if isinstance(fbar, LatticeField1D):
        if d2 != 1:
            raise ValidationError("lattice effective drift requires d2 == 1")
        ys_lat, fb_vals = fbar.scalar_table()
        if backend.use_numba():
            K.averaged_lattice(ys_lat, fb_vals, _g_scalar(g_field), t0, dt, y0,
                               w2, bound, save_idx, ys, expl)
        else:
            K.averaged_lattice(ys_lat, fb_vals, g_field.compile_vector(), t0,
                               dt, y0, w2, bound, save_idx, ys, expl)
    elif isinstance(fbar, CoefficientField):
        if backend.use_numba():
            K.averaged_dsl(_g_scalar(fbar), _g_scalar(g_field), t0, dt, y0, w2,
                           bound, save_idx, ys, expl)
        else:
            K.averaged_dsl(fbar.compile_vector(), g_field.compile_vector(), t0,
                           dt, y0, w2, bound, save_idx, ys, expl)
    else:
        raise ValidationError(
            "fbar must be a CoefficientField or LatticeField1D, "
            f"got {type(fbar).__name__}")
    return ys, expl


def _g_scalar(field: CoefficientField):
    return compile_bundle([field])


def run_fused_limit_chunk(tables, g_field, dg_field, y0, t0, dt, n_steps,
                          save_idx, w2, wt, bound=EXPLOSION_BOUND):
    """Scalar fused averaged+limit sweep.

    ``tables`` = (ys_lat, fbar, grad_fbar, drift_extra, sigma_extra) value
    arrays over the lattice.
    """
    ys_lat, fb, gf, de, se = (np.ascontiguousarray(a, float) for a in tables)
    y0 = np.asarray(y0, float)
    save_idx = np.asarray(save_idx, np.int64)
    n_rep = w2.shape[0]
    ybars = np.empty((n_rep, save_idx.size))
    zs = np.empty((n_rep, save_idx.size))
    expl = np.empty(n_rep, np.int64)
    K = _kernels()
    if backend.use_numba():
        K.fused_avg_limit(ys_lat, fb, gf, de, se, _g_scalar(g_field),
                          _g_scalar(dg_field), t0, dt, y0, w2, wt, bound,
                          save_idx, ybars, zs, expl)
    else:
        K.fused_avg_limit(ys_lat, fb, gf, de, se, g_field.compile_vector(),
                          dg_field.compile_vector(), t0, dt, y0, w2, wt, bound,
                          save_idx, ybars, zs, expl)
    return ybars, zs, expl


# ---------------------------------------------------------------------------
# public single-replica operations

def simulate_multiscale(system: MultiscaleSystem, schedule: ScaleSchedule,
                        eps: float, grid: TimeGrid, noise: NoiseBundle,
                        bound: float = EXPLOSION_BOUND) -> tuple[Path, Path]:
    """Coupled fast/slow paths on the full grid under the bundle's (w1, w2)."""
    if noise.grid != grid or noise.d1 != system.d1 or noise.d2 != system.d2:
        raise ValidationError("noise bundle does not match grid/system dims")
    save_idx = np.arange(grid.n_steps + 1, dtype=np.int64)
    xs, ys, expl = run_multiscale_chunk(
        system, schedule, eps, grid.t0, grid.dt, grid.n_steps, save_idx,
        noise.w1[None], noise.w2[None], bound)
    step = _expl_step(expl[0])
    return (Path(grid, xs[0], step), Path(grid, ys[0], step))


def simulate_frozen(system: MultiscaleSystem, y, x_init, grid: TimeGrid,
                    noise: NoiseBundle, bound: float = EXPLOSION_BOUND) -> Path:
    """Fast process with the slow variable frozen at y (time-homogeneous)."""
    x_init = np.asarray(x_init, float).reshape(1, system.d1)
    save_idx = np.arange(grid.n_steps + 1, dtype=np.int64)
    xs, expl = run_frozen_chunk(system, y, grid.dt, x_init, noise.w1[None],
                                [0], [1.0], save_idx, bound)
    return Path(grid, xs[0], _expl_step(expl[0]))


def simulate_averaged(fbar, g_field: CoefficientField, y0, grid: TimeGrid,
                      noise: NoiseBundle, bound: float = EXPLOSION_BOUND) -> Path:
    """dYbar = fbar dt + G dW2 using exactly the bundle's w2 increments."""
    save_idx = np.arange(grid.n_steps + 1, dtype=np.int64)
    ys, expl = run_averaged_chunk(fbar, g_field, y0, grid.t0, grid.dt,
                                  grid.n_steps, save_idx, noise.w2[None], bound)
    return Path(grid, ys[0], _expl_step(expl[0]))


def simulate_limit_deviation(spec, ybar_path: Path, grid: TimeGrid,
                             noise: NoiseBundle,
                             bound: float = EXPLOSION_BOUND) -> Path:
    """Linear deviation-limit SDE along a given averaged path, Z(0) = 0.

    Coefficients are evaluated along the path up front; the stepping kernel
    then only does arithmetic.  Uses the bundle's w2 plus the independent
    wtilde stream.
    """
    if ybar_path.grid != grid:
        raise ValidationError("ybar_path grid mismatch")
    if ybar_path.save_idx is not None:
        raise ValidationError("ybar_path must be saved on the full grid")
    d2 = ybar_path.dim
    ts = grid.times()
    Y = ybar_path.states
    grad_f = np.ascontiguousarray(spec.grad_fbar(ts, Y), float)
    grad_g = np.ascontiguousarray(spec.grad_G(ts, Y), float)
    de = np.ascontiguousarray(spec.drift_extra(ts, Y), float)
    se = np.ascontiguousarray(spec.sigma_extra(ts, Y), float)
    for name, arr, shape in (("grad_fbar", grad_f, (d2, d2)),
                             ("grad_G", grad_g, (d2, d2, d2)),
                             ("drift_extra", de, (d2,)),
                             ("sigma_extra", se, (d2, d2))):
        if arr.shape != (ts.size,) + shape:
            raise ValidationError(f"{name} evaluated to shape {arr.shape}, "
                                  f"expected {(ts.size,) + shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} evaluated non-finite along the path")
    zs = np.empty((grid.n_steps + 1, d2))
    K = _kernels()
    flag = K.limit_from_path(grad_f, grad_g, de, se, grid.dt, noise.w2,
                             noise.wtilde, bound, zs)
    return Path(grid, zs, _expl_step(flag))


def deviation_path(y_eps: Path, ybar: Path, eta: float) -> Path:
    """(Y_eps - Ybar) / eta, pointwise on a shared grid."""
    if y_eps.grid != ybar.grid or y_eps.states.shape != ybar.states.shape:
        raise ValidationError("deviation_path requires identical grids")
    if eta <= 0:
        raise ValidationError("eta must be positive")
    step = None
    if y_eps.exploded or ybar.exploded:
        step = min(s for s in (y_eps.exploded_step, ybar.exploded_step)
                   if s is not None)
    return Path(y_eps.grid, (y_eps.states - ybar.states) / eta, step,
                y_eps.save_idx)
