"""Invariant-measure sampling and Feynman-Kac solution of the cell problems.

The frozen generator's Poisson equation L0 u = -f (f centered under the
frozen invariant measure) is solved as the time integral of E f along frozen
paths, truncated at ``t_trunc`` (mixing makes the tail negligible for the
shipped benchmarks).  A deterministic scale-function/speed-density quadrature
solver provides an independent oracle in one fast dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .engine import EXPLOSION_BOUND, run_fk_chunk, run_frozen_chunk
from .errors import CenteringError, EvaluationError, ExplosionError, ValidationError
from .fields import CoefficientField
from .model import MultiscaleSystem
from .rng import STREAM_W1, normal_block

CENTERING_TOL = 0.05  # |residual| <= max(CENTERING_TOL, 3*stderr)
_FK_ROW_BUDGET = 24_000_000  # max doubles of noise per chunk


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Samples approximating the frozen invariant measure at y_anchor.

    The provenance tuple (seed, burn_in, thinning, dt, n_chains) reproduces
    the samples exactly.
    """

    y_anchor: np.ndarray
    samples: np.ndarray  # (n, d1), chain-major order
    burn_in: float
    thinning: float
    seed: int
    dt: float
    n_chains: int
    per_chain: int = 1

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def sample_invariant(system: MultiscaleSystem, y, burn_in: float, n: int,
                     thinning: float, seed: int, dt: float = 0.01,
                     n_chains: int | None = None,
                     bound: float = EXPLOSION_BOUND) -> EmpiricalMeasure:
    """Thin a batch of frozen trajectories after burn-in.

    Chains split the sample budget (chain c uses noise key (seed, c, W1));
    results do not depend on the memory chunking.
    """
    if burn_in <= 0 or thinning <= 0:
        raise ValidationError("burn_in and thinning must be positive")
    if n < 1:
        raise ValidationError("need n >= 1 samples")
    y = np.asarray(y, float).reshape(system.d2)
    if n_chains is None:
        n_chains = min(n, 64)
    per_chain = -(-n // n_chains)  # ceil
    burn_steps = int(np.ceil(burn_in / dt))
    thin_steps = max(1, int(round(thinning / dt)))
    save_idx = burn_steps + thin_steps * np.arange(per_chain, dtype=np.int64)
    n_steps = int(save_idx[-1])
    chunk = max(1, _FK_ROW_BUDGET // (n_steps * system.d1))
    out = np.empty((n_chains, per_chain, system.d1))
    sq = np.sqrt(dt)
    for lo in range(0, n_chains, chunk):
        hi = min(n_chains, lo + chunk)
        w1 = np.empty((hi - lo, n_steps, system.d1))
        for c in range(lo, hi):
            w1[c - lo] = sq * normal_block(seed, (c, STREAM_W1), n_steps, system.d1)
        starts = np.tile(system.x0, (hi - lo, 1))
        xs, expl = run_frozen_chunk(system, y, dt, starts, w1,
                                    np.arange(hi - lo), np.ones(hi - lo),
                                    save_idx, bound)
        bad = np.nonzero(expl >= 0)[0]
        if bad.size:
            raise ExplosionError(
                f"frozen chain {lo + bad[0]} exploded at step {expl[bad[0]]} "
                f"while sampling the invariant measure at y={y}",
                step=int(expl[bad[0]]))
        out[lo:hi] = xs
    samples = out.reshape(n_chains * per_chain, system.d1)[:n]
    return EmpiricalMeasure(y_anchor=y, samples=samples, burn_in=burn_in,
                            thinning=thinning, seed=int(seed), dt=dt,
                            n_chains=n_chains, per_chain=per_chain)


# ---------------------------------------------------------------------------
# right-hand sides

class PoissonRhs:
    """Vector-valued rhs f(t, x, y) with compiled forms for both backends."""

    def __init__(self, name: str, k: int, vector_fn, scalar_factory):
        self.name = name
        self.k = k
        self._vector = vector_fn
        self._scalar_factory = scalar_factory
        self._scalar_cache: dict[bool, object] = {}

    def vector(self, t, X, Y) -> np.ndarray:
        """(n, k) values; Y may be an anchor (d2,) or a batch (n, d2)."""
        out = self._vector(t, np.asarray(X, float), np.asarray(Y, float))
        out = np.asarray(out, float)
        if out.ndim == 1:
            out = out[:, None]
        return out

    def vector_xy(self):
        return lambda t, X, Y: self.vector(t, X, Y)

    def scalar(self):
        use = backend.use_numba()
        fn = self._scalar_cache.get(use)
        if fn is None:
            fn = self._scalar_factory()
            self._scalar_cache[use] = fn
        return fn

    def shifted(self, shift) -> "PoissonRhs":
        shift = np.asarray(shift, float).reshape(self.k)
        base_vec = self._vector
        base_factory = self._scalar_factory

        def vec(t, X, Y):
            out = np.asarray(base_vec(t, X, Y), float)
            if out.ndim == 1:
                out = out[:, None]
            return out - shift

        def factory():
            base = base_factory()
            k = self.k
            sh = shift.copy()
            def py(t, x, y, out):
                base(t, x, y, out)
                for i in range(k):
                    out[i] -= sh[i]
            return backend.njit_compile(py)

        return PoissonRhs(f"{self.name}-centered", self.k, vec, factory)

    @classmethod
    def from_field(cls, field: CoefficientField) -> "PoissonRhs":
        rows, cols = field.shape
        if cols != 1:
            raise ValidationError(f"{field.name}: rhs must be a column field")
        vecf = field.compile_vector()

        def vec(t, X, Y):
            return vecf(t, X, Y)[..., 0]

        return cls(field.name, rows, vec, field.compile_scalar)

    @classmethod
    def from_dot_table(cls, c_field: CoefficientField, xs_tab, tab,
                       shift) -> "PoissonRhs":
        """rhs(x) = c(x) * interp(tab)(x) - shift, for one fast dimension.

        Used for the nested cell problem, whose rhs must be evaluable along
        whole inner trajectories: the inner gradient field is tabulated on
        ``xs_tab`` (spanning the sampled range) instead of re-solved per point.
        """
        xs_tab = np.ascontiguousarray(xs_tab, float)
        tab = np.ascontiguousarray(tab, float)  # (m, k)
        if tab.ndim == 1:
            tab = tab[:, None]
        k = tab.shape[1]
        shift = np.asarray(shift, float).reshape(k)
        cvec = c_field.compile_vector()

        def vec(t, X, Y):
            cv = cvec(t, X, Y)[..., 0, 0]
            xq = np.asarray(X, float)[..., 0]
            cols = [cv * np.interp(xq, xs_tab, tab[:, j]) - shift[j]
                    for j in range(k)]
            return np.stack(cols, axis=-1)

        def factory():
            csc = c_field.compile_scalar()
            sh = shift.copy()
            xs_l, tab_l = xs_tab, tab
            if backend.use_numba():
                import numba

                from .kernels_numba import _interp1

                @numba.njit(cache=False)
                def f(t, x, y, out):
                    cbuf = np.empty(1)
                    csc(t, x, y, cbuf)
                    for j in range(sh.shape[0]):
                        out[j] = cbuf[0] * _interp1(x[0], xs_l, tab_l[:, j]) - sh[j]

                return f

            def f(t, x, y, out):  # pragma: no cover - numpy backend uses vec()
                cbuf = np.empty(1)
                csc(t, x, y, cbuf)
                for j in range(sh.shape[0]):
                    out[j] = cbuf[0] * np.interp(x[0], xs_l, tab_l[:, j]) - sh[j]

            return f

        return cls(f"c*{c_field.name}-table", k, vec, factory)


def as_rhs(g) -> PoissonRhs:
    if isinstance(g, PoissonRhs):
        return g
    if isinstance(g, CoefficientField):
        return PoissonRhs.from_field(g)
    raise ValidationError("rhs must be a PoissonRhs or CoefficientField")


# ---------------------------------------------------------------------------
# ergodic averages

def block_stats(vals: np.ndarray, measure: EmpiricalMeasure):
    """Mean and a chain-block standard error of per-sample values (n, k).

    Samples within a chain are autocorrelated; the iid formula understates
    the error, so the stderr comes from the between-chain (block) variance
    when the measure has several chains.
    """
    vals = np.asarray(vals, float)
    if vals.ndim == 1:
        vals = vals[:, None]
    n = vals.shape[0]
    mean = vals.mean(axis=0)
    block = measure.per_chain if measure is not None else 1
    n_blocks = n // block
    if block > 1 and n_blocks >= 2:
        bm = vals[: n_blocks * block].reshape(n_blocks, block, -1).mean(axis=1)
        se = bm.std(axis=0, ddof=1) / np.sqrt(n_blocks)
    elif n > 1:
        se = vals.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        se = np.zeros_like(mean)
    return mean, se


def ergodic_average(g, measure: EmpiricalMeasure, t: float = 0.0, y=None):
    """Sample mean of g over the measure -> (value (k,), stderr (k,)).

    ``g`` may be a PoissonRhs, a CoefficientField or a vectorized callable
    g(t, X, y) -> (n,) or (n, k).
    """
    y = measure.y_anchor if y is None else np.asarray(y, float)
    X = measure.samples
    if isinstance(g, (PoissonRhs, CoefficientField)):
        vals = as_rhs(g).vector(t, X, y)
    else:
        vals = np.asarray(g(t, X, y), float)
        if vals.ndim == 1:
            vals = vals[:, None]
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise EvaluationError(
            f"{int(bad.any(axis=1).sum())} of {len(X)} ergodic-average "
            "evaluations were non-finite")
    return block_stats(vals, measure)


def center(g, measure: EmpiricalMeasure, t: float = 0.0, y=None):
    """Subtract the ergodic mean: returns (centered rhs, residual, stderr)."""
    rhs = as_rhs(g)
    mean, se = ergodic_average(rhs, measure, t, y)
    return rhs.shifted(mean), mean, se


# ---------------------------------------------------------------------------
# cell problems

@dataclass(frozen=True, eq=False)
class PoissonProblem:
    """L0 u = -rhs at frozen (t_anchor, y_anchor); rhs must be centered."""

    system: MultiscaleSystem
    rhs: PoissonRhs
    y_anchor: np.ndarray
    t_anchor: float = 0.0
    residual: np.ndarray | None = None
    residual_se: np.ndarray | None = None

    def checked(self, measure: EmpiricalMeasure) -> "PoissonProblem":
        res, se = ergodic_average(self.rhs, measure, self.t_anchor, self.y_anchor)
        return replace(self, residual=res, residual_se=se)

    def require_centered(self) -> None:
        if self.residual is None:
            raise CenteringError(
                f"{self.rhs.name}: centering residual never checked "
                "(call .checked(measure) first)")
        tol = np.maximum(CENTERING_TOL, 3.0 * self.residual_se)
        if np.any(np.abs(self.residual) > tol):
            raise CenteringError(
                f"{self.rhs.name}: centering violation |residual|="
                f"{np.max(np.abs(self.residual)):.4g} exceeds "
                f"max({CENTERING_TOL}, 3*stderr)",
                residual=self.residual, stderr=self.residual_se)


def make_problem(system, g, measure: EmpiricalMeasure, t_anchor: float = 0.0,
                 recenter: bool = False) -> PoissonProblem:
    """Convenience: wrap g as a checked PoissonProblem at the measure's anchor."""
    rhs = as_rhs(g)
    if recenter:
        rhs, _, _ = center(rhs, measure, t_anchor)
    prob = PoissonProblem(system=system, rhs=rhs, y_anchor=measure.y_anchor,
                          t_anchor=t_anchor)
    return prob.checked(measure)


@dataclass(frozen=True)
class FkEstimate:
    value: np.ndarray  # (k,)
    stderr: np.ndarray  # (k,)
    n_paths: int
    t_trunc: float


def _fk_noise_rows(seed, row_lo, row_hi, n_steps, d1, dt):
    w1 = np.empty((row_hi - row_lo, n_steps, d1))
    sq = np.sqrt(dt)
    for r in range(row_lo, row_hi):
        w1[r - row_lo] = sq * normal_block(seed, (7, r, STREAM_W1), n_steps, d1)
    return w1


def fk_values_batch(problem: PoissonProblem, starts, n_pairs: int,
                    t_trunc: float, dt: float, seed: int,
                    antithetic: bool = True,
                    bound: float = EXPLOSION_BOUND) -> np.ndarray:
    """Per-start FK integrals -> (Q, n_pairs, k), antithetic pair means.

    Noise is keyed per (start, pair) row, so results are independent of the
    chunking; pairs share a noise row with flipped sign when antithetic.
    """
    sys = problem.system
    starts = np.ascontiguousarray(starts, float).reshape(-1, sys.d1)
    Q = starts.shape[0]
    n_steps = int(round(t_trunc / dt))
    per_row = 2 if antithetic else 1
    rows_chunk = max(1, _FK_ROW_BUDGET // (n_steps * sys.d1))
    out = np.empty((Q * n_pairs, per_row, problem.rhs.k))
    for lo in range(0, Q * n_pairs, rows_chunk):
        hi = min(Q * n_pairs, lo + rows_chunk)
        w1 = _fk_noise_rows(seed, lo, hi, n_steps, sys.d1, dt)
        nrow = hi - lo
        idx = np.repeat(np.arange(nrow), per_row)
        sgn = np.tile([1.0, -1.0][:per_row], nrow)
        xst = np.repeat(starts[(np.arange(lo, hi) // n_pairs)], per_row, axis=0)
        ints, expl = run_fk_chunk(sys, problem.rhs, problem.t_anchor,
                                  problem.y_anchor, dt, xst, w1, idx, sgn, bound)
        if np.any(expl >= 0):
            bad = int(np.nonzero(expl >= 0)[0][0])
            raise ExplosionError(
                f"FK path exploded at step {expl[bad]} from x={xst[bad]}",
                step=int(expl[bad]))
        out[lo:hi] = ints.reshape(nrow, per_row, problem.rhs.k)
    return out.mean(axis=1).reshape(Q, n_pairs, problem.rhs.k)


def fk_gradients_batch(problem: PoissonProblem, starts, n_pairs: int,
                       t_trunc: float, dt: float, seed: int, h=None,
                       antithetic: bool = True,
                       bound: float = EXPLOSION_BOUND) -> np.ndarray:
    """Per-start nabla_x u -> (Q, n_pairs, k, d1) by common-random-number
    central differences (identical noise row for the +h/-h pair)."""
    sys = problem.system
    starts = np.ascontiguousarray(starts, float).reshape(-1, sys.d1)
    Q, d1 = starts.shape
    if h is None:
        h = 1e-3 * (1.0 + np.linalg.norm(starts, axis=1))
    h = np.broadcast_to(np.asarray(h, float), (Q,))
    n_steps = int(round(t_trunc / dt))
    per_row = (2 if antithetic else 1) * 2 * d1
    rows_chunk = max(1, _FK_ROW_BUDGET // (n_steps * sys.d1 * 2))
    k = problem.rhs.k
    out = np.empty((Q * n_pairs, k, d1))
    signs = np.array([1.0, -1.0][: 2 if antithetic else 1])
    for lo in range(0, Q * n_pairs, rows_chunk):
        hi = min(Q * n_pairs, lo + rows_chunk)
        w1 = _fk_noise_rows(seed, lo, hi, n_steps, sys.d1, dt)
        nrow = hi - lo
        qidx = np.arange(lo, hi) // n_pairs
        # path layout per row: dim-major, then +/-h, then antithetic sign
        xst = np.empty((nrow * per_row, d1))
        idx = np.repeat(np.arange(nrow), per_row)
        sgn = np.empty(nrow * per_row)
        p = 0
        for r in range(nrow):
            q = qidx[r]
            for i in range(d1):
                for pm in (1.0, -1.0):
                    xpm = starts[q].copy()
                    xpm[i] += pm * h[q]
                    for s in signs:
                        xst[p] = xpm
                        sgn[p] = s
                        p += 1
        ints, expl = run_fk_chunk(sys, problem.rhs, problem.t_anchor,
                                  problem.y_anchor, dt, xst, w1, idx, sgn, bound)
        if np.any(expl >= 0):
            bad = int(np.nonzero(expl >= 0)[0][0])
            raise ExplosionError(
                f"FK gradient path exploded at step {expl[bad]}",
                step=int(expl[bad]))
        vals = ints.reshape(nrow, d1, 2, len(signs), k).mean(axis=3)
        diff = (vals[:, :, 0, :] - vals[:, :, 1, :])  # (nrow, d1, k)
        out[lo:hi] = np.transpose(
            diff / (2.0 * h[qidx][:, None, None]), (0, 2, 1))
    return out.reshape(Q, n_pairs, k, d1)


def solve_poisson_fk(problem: PoissonProblem, x_query, t_trunc: float = 10.0,
                     n_paths: int = 10_000, seed: int = 0, dt: float = 0.01,
                     antithetic: bool = True,
                     bound: float = EXPLOSION_BOUND) -> FkEstimate:
    """u(x_query) = E int_0^t_trunc rhs(X_s) ds over n_paths frozen paths."""
    if t_trunc < 5.0:
        raise ValidationError("t_trunc must be >= 5 (mixing margin)")
    problem.require_centered()
    n_pairs = max(1, n_paths // (2 if antithetic else 1))
    vals = fk_values_batch(problem, np.asarray(x_query, float), n_pairs,
                           t_trunc, dt, seed, antithetic, bound)[0]
    value = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(n_pairs) if n_pairs > 1 else \
        np.full(problem.rhs.k, np.nan)
    return FkEstimate(value=value, stderr=se,
                      n_paths=n_pairs * (2 if antithetic else 1),
                      t_trunc=t_trunc)


def poisson_gradient(problem: PoissonProblem, x_query, h: float | None = None,
                     t_trunc: float = 10.0, n_paths: int = 10_000,
                     seed: int = 0, dt: float = 0.01, antithetic: bool = True,
                     bound: float = EXPLOSION_BOUND):
    """nabla_x u(x_query) -> (value (k,d1), stderr (k,d1)); CRN differences."""
    if t_trunc < 5.0:
        raise ValidationError("t_trunc must be >= 5 (mixing margin)")
    problem.require_centered()
    n_pairs = max(1, n_paths // (2 if antithetic else 1))
    g = fk_gradients_batch(problem, np.asarray(x_query, float), n_pairs,
                           t_trunc, dt, seed, h, antithetic, bound)[0]
    value = g.mean(axis=0)
    se = g.std(axis=0, ddof=1) / np.sqrt(n_pairs) if n_pairs > 1 else \
        np.full(value.shape, np.nan)
    return value, se


@dataclass(frozen=True)
class PoissonSolution:
    """On-demand evaluator of the cell-problem solution at query points."""

    problem: PoissonProblem
    t_trunc: float = 10.0
    n_paths: int = 10_000
    dt: float = 0.01
    seed: int = 0
    antithetic: bool = True

    def value(self, x) -> FkEstimate:
        return solve_poisson_fk(self.problem, x, self.t_trunc, self.n_paths,
                                self.seed, self.dt, self.antithetic)

    def gradient(self, x, h: float | None = None):
        return poisson_gradient(self.problem, x, h, self.t_trunc, self.n_paths,
                                self.seed, self.dt, self.antithetic)


# ---------------------------------------------------------------------------
# 1-D quadrature oracle

def quadrature_solution_1d(problem: PoissonProblem, domain: float = 8.0,
                           mesh: int = 4000):
    """Deterministic solve of a u'' + b u' = -f on [-R, R] (d1 == 1 only).

    Uses the scale-function/speed-density double integral with zero-flux
    normalization and centering under the analytic invariant density
    proportional to exp(int b/a)/a.  Returns (xs, u, du, density).
    """
    sys = problem.system
    if sys.d1 != 1:
        raise ValidationError("quadrature oracle only supports d1 == 1")
    xs = np.linspace(-domain, domain, mesh + 1)
    X = xs[:, None]
    Y = problem.y_anchor
    bv = sys.b.compile_vector()(0.0, X, Y)[..., 0, 0]
    sv = sys.sigma.compile_vector()(0.0, X, Y)[..., 0, 0]
    av = 0.5 * sv * sv
    if np.any(av <= 0):
        raise ValidationError("oracle needs a strictly elliptic sigma")
    hstep = xs[1] - xs[0]
    logw = np.concatenate([[0.0], np.cumsum(
        0.5 * hstep * (bv[1:] / av[1:] + bv[:-1] / av[:-1]))])
    w = np.exp(logw - logw.max())
    rho = w / av
    z = np.trapezoid(rho, xs)
    density = rho / z
    fv = problem.rhs.vector(problem.t_anchor, X, Y)  # (m+1, k)
    fbar = np.trapezoid(density[:, None] * fv, xs, axis=0)
    fc = fv - fbar  # recenter under the discrete invariant density
    integrand = w[:, None] * fc / av[:, None]
    flux = np.concatenate(
        [np.zeros((1, fv.shape[1])),
         np.cumsum(0.5 * hstep * (integrand[1:] + integrand[:-1]), axis=0)])
    du = -flux / w[:, None]
    u = np.concatenate(
        [np.zeros((1, fv.shape[1])),
         np.cumsum(0.5 * hstep * (du[1:] + du[:-1]), axis=0)])
    u -= np.trapezoid(density[:, None] * u, xs, axis=0)
    return xs, u, du, density


def solve_poisson_quadrature_1d(problem: PoissonProblem, x_query,
                                domain: float = 8.0, mesh: int = 4000) -> np.ndarray:
    """Oracle value u(x_query) -> (k,)."""
    xs, u, _, _ = quadrature_solution_1d(problem, domain, mesh)
    xq = float(np.asarray(x_query, float).reshape(()))
    return np.array([np.interp(xq, xs, u[:, j]) for j in range(u.shape[1])])
