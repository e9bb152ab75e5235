"""Monte Carlo harness: error curves, fitted rates, CLT comparisons and the
fluctuation-scaling diagnostic.

Seeds: replica r of the eps_index-th grid point draws stream s from
``(master_seed, 901, eps_index, r, s)``, so every curve is a pure function of
the config and reruns are bit-identical.  Replicas are processed in chunks
whose size never affects results; per-replica statistics are stored by index
and reduced in ascending order.

The sup over time in the error definitions is approximated by a max over
evenly spaced checkpoints (default 16).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (run_averaged_chunk, run_fluct_chunk, run_fused_limit_chunk,
                     run_multiscale_chunk)
from .errors import FitError, NumericalError, ValidationError
from .ergodics import as_rhs, center, sample_invariant
from .expr import parse_expression
from .fields import compile_functional
from .model import (DeviationRegime, MultiscaleSystem, RateModel, Regime,
                    ScaleSchedule, classify_averaging_regime,
                    predicted_strong_rate, predicted_weak_rate)
from .rng import STREAM_W1, STREAM_W2, STREAM_WTILDE, normal_block

_KEY_EXP = 901  # key namespace for experiment path noise


@dataclass(frozen=True)
class ExperimentConfig:
    eps_list: tuple[float, ...]
    n_mc: int
    T: float = 1.0
    dt_fraction: float = 0.05  # dt = fraction * alpha_eps^2
    q: float = 2.0
    master_seed: int = 0
    functionals: tuple[str, ...] = ("cos(z1)", "1/(1+z1^2)", "tanh(z1)")
    n_checkpoints: int = 16
    explosion_bound: float = 1.0e6
    exploded_cap: float = 0.05
    chunk: int = 256

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        if not eps or any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ValidationError("eps_list must be strictly decreasing")
        if any(not (0.0 < e < 1.0) for e in eps):
            raise ValidationError("eps values must lie in (0, 1)")
        if self.n_mc < 1:
            raise ValidationError("n_mc must be >= 1")
        if not (0.0 < self.dt_fraction <= 0.05):
            raise ValidationError(
                "dt_fraction must be in (0, 0.05] (stiffness precondition)")
        object.__setattr__(self, "eps_list", eps)


@dataclass
class ErrorCurve:
    eps: np.ndarray
    error: np.ndarray
    stderr: np.ndarray
    exploded_fraction: np.ndarray
    meta: dict = field(default_factory=dict)

    def rows(self):
        for i in range(self.eps.size):
            yield (self.eps[i], self.error[i], self.stderr[i],
                   self.exploded_fraction[i])


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    slope_stderr: float


def fit_rate(curve: ErrorCurve) -> FitResult:
    """Unit-weight OLS of log2(error) on log2(eps)."""
    eps = np.asarray(curve.eps, float)
    err = np.asarray(curve.error, float)
    if eps.size < 3:
        raise FitError(f"need >= 3 points to fit a rate, got {eps.size}")
    if np.any(err <= 0.0):
        raise FitError("nonpositive error values cannot be log-fitted")
    x = np.log2(eps)
    z = np.log2(err)
    slope, intercept = np.polyfit(x, z, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((z - pred) ** 2))
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(eps.size - 2, 1)
    sxx = float(np.sum((x - x.mean()) ** 2))
    slope_se = float(np.sqrt(ss_res / dof / sxx)) if sxx > 0 else float("inf")
    return FitResult(float(slope), float(intercept), r2, slope_se)


# ---------------------------------------------------------------------------
# grid plumbing

def grid_for(schedule: ScaleSchedule, eps: float, cfg: ExperimentConfig):
    alpha = eps ** schedule.a_exp
    dt0 = cfg.dt_fraction * alpha * alpha
    n_steps = max(1, int(np.ceil(cfg.T / dt0 - 1e-9)))
    return cfg.T / n_steps, n_steps


def checkpoints(n_steps: int, k: int) -> np.ndarray:
    idx = np.unique(np.round(np.linspace(0, n_steps, k + 1)).astype(np.int64))
    return idx[idx > 0]


def _noise(cfg, eps_idx, r, stream, n_steps, dim, dt):
    return np.sqrt(dt) * normal_block(
        cfg.master_seed, (_KEY_EXP, eps_idx, r, stream), n_steps, dim)


def _cap_exploded(n_bad: int, n_mc: int, cap: float, what: str) -> float:
    frac = n_bad / n_mc
    if frac > cap:
        raise NumericalError(
            f"{what}: exploded fraction {frac:.1%} exceeds the {cap:.0%} cap")
    return frac


# ---------------------------------------------------------------------------
# strong error (pathwise averaging rate)

def strong_error(system: MultiscaleSystem, schedule: ScaleSchedule,
                 cfg: ExperimentConfig, fbar, k: int = 1) -> ErrorCurve:
    """Max over checkpoints of the replica-average |Y_eps - Ybar|^q under
    shared w2 (same-noise coupling)."""
    regime = classify_averaging_regime(schedule, system.has_h)
    if regime is Regime.UNCLASSIFIED:
        raise ValidationError("schedule is outside both averaging regimes")
    errs, ses, fracs = [], [], []
    for e_idx, eps in enumerate(cfg.eps_list):
        dt, n_steps = grid_for(schedule, eps, cfg)
        save = checkpoints(n_steps, cfg.n_checkpoints)
        vals = np.full((cfg.n_mc, save.size), np.nan)
        alive = np.zeros(cfg.n_mc, bool)
        for lo in range(0, cfg.n_mc, cfg.chunk):
            hi = min(cfg.n_mc, lo + cfg.chunk)
            w1 = np.stack([_noise(cfg, e_idx, r, STREAM_W1, n_steps, system.d1, dt)
                           for r in range(lo, hi)])
            w2 = np.stack([_noise(cfg, e_idx, r, STREAM_W2, n_steps, system.d2, dt)
                           for r in range(lo, hi)])
            _, ys, ex1 = run_multiscale_chunk(
                system, schedule, eps, 0.0, dt, n_steps, save, w1, w2,
                cfg.explosion_bound)
            ybars, ex2 = run_averaged_chunk(
                fbar, system.G, system.y0, 0.0, dt, n_steps, save, w2,
                cfg.explosion_bound)
            ok = (ex1 < 0) & (ex2 < 0)
            alive[lo:hi] = ok
            diff = np.linalg.norm(ys - ybars, axis=2) ** cfg.q
            vals[lo:hi] = np.where(ok[:, None], diff, np.nan)
        frac = _cap_exploded(int((~alive).sum()), cfg.n_mc, cfg.exploded_cap,
                             f"strong_error eps={eps:g}")
        good = vals[alive]
        per_cp = good.mean(axis=0)
        s = int(np.argmax(per_cp))
        errs.append(per_cp[s])
        ses.append(good[:, s].std(ddof=1) / np.sqrt(good.shape[0]))
        fracs.append(frac)
    return ErrorCurve(np.array(cfg.eps_list), np.array(errs), np.array(ses),
                      np.array(fracs),
                      meta={"claim": "strong", "tag": regime.value, "q": cfg.q,
                            "predicted_exponent": cfg.q * predicted_strong_rate(
                                schedule, regime, RateModel(q=cfg.q))})


# ---------------------------------------------------------------------------
# weak (CLT) error and distribution comparison

def _phis(cfg: ExperimentConfig, d2: int):
    return [(s, compile_functional(parse_expression(s), d2))
            for s in cfg.functionals]


def _deviation_batches(system, schedule, dev, cfg, fbar, limit_spec, eps,
                       e_idx, save):
    """Z_eps and Z_bar at the save indices for every replica (d2 == 1)."""
    if system.d2 != 1:
        raise ValidationError("deviation experiments support d2 == 1 only")
    if limit_spec.tables is None:
        raise ValidationError("limit_spec lacks scalar lattice tables")
    dt, n_steps = grid_for(schedule, eps, cfg)
    eta = eps ** dev.eta_exp
    tabs = (limit_spec.tables["ys"], limit_spec.tables["fbar"],
            limit_spec.tables["grad_fbar"], limit_spec.tables["drift_extra"],
            limit_spec.tables["sigma_extra"])
    from .homogenize import grad_g_scalar_field

    dg_field = grad_g_scalar_field(system)
    z_eps = np.full((cfg.n_mc, save.size), np.nan)
    z_bar = np.full((cfg.n_mc, save.size), np.nan)
    alive = np.zeros(cfg.n_mc, bool)
    for lo in range(0, cfg.n_mc, cfg.chunk):
        hi = min(cfg.n_mc, lo + cfg.chunk)
        w1 = np.stack([_noise(cfg, e_idx, r, STREAM_W1, n_steps, system.d1, dt)
                       for r in range(lo, hi)])
        w2 = np.stack([_noise(cfg, e_idx, r, STREAM_W2, n_steps, system.d2, dt)
                       for r in range(lo, hi)])
        wt = np.stack([_noise(cfg, e_idx, r, STREAM_WTILDE, n_steps, 1, dt)
                       for r in range(lo, hi)])
        _, ys, ex1 = run_multiscale_chunk(
            system, schedule, eps, 0.0, dt, n_steps, save, w1, w2,
            cfg.explosion_bound)
        ybars, ex2 = run_averaged_chunk(
            fbar, system.G, system.y0, 0.0, dt, n_steps, save, w2,
            cfg.explosion_bound)
        _, zbars, ex3 = run_fused_limit_chunk(
            tabs, system.G, dg_field, system.y0, 0.0, dt, n_steps, save, w2,
            wt, cfg.explosion_bound)
        ok = (ex1 < 0) & (ex2 < 0) & (ex3 < 0)
        alive[lo:hi] = ok
        z_eps[lo:hi] = np.where(ok[:, None],
                                (ys[:, :, 0] - ybars[:, :, 0]) / eta, np.nan)
        z_bar[lo:hi] = np.where(ok[:, None], zbars, np.nan)
    return z_eps, z_bar, alive


def weak_error(system: MultiscaleSystem, schedule: ScaleSchedule,
               dev: DeviationRegime, cfg: ExperimentConfig, fbar,
               limit_spec) -> ErrorCurve:
    """Max over checkpoints and smooth functionals of
    |mean phi(Z_eps) - mean phi(Z_bar)|, with the limit coupled through the
    shared w2 family; stderr of the paired difference."""
    phis = _phis(cfg, system.d2)
    errs, ses, fracs = [], [], []
    for e_idx, eps in enumerate(cfg.eps_list):
        _, n_steps = grid_for(schedule, eps, cfg)
        save = checkpoints(n_steps, cfg.n_checkpoints)
        z_eps, z_bar, alive = _deviation_batches(
            system, schedule, dev, cfg, fbar, limit_spec, eps, e_idx, save)
        frac = _cap_exploded(int((~alive).sum()), cfg.n_mc, cfg.exploded_cap,
                             f"weak_error eps={eps:g}")
        ze = z_eps[alive][..., None]
        zb = z_bar[alive][..., None]
        n_alive = ze.shape[0]
        best_err, best_se = -1.0, np.nan
        for _, phi in phis:
            d = phi(ze) - phi(zb)  # (n_alive, n_save)
            dm = np.abs(d.mean(axis=0))
            s = int(np.argmax(dm))
            if dm[s] > best_err:
                best_err = float(dm[s])
                best_se = float(d[:, s].std(ddof=1) / np.sqrt(n_alive))
        errs.append(best_err)
        ses.append(best_se)
        fracs.append(frac)
    return ErrorCurve(np.array(cfg.eps_list), np.array(errs), np.array(ses),
                      np.array(fracs),
                      meta={"claim": "weak", "tag": dev.tag.value, "q": cfg.q,
                            "predicted_exponent": predicted_weak_rate(
                                schedule, dev, RateModel())})


def clt_compare(system: MultiscaleSystem, schedule: ScaleSchedule,
                dev: DeviationRegime, eps: float, cfg: ExperimentConfig,
                fbar, limit_spec, statistics=("mean", "variance", "charfn"),
                char_nodes=(1.0,)):
    """Distribution comparison of Z_eps_T against the simulated limit Z_bar_T.

    Returns (rows, z_eps_T, z_bar_T); each row is (statistic, value_eps,
    se_eps, value_lim, se_lim, z_score).
    """
    sub = ExperimentConfig(eps_list=(eps,), n_mc=cfg.n_mc, T=cfg.T,
                           dt_fraction=cfg.dt_fraction, q=cfg.q,
                           master_seed=cfg.master_seed,
                           functionals=cfg.functionals,
                           n_checkpoints=cfg.n_checkpoints,
                           explosion_bound=cfg.explosion_bound,
                           exploded_cap=cfg.exploded_cap, chunk=cfg.chunk)
    _, n_steps = grid_for(schedule, eps, sub)
    save = np.array([n_steps], np.int64)
    z_eps, z_bar, alive = _deviation_batches(
        system, schedule, dev, sub, fbar, limit_spec, eps, 0, save)
    _cap_exploded(int((~alive).sum()), cfg.n_mc, cfg.exploded_cap,
                  f"clt_compare eps={eps:g}")
    ze = z_eps[alive][:, 0]
    zb = z_bar[alive][:, 0]
    rows = []

    def moments(x):
        n = x.size
        mean = x.mean()
        se_mean = x.std(ddof=1) / np.sqrt(n)
        v = x.var(ddof=1)
        m4 = np.mean((x - mean) ** 4)
        se_var = np.sqrt(max(m4 - (n - 3) / (n - 1) * v * v, 0.0) / n)
        return mean, se_mean, v, se_var

    me, sme, ve, sve = moments(ze)
    mb, smb, vb, svb = moments(zb)
    if "mean" in statistics:
        z = (me - mb) / np.hypot(sme, smb)
        rows.append(("mean", me, sme, mb, smb, z))
    if "variance" in statistics:
        z = (ve - vb) / np.hypot(sve, svb)
        rows.append(("variance", ve, sve, vb, svb, z))
    if "charfn" in statistics:
        for u in char_nodes:
            ce, cb = np.exp(1j * u * ze), np.exp(1j * u * zb)
            de = np.abs(ce.mean() - cb.mean())
            se = np.sqrt((np.var(ce.real, ddof=1) + np.var(ce.imag, ddof=1))
                         / ze.size
                         + (np.var(cb.real, ddof=1) + np.var(cb.imag, ddof=1))
                         / zb.size)
            rows.append((f"charfn_u={u:g}", np.abs(ce.mean()), se,
                         np.abs(cb.mean()), se, de / se))
    return rows, ze, zb


# ---------------------------------------------------------------------------
# fluctuation-scaling diagnostic

def fluctuation_scaling(system: MultiscaleSystem, schedule: ScaleSchedule,
                        f_field, cfg: ExperimentConfig, rates: RateModel,
                        check_y_offsets=(0.0, 1.0, -1.0),
                        check_n: int = 4000) -> tuple[ErrorCurve, FitResult]:
    """Replica-average of |int_0^T f(s, X, Y) ds|^q against the predicted
    exponent q*min(a*min(theta,1), 2a - b); f must be centered."""
    rhs = as_rhs(f_field)
    for off in check_y_offsets:
        m = sample_invariant(system, system.y0 + off, burn_in=10.0, n=check_n,
                             thinning=1.0, seed=cfg.master_seed + 77)
        _, res, se = center(rhs, m, 0.0)
        from .ergodics import CENTERING_TOL
        from .errors import CenteringError

        tol = np.maximum(CENTERING_TOL, 3.0 * se)
        if np.any(np.abs(res) > tol):
            raise CenteringError(
                f"fluctuation integrand not centered at y offset {off:+g}: "
                f"|residual|={np.max(np.abs(res)):.4g}",
                residual=res, stderr=se)
    errs, ses, fracs = [], [], []
    for e_idx, eps in enumerate(cfg.eps_list):
        dt, n_steps = grid_for(schedule, eps, cfg)
        ints = np.full((cfg.n_mc, rhs.k), np.nan)
        alive = np.zeros(cfg.n_mc, bool)
        for lo in range(0, cfg.n_mc, cfg.chunk):
            hi = min(cfg.n_mc, lo + cfg.chunk)
            w1 = np.stack([_noise(cfg, e_idx, r, STREAM_W1, n_steps, system.d1, dt)
                           for r in range(lo, hi)])
            w2 = np.stack([_noise(cfg, e_idx, r, STREAM_W2, n_steps, system.d2, dt)
                           for r in range(lo, hi)])
            out, ex = run_fluct_chunk(system, schedule, eps, rhs, 0.0, dt,
                                      n_steps, w1, w2, cfg.explosion_bound)
            ok = ex < 0
            alive[lo:hi] = ok
            ints[lo:hi] = np.where(ok[:, None], out, np.nan)
        frac = _cap_exploded(int((~alive).sum()), cfg.n_mc, cfg.exploded_cap,
                             f"fluctuation_scaling eps={eps:g}")
        good = np.linalg.norm(ints[alive], axis=1) ** cfg.q
        errs.append(good.mean())
        ses.append(good.std(ddof=1) / np.sqrt(good.size))
        fracs.append(frac)
    a, b = schedule.a_exp, schedule.b_exp
    predicted = cfg.q * min(a * min(rates.theta, 1.0), 2.0 * a - b)
    curve = ErrorCurve(np.array(cfg.eps_list), np.array(errs), np.array(ses),
                       np.array(fracs),
                       meta={"claim": "fluct",
                             "tag": classify_averaging_regime(
                                 schedule, system.has_h).value,
                             "q": cfg.q, "predicted_exponent": predicted})
    return curve, fit_rate(curve)
