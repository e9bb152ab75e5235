"""Problem definitions, scale-regime classification and rate prediction.

Scale families are pure power laws of the separation parameter: the fast
drift runs at eps^(-2*a_exp), the extra fast drift at eps^(-b_exp), the fast
term of the slow equation at eps^(-g_exp).  Regime membership is then
decidable from exponent comparisons alone; schedules sitting on a boundary
are rejected rather than guessed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundaryUnclassifiableError, EvaluationError, ValidationError
from .fields import CoefficientField
from .rng import philox


@dataclass(frozen=True, eq=False)
class MultiscaleSystem:
    """Coefficient sextuple (b, c, sigma, F, H, G) with dimensions and start."""

    d1: int
    d2: int
    b: CoefficientField
    sigma: CoefficientField
    F: CoefficientField
    G: CoefficientField
    x0: np.ndarray
    y0: np.ndarray
    c: CoefficientField | None = None
    H: CoefficientField | None = None

    def __post_init__(self):
        if self.d1 <= 0 or self.d2 <= 0:
            raise ValidationError("dimensions must be positive")
        object.__setattr__(self, "x0", np.asarray(self.x0, float).reshape(self.d1))
        object.__setattr__(self, "y0", np.asarray(self.y0, float).reshape(self.d2))
        expect = {
            "b": (self.b, (self.d1, 1)),
            "sigma": (self.sigma, (self.d1, self.d1)),
            "F": (self.F, (self.d2, 1)),
            "G": (self.G, (self.d2, self.d2)),
        }
        if self.c is not None:
            expect["c"] = (self.c, (self.d1, 1))
        if self.H is not None:
            expect["H"] = (self.H, (self.d2, 1))
        for name, (fld, shape) in expect.items():
            if fld.shape != shape:
                raise ValidationError(
                    f"{name}: expected shape {shape}, got {fld.shape}")
            fld.validate(self.d1, self.d2)

    @property
    def has_c(self) -> bool:
        return self.c is not None

    @property
    def has_h(self) -> bool:
        return self.H is not None


_SIG = {
    "b": ("x", "y"),
    "c": ("x", "y"),
    "sigma": ("x", "y"),
    "F": ("t", "x", "y"),
    "H": ("t", "x", "y"),
    "G": ("t", "y"),
}


def make_system(d1, d2, b, sigma, F, G, x0, y0, c=None, H=None) -> MultiscaleSystem:
    """Assemble a system from expression strings, enforcing the per-field
    argument signatures (fast coefficients time-independent, G x-free)."""

    def fld(name, rows):
        return CoefficientField.from_strings(name, rows, _SIG[name])

    return MultiscaleSystem(
        d1=d1, d2=d2,
        b=fld("b", b), sigma=fld("sigma", sigma), F=fld("F", F), G=fld("G", G),
        x0=np.asarray(x0, float), y0=np.asarray(y0, float),
        c=None if c is None else fld("c", c),
        H=None if H is None else fld("H", H),
    )


@dataclass(frozen=True)
class ScaleSchedule:
    """Power-law exponents: alpha = eps^a_exp, beta = eps^b_exp, gamma = eps^g_exp."""

    a_exp: float
    b_exp: float = 0.0
    g_exp: float = 0.0

    def __post_init__(self):
        if self.a_exp <= 0:
            raise ValidationError("a_exp must be positive")
        if self.b_exp < 0 or self.g_exp < 0:
            raise ValidationError("b_exp and g_exp must be nonnegative")

    def validate(self, has_c: bool, has_h: bool) -> None:
        """Cross-field invariants (standing assumption plus presence rules)."""
        if not (2.0 * self.a_exp > self.b_exp):
            raise ValidationError(
                "standing assumption violated: needs 2*a_exp > b_exp "
                "(alpha^2/beta must vanish)")
        if not has_c and self.b_exp != 0.0:
            raise ValidationError("b_exp must be 0 when c is absent (beta == 1)")
        if not has_h and self.g_exp != 0.0:
            raise ValidationError("g_exp must be 0 when H is absent (gamma == 1)")

    def scales(self, eps: float) -> tuple[float, float, float]:
        return (eps ** self.a_exp, eps ** self.b_exp, eps ** self.g_exp)


class Regime(enum.Enum):
    REGIME1 = "Regime1"
    REGIME2 = "Regime2"
    NO_HOMOGENIZATION = "NoHomogenization"
    UNCLASSIFIED = "Unclassified"


class DevTag(enum.Enum):
    R0_1 = "R0_1"
    R0_2 = "R0_2"
    R0_3 = "R0_3"
    R1_1 = "R1_1"
    R1_2 = "R1_2"
    R1_3 = "R1_3"
    R2_1 = "R2_1"
    R2_2 = "R2_2"
    R2_3 = "R2_3"


@dataclass(frozen=True)
class DeviationRegime:
    tag: DevTag
    eta_exp: float


@dataclass(frozen=True)
class RateModel:
    """Regularity/moment knobs of the rate formulas.

    ``theta`` is the Hoelder index in the slow variable; ``delta`` (fast
    variable) is recorded but never enters a rate.  ``q`` is the moment order
    of the strong error.
    """

    theta: float = 1.0
    delta: float = 1.0
    q: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.theta <= 1.0) or not (0.0 < self.delta <= 1.0):
            raise ValidationError("theta and delta must lie in (0, 1]")
        if self.q < 1.0:
            raise ValidationError("q must be >= 1")


def classify_averaging_regime(schedule: ScaleSchedule, h_present: bool) -> Regime:
    """Total classification of the law-of-large-numbers regime."""
    if not h_present:
        return Regime.NO_HOMOGENIZATION
    a, b, g = schedule.a_exp, schedule.b_exp, schedule.g_exp
    if a <= g:
        return Regime.UNCLASSIFIED
    if 2.0 * a > b + g:
        return Regime.REGIME1
    if 2.0 * a == b + g:
        return Regime.REGIME2
    return Regime.UNCLASSIFIED


def classify_deviation_regime(schedule: ScaleSchedule, regime: Regime) -> DeviationRegime:
    """Pick the deviation scale eta = eps^eta_exp and its sub-regime tag.

    Raises BoundaryUnclassifiableError when the schedule does not actually
    satisfy the defining conditions of ``regime`` (e.g. a Regime-2 shape with
    2a != b + g).
    """
    a, b, g = schedule.a_exp, schedule.b_exp, schedule.g_exp
    if regime is Regime.NO_HOMOGENIZATION:
        if g != 0.0:
            raise BoundaryUnclassifiableError(
                "boundary-unclassifiable: gamma must be 1 without H")
        if b > a:
            return DeviationRegime(DevTag.R0_1, 2.0 * a - b)
        if a > b:
            return DeviationRegime(DevTag.R0_2, a)
        return DeviationRegime(DevTag.R0_3, a)
    if regime is Regime.REGIME1:
        if classify_averaging_regime(schedule, True) is not Regime.REGIME1:
            raise BoundaryUnclassifiableError(
                "boundary-unclassifiable: schedule is not in Regime 1")
        if b > a:
            return DeviationRegime(DevTag.R1_1, 2.0 * a - b - g)
        if a > b:
            return DeviationRegime(DevTag.R1_2, a - g)
        return DeviationRegime(DevTag.R1_3, a - g)
    if regime is Regime.REGIME2:
        if classify_averaging_regime(schedule, True) is not Regime.REGIME2:
            raise BoundaryUnclassifiableError(
                "boundary-unclassifiable: schedule is not in Regime 2 (2a != b+g)")
        if b > a + g:
            return DeviationRegime(DevTag.R2_1, 2.0 * a - b)
        if b < a + g:
            return DeviationRegime(DevTag.R2_2, a - g)
        return DeviationRegime(DevTag.R2_3, a - g)
    raise BoundaryUnclassifiableError(
        "boundary-unclassifiable: averaging regime is Unclassified")


def predicted_strong_rate(schedule: ScaleSchedule, regime: Regime,
                          rates: RateModel) -> float:
    """eps-exponent of the pathwise averaging error (per unit moment order)."""
    a, b, g = schedule.a_exp, schedule.b_exp, schedule.g_exp
    th = min(rates.theta, 1.0)
    if regime in (Regime.REGIME1, Regime.NO_HOMOGENIZATION):
        return min(a * th - g, 2.0 * a - b - g)
    if regime is Regime.REGIME2:
        return min(a * th - g, 2.0 * a - b)
    raise ValidationError("no strong rate for an Unclassified regime")


_WEAK_RATE = {
    DevTag.R0_1: lambda a, b, g, th: min(2 * b - 2 * a, th * (2 * a - b)),
    DevTag.R0_2: lambda a, b, g, th: min(a - b, th * a),
    DevTag.R0_3: lambda a, b, g, th: th * a,
    DevTag.R1_1: lambda a, b, g, th: min(g, 2 * b - 2 * a, th * (2 * a - b - g)),
    DevTag.R1_2: lambda a, b, g, th: min(g, a - b, th * (a - g)),
    DevTag.R1_3: lambda a, b, g, th: min(g, th * (a - g)),
    DevTag.R2_1: lambda a, b, g, th: min(2 * b - 2 * a - 2 * g, th * (2 * a - b)),
    DevTag.R2_2: lambda a, b, g, th: min(a + g - b, th * (a - g)),
    DevTag.R2_3: lambda a, b, g, th: th * (a - g),
}


def predicted_weak_rate(schedule: ScaleSchedule, dev: DeviationRegime,
                        rates: RateModel) -> float:
    """eps-exponent of the deviation-limit (CLT) weak error."""
    return _WEAK_RATE[dev.tag](schedule.a_exp, schedule.b_exp, schedule.g_exp,
                               min(rates.theta, 1.0))


# ---------------------------------------------------------------------------
# numerical audit of the structural assumptions

@dataclass(frozen=True)
class SampleSpec:
    """Sampling plan for verify_assumptions (deterministic given seed)."""

    n_points: int = 200
    radii: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)
    x_box: float = 3.0
    y_box: float = 2.0
    t_values: tuple[float, ...] = (0.0,)
    n_y_anchors: int = 2
    seed: int = 321
    # ergodic sampling for the centering residuals
    n_samples: int = 8000
    burn_in: float = 10.0
    thinning: float = 1.5
    dt: float = 0.01


@dataclass
class AssumptionReport:
    lambda_est: float
    recurrence_trend: list[tuple[float, float]]
    recurrence_ok: bool
    centering_residuals: dict[tuple[float, tuple[float, ...]], float]
    growth_exponent_est: float

    def rows(self):
        yield ("lambda_est", "", self.lambda_est)
        for r, s in self.recurrence_trend:
            yield ("recurrence_sup_xb", f"radius={r:g}", s)
        yield ("recurrence_ok", "", float(self.recurrence_ok))
        for (t, y), v in self.centering_residuals.items():
            ytxt = ",".join(f"{yi:.6g}" for yi in y)
            yield ("centering_residual", f"t={t:g};y={ytxt}", v)
        yield ("growth_exponent_est", "", self.growth_exponent_est)


def _check_finite(name, arr, pt):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{name} evaluated non-finite", where=f"point={pt}")


def verify_assumptions(system: MultiscaleSystem, spec: SampleSpec | None = None) -> AssumptionReport:
    """Sample-based audit: ellipticity bound, drift recurrence trend, centering
    of H, and an empirical polynomial-growth exponent.  Descriptive only."""
    spec = spec or SampleSpec()
    g = philox(spec.seed, 101)
    xs = g.uniform(-spec.x_box, spec.x_box, size=(spec.n_points, system.d1))
    ys = g.uniform(-spec.y_box, spec.y_box, size=(spec.n_points, system.d2))

    sig = system.sigma.compile_vector()(0.0, xs, ys)
    _check_finite("sigma", sig, (xs[0], ys[0]))
    a = 0.5 * np.einsum("nij,nkj->nik", sig, sig)
    ev = np.linalg.eigvalsh(a)
    lam = float("inf") if ev.min() <= 0.0 else float(max(ev.max(), 1.0 / ev.min()))

    bv = system.b.compile_vector()
    trend = []
    for r in spec.radii:
        dirs = g.normal(size=(spec.n_points, system.d1))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        xr = r * dirs
        yr = g.uniform(-spec.y_box, spec.y_box, size=(spec.n_points, system.d2))
        bvals = bv(0.0, xr, yr)[..., 0]
        _check_finite("b", bvals, (xr[0], yr[0]))
        trend.append((float(r), float(np.max(np.sum(xr * bvals, axis=1)))))
    sups = [s for _, s in trend]
    recurrence_ok = all(s2 < s1 for s1, s2 in zip(sups, sups[1:])) and sups[-1] < 0.0

    residuals: dict = {}
    if system.has_h:
        from .ergodics import ergodic_average, sample_invariant

        anchors = g.uniform(-spec.y_box, spec.y_box,
                            size=(spec.n_y_anchors, system.d2))
        hv = system.H.compile_vector()
        for t in spec.t_values:
            for yrow in anchors:
                measure = sample_invariant(
                    system, yrow, burn_in=spec.burn_in, n=spec.n_samples,
                    thinning=spec.thinning, seed=spec.seed, dt=spec.dt)
                val, _ = ergodic_average(
                    lambda tt, X, yy: hv(tt, X, np.tile(yy, (len(X), 1)))[..., 0],
                    measure, t, yrow)
                residuals[(float(t), tuple(float(v) for v in yrow))] = float(
                    np.max(np.abs(val)))

    growth = _growth_exponent(system, spec, g)
    return AssumptionReport(
        lambda_est=lam,
        recurrence_trend=trend,
        recurrence_ok=recurrence_ok,
        centering_residuals=residuals,
        growth_exponent_est=growth,
    )


def _growth_exponent(system, spec, g) -> float:
    """Max log-log slope of sup|coeff| over the polynomial-growth coefficients."""
    fields = [system.F]
    if system.has_h:
        fields.append(system.H)
    if system.has_c:
        fields.append(system.c)
    slopes = [0.0]
    radii = np.asarray(spec.radii[-3:], float)
    for fld in fields:
        fv = fld.compile_vector()
        sups = []
        for r in radii:
            dirs = g.normal(size=(spec.n_points, system.d1))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            xr = r * dirs
            yr = g.uniform(-spec.y_box, spec.y_box, size=(spec.n_points, system.d2))
            vals = fv(0.0, xr, yr)
            sups.append(np.max(np.abs(vals)) + 1e-12)
        lr, ls = np.log(radii), np.log(sups)
        slopes.append(float(np.polyfit(lr, ls, 1)[0]))
    return max(slopes)
