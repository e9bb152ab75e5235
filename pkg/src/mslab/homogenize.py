"""Effective/limit coefficients from ergodic averages and cell problems.

Point estimators (``averaged_drift``, ``effective_zeta``, ``cross_average``)
work at a single (t, y).  ``estimate_effective_lattice`` sweeps a lattice of
y values (scalar slow dimension) and wraps the tables as interpolating
callables; ``build_limit_spec`` then assembles the deviation-limit SDE for a
given sub-regime tag.

Square roots of estimated quadratic variations are taken symmetrize ->
eigen-clamp -> principal root; any PSD root gives the same limit law.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .expr import differentiate
from .fields import CoefficientField
from .lattice import LatticeField1D
from .model import DeviationRegime, DevTag, MultiscaleSystem
from .ergodics import (EmpiricalMeasure, PoissonProblem, PoissonRhs, as_rhs,
                       block_stats, ergodic_average, fk_gradients_batch,
                       fk_values_batch, sample_invariant)
from .rng import subseed


@dataclass(frozen=True)
class EstimationParams:
    """Monte Carlo budget for the effective-coefficient estimators."""

    n_invariant: int = 5000  # samples entering FK-based averages
    n_fbar: int | None = None  # larger budget for plain ergodic averages
    burn_in: float = 10.0
    thinning: float = 1.0
    samp_dt: float = 0.01
    n_chains: int | None = None
    fk_pairs: int = 2  # antithetic pairs per invariant sample
    t_trunc: float = 10.0
    fk_dt: float = 0.01
    grad_h_scale: float = 1e-3  # h = scale * (1 + |x|)
    nested_tab_nodes: int = 129
    nested_tab_pad: float = 0.5
    nested_tab_pairs: int = 64
    grad_y_h: float = 1e-3


def measure_for(system: MultiscaleSystem, y, params: EstimationParams,
                seed: int) -> EmpiricalMeasure:
    n = max(params.n_invariant, params.n_fbar or 0)
    return sample_invariant(system, y, burn_in=params.burn_in, n=n,
                            thinning=params.thinning, seed=seed,
                            dt=params.samp_dt, n_chains=params.n_chains)


def _fk_subset(measure: EmpiricalMeasure, params: EstimationParams) -> np.ndarray:
    return measure.samples[: params.n_invariant]


def _grad_h(starts: np.ndarray, params: EstimationParams) -> np.ndarray:
    return params.grad_h_scale * (1.0 + np.linalg.norm(starts, axis=1))


def matrix_sqrt_psd(m: np.ndarray, clamp_frac: float = 0.10,
                    label: str = "matrix"):
    """Principal PSD square root after symmetrizing and clamping.

    Raises NumericalError when the clamped negative mass exceeds
    ``clamp_frac`` of the trace (estimation noise budget exceeded).
    """
    m = np.atleast_2d(np.asarray(m, float))
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    clamped = float(-w[w < 0].sum())
    trace = float(np.trace(sym))
    if clamped > clamp_frac * max(trace, 0.0) + 1e-12:
        raise NumericalError(
            f"{label}: clamped eigenvalue mass {clamped:.4g} exceeds "
            f"{clamp_frac:.0%} of trace {trace:.4g}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    report = {"clamped_mass": clamped, "trace": trace,
              "antisym_residual": float(np.max(np.abs(m - m.T)) / 2.0)}
    return root, report


# ---------------------------------------------------------------------------
# point estimators

def averaged_drift(system: MultiscaleSystem, k: int, t: float, y,
                   measure: EmpiricalMeasure, params: EstimationParams,
                   seed: int = 0):
    """Fbar_k(t, y) -> (value (d2,), stderr (d2,)).

    k=1 averages F; k=2 averages F + c . grad_x Phi with Phi the cell solution
    for rhs H (requires c and H present).
    """
    if k == 1:
        return ergodic_average(system.F, measure, t, y)
    if k != 2:
        raise ValidationError("k must be 1 or 2")
    if not (system.has_c and system.has_h):
        raise ValidationError("Fbar_2 requires both c and H present")
    starts = _fk_subset(measure, params)
    prob = PoissonProblem(system, as_rhs(system.H), measure.y_anchor, t).checked(measure)
    prob.require_centered()
    grads = fk_gradients_batch(prob, starts, params.fk_pairs, params.t_trunc,
                               params.fk_dt, subseed(seed, 26),
                               h=_grad_h(starts, params)).mean(axis=1)
    cvals = system.c.compile_vector()(t, starts, measure.y_anchor)[..., 0]
    fvals = as_rhs(system.F).vector(t, starts, y)
    per = fvals + np.einsum("nki,ni->nk", grads, cvals)
    return block_stats(per, measure)


def effective_zeta(system: MultiscaleSystem, t: float, y,
                   measure: EmpiricalMeasure, params: EstimationParams,
                   seed: int = 0):
    """CLT diffusion: principal root of the symmetrized average of
    (F - Fbar_1) outer Upsilon; returns (zeta, M, se_M, report)."""
    fbar1, _ = ergodic_average(system.F, measure, t)
    rhs = as_rhs(system.F).shifted(fbar1)
    prob = PoissonProblem(system, rhs, measure.y_anchor, t).checked(measure)
    prob.require_centered()
    starts = _fk_subset(measure, params)
    ups = fk_values_batch(prob, starts, params.fk_pairs, params.t_trunc,
                          params.fk_dt, subseed(seed, 24)).mean(axis=1)
    ftil = rhs.vector(t, starts, measure.y_anchor)
    prods = np.einsum("ni,nj->nij", ftil, ups)
    flat_mean, flat_se = block_stats(prods.reshape(len(prods), -1), measure)
    m = flat_mean.reshape(ftil.shape[1], ftil.shape[1])
    se = flat_se.reshape(m.shape)
    root, report = matrix_sqrt_psd(m, 0.10, "zeta")
    return root, m, se, report


_CROSS_KINDS = ("c_grad_upsilon", "c_grad_phi", "h_phi", "c_grad_psi")


def cross_average(kind: str, system: MultiscaleSystem, t: float, y,
                  measure: EmpiricalMeasure, params: EstimationParams,
                  seed: int = 0):
    """The limit-equation cross terms -> (value, stderr, aux info).

    Vector kinds return (d2,); ``h_phi`` returns the (d2, d2) matrix.  The
    nested kind tabulates the inner gradient on an x-grid spanning the
    sampled range (one fast dimension only).
    """
    if kind not in _CROSS_KINDS:
        raise ValidationError(f"unknown cross-average kind {kind!r}")
    if kind != "h_phi" and not system.has_c:
        raise ValidationError(f"{kind} requires the coefficient c")
    if kind in ("c_grad_phi", "h_phi", "c_grad_psi") and not system.has_h:
        raise ValidationError(f"{kind} requires the coefficient H")
    starts = _fk_subset(measure, params)
    aux: dict = {}

    if kind == "c_grad_upsilon":
        fbar1, _ = ergodic_average(system.F, measure, t)
        rhs = as_rhs(system.F).shifted(fbar1)
        prob = PoissonProblem(system, rhs, measure.y_anchor, t).checked(measure)
        prob.require_centered()
        grads = fk_gradients_batch(prob, starts, params.fk_pairs, params.t_trunc,
                                   params.fk_dt, subseed(seed, 22),
                                   h=_grad_h(starts, params)).mean(axis=1)
        return _c_dot(system, t, starts, measure, grads) + (aux,)

    if kind == "c_grad_phi":
        prob = PoissonProblem(system, as_rhs(system.H), measure.y_anchor, t).checked(measure)
        prob.require_centered()
        grads = fk_gradients_batch(prob, starts, params.fk_pairs, params.t_trunc,
                                   params.fk_dt, subseed(seed, 21),
                                   h=_grad_h(starts, params)).mean(axis=1)
        return _c_dot(system, t, starts, measure, grads) + (aux,)

    if kind == "h_phi":
        prob = PoissonProblem(system, as_rhs(system.H), measure.y_anchor, t).checked(measure)
        prob.require_centered()
        phis = fk_values_batch(prob, starts, params.fk_pairs, params.t_trunc,
                               params.fk_dt, subseed(seed, 23)).mean(axis=1)
        hvals = as_rhs(system.H).vector(t, starts, measure.y_anchor)
        prods = np.einsum("ni,nj->nij", hvals, phis)
        flat_mean, flat_se = block_stats(prods.reshape(len(prods), -1), measure)
        m = flat_mean.reshape(hvals.shape[1], hvals.shape[1])
        aux["antisym_residual"] = float(np.max(np.abs(m - m.T)) / 2.0)
        return m, flat_se.reshape(m.shape), aux

    # nested: Psi solves L0 Psi = -(c.grad Phi - avg(c.grad Phi))
    if system.d1 != 1:
        raise ValidationError("nested cell problem implemented for d1 == 1 only")
    prob_phi = PoissonProblem(system, as_rhs(system.H), measure.y_anchor, t).checked(measure)
    prob_phi.require_centered()
    lo = measure.samples.min() - params.nested_tab_pad
    hi = measure.samples.max() + params.nested_tab_pad
    nodes = np.linspace(lo, hi, params.nested_tab_nodes)[:, None]
    tab = fk_gradients_batch(prob_phi, nodes, params.nested_tab_pairs,
                             params.t_trunc, params.fk_dt, subseed(seed, 25),
                             h=_grad_h(nodes, params)).mean(axis=1)[..., 0]
    rhs0 = PoissonRhs.from_dot_table(system.c, nodes[:, 0], tab,
                                     np.zeros(system.d2))
    shift, shift_se = ergodic_average(rhs0, measure, t)
    aux["inner_shift"] = shift
    rhs_psi = PoissonRhs.from_dot_table(system.c, nodes[:, 0], tab, shift)
    prob_psi = PoissonProblem(system, rhs_psi, measure.y_anchor, t).checked(measure)
    prob_psi.require_centered()
    grads = fk_gradients_batch(prob_psi, starts, params.fk_pairs, params.t_trunc,
                               params.fk_dt, subseed(seed, 27),
                               h=_grad_h(starts, params)).mean(axis=1)
    return _c_dot(system, t, starts, measure, grads) + (aux,)


def _c_dot(system, t, starts, measure, grads):
    cvals = system.c.compile_vector()(t, starts, measure.y_anchor)[..., 0]
    per = np.einsum("nki,ni->nk", grads, cvals)
    return block_stats(per, measure)


def grad_y_effective(estimator, t: float, y, h: float = 1e-3) -> np.ndarray:
    """y-Jacobian of a (deterministically seeded) estimator by central
    differences; common seeds inside ``estimator`` cancel the MC noise."""
    y = np.atleast_1d(np.asarray(y, float))
    cols = []
    for j in range(y.size):
        yp, ym = y.copy(), y.copy()
        yp[j] += h
        ym[j] -= h
        cols.append((np.asarray(estimator(t, yp), float)
                     - np.asarray(estimator(t, ym), float)) / (2.0 * h))
    return np.stack(cols, axis=-1)  # (k, d2)


# ---------------------------------------------------------------------------
# collected coefficients and the limit SDE specification

@dataclass
class EffectiveCoefficients:
    """Callables (t, Y) -> arrays; entries None when not estimated."""

    d2: int
    fbar1: object | None = None
    fbar2: object | None = None
    zeta: object | None = None  # (d2, d2) PSD root
    cross_c_phi: object | None = None
    cross_c_upsilon: object | None = None
    cross_c_psi: object | None = None
    cross_H_phi: object | None = None  # (d2, d2), symmetrized downstream
    stderr: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> LatticeField1D


@dataclass(frozen=True)
class GradInputs:
    grad_fbar1: object | None = None  # (t, Y) -> (..., d2, d2)
    grad_fbar2: object | None = None
    grad_G: object | None = None  # (t, Y) -> (..., d2, d2, d2)


@dataclass(frozen=True, eq=False)
class LimitSdeSpec:
    """Drift/diffusion of the linear deviation-limit SDE for one tag."""

    dev: DeviationRegime
    d2: int
    grad_fbar: object
    grad_G: object
    drift_extra: object
    sigma_extra: object
    tables: dict | None = None  # scalar-case lattice arrays for fused kernels

    def term_profile(self) -> tuple[bool, bool]:
        """(has drift_extra, has sigma_extra) as selected by the tag."""
        return _TERM_PROFILE[self.dev.tag]


_TERM_PROFILE = {
    DevTag.R0_1: (True, False), DevTag.R0_2: (False, True), DevTag.R0_3: (True, True),
    DevTag.R1_1: (True, False), DevTag.R1_2: (False, True), DevTag.R1_3: (True, True),
    DevTag.R2_1: (True, False), DevTag.R2_2: (False, True), DevTag.R2_3: (True, True),
}

# which ingredients feed drift_extra / sigma_extra per tag
_DRIFT_PARTS = {
    DevTag.R0_1: ("cross_c_upsilon",), DevTag.R0_3: ("cross_c_upsilon",),
    DevTag.R1_1: ("cross_c_phi",), DevTag.R1_3: ("cross_c_phi",),
    DevTag.R2_1: ("cross_c_upsilon", "cross_c_psi"),
    DevTag.R2_3: ("cross_c_upsilon", "cross_c_psi"),
}
_SIGMA_PART = {
    DevTag.R0_2: "zeta", DevTag.R0_3: "zeta",
    DevTag.R1_2: "h_phi_root", DevTag.R1_3: "h_phi_root",
    DevTag.R2_2: "h_phi_root", DevTag.R2_3: "h_phi_root",
}


def grad_g_callable(system: MultiscaleSystem):
    """Symbolic y-gradient of G -> callable (t, Y) -> (..., d2, d2, d2)."""
    d2 = system.d2
    parts = []
    for m in range(d2):
        rows = tuple(tuple(differentiate(e, f"y{m + 1}") for e in row)
                     for row in system.G.entries)
        parts.append(CoefficientField.from_exprs(f"dG_dy{m + 1}", rows, ("t", "y")))
    vecs = [p.compile_vector() for p in parts]

    def call(t, Y):
        stack = [v(t, np.asarray(Y, float), np.asarray(Y, float)) for v in vecs]
        return np.stack(stack, axis=-1)  # (..., d2, d2, d2) indexed [i, j, m]

    return call


def grad_g_scalar_field(system: MultiscaleSystem) -> CoefficientField:
    """d2 == 1 convenience: dG/dy as a 1x1 field for the fused kernel."""
    if system.d2 != 1:
        raise ValidationError("scalar grad-G field needs d2 == 1")
    e = differentiate(system.G.entries[0][0], "y1")
    return CoefficientField.from_exprs("dG_dy1", ((e,),), ("t", "y"))


def _const_callable(value: np.ndarray):
    value = np.asarray(value, float)

    def call(t, Y):
        lead = np.asarray(Y, float).shape[:-1]
        return np.broadcast_to(value, lead + value.shape).copy()

    return call


def zero_callable(shape: tuple[int, ...]):
    return _const_callable(np.zeros(shape))


def _h_phi_root_table(eff: EffectiveCoefficients):
    tab = eff.tables.get("h_phi")
    if tab is None:
        return None
    roots = np.empty(tab.values.shape)
    for i, m in enumerate(tab.values):
        roots[i] = matrix_sqrt_psd(m, 0.10, "h_phi")[0]
    return LatticeField1D("h_phi_root", tab.ys, roots)


def build_limit_spec(dev: DeviationRegime, system: MultiscaleSystem,
                     effective: EffectiveCoefficients,
                     grads: GradInputs) -> LimitSdeSpec:
    """Select the regime's terms; raises on missing ingredients."""
    d2 = effective.d2
    tag = dev.tag
    use_f2 = tag in (DevTag.R2_1, DevTag.R2_2, DevTag.R2_3)
    grad_fbar = grads.grad_fbar2 if use_f2 else grads.grad_fbar1
    if grad_fbar is None:
        raise ValidationError(
            f"{tag.value}: missing grad_fbar{'2' if use_f2 else '1'}")
    grad_G = grads.grad_G if grads.grad_G is not None else grad_g_callable(system)

    want_drift, want_sigma = _TERM_PROFILE[tag]
    if want_drift:
        parts = []
        for name in _DRIFT_PARTS[tag]:
            part = getattr(effective, name)
            if part is None:
                raise ValidationError(f"{tag.value}: missing component {name}")
            parts.append(part)
        if len(parts) == 1:
            drift_extra = parts[0]
        else:
            p0, p1 = parts
            drift_extra = lambda t, Y: np.asarray(p0(t, Y)) + np.asarray(p1(t, Y))
    else:
        drift_extra = zero_callable((d2,))

    if want_sigma:
        src = _SIGMA_PART[tag]
        if src == "zeta":
            if effective.zeta is None:
                raise ValidationError(f"{tag.value}: missing component zeta")
            sigma_extra = effective.zeta
        else:
            root_tab = _h_phi_root_table(effective)
            if root_tab is not None:
                sigma_extra = root_tab
            elif effective.cross_H_phi is not None:
                hp = effective.cross_H_phi
                sigma_extra = lambda t, Y: _rootify(hp(t, Y))
            else:
                raise ValidationError(f"{tag.value}: missing component h_phi")
    else:
        sigma_extra = zero_callable((d2, d2))

    tables = _scalar_tables(dev, effective, grad_fbar, drift_extra, sigma_extra) \
        if d2 == 1 else None
    return LimitSdeSpec(dev=dev, d2=d2, grad_fbar=grad_fbar, grad_G=grad_G,
                        drift_extra=drift_extra, sigma_extra=sigma_extra,
                        tables=tables)


def _rootify(mats: np.ndarray) -> np.ndarray:
    mats = np.asarray(mats, float)
    lead = mats.shape[:-2]
    flat = mats.reshape((-1,) + mats.shape[-2:])
    out = np.empty_like(flat)
    for i, m in enumerate(flat):
        out[i] = matrix_sqrt_psd(m, 0.10, "sigma_extra")[0]
    return out.reshape(mats.shape)


def _scalar_tables(dev, effective, grad_fbar, drift_extra, sigma_extra):
    """Sample the scalar-case coefficients onto one shared lattice."""
    lat = None
    for tab in effective.tables.values():
        lat = tab.ys
        break
    if lat is None:
        lat = np.linspace(-40.0, 40.0, 4001)  # analytic callables: dense grid
    Y = lat[:, None]
    use_f2 = dev.tag in (DevTag.R2_1, DevTag.R2_2, DevTag.R2_3)
    fbar = effective.fbar2 if use_f2 else effective.fbar1
    if fbar is None:
        raise ValidationError("limit spec needs the matching fbar for Ybar")
    return {
        "ys": np.asarray(lat, float),
        "fbar": np.asarray(fbar(0.0, Y), float).reshape(lat.size),
        "grad_fbar": np.asarray(grad_fbar(0.0, Y), float).reshape(lat.size),
        "drift_extra": np.asarray(drift_extra(0.0, Y), float).reshape(lat.size),
        "sigma_extra": np.asarray(sigma_extra(0.0, Y), float).reshape(lat.size),
    }


# ---------------------------------------------------------------------------
# lattice sweep


def estimate_effective_lattice(system: MultiscaleSystem, t_anchor: float,
                               lattice_ys: np.ndarray, params: EstimationParams,
                               seed: int, need: set[str],
                               want_grads: bool = True):
    """Estimate the requested coefficients over a scalar-y lattice.

    ``need`` is a subset of {fbar1, fbar2, zeta, c_phi, c_ups, c_psi, h_phi}.
    Returns (EffectiveCoefficients, GradInputs).
    """
    if system.d2 != 1:
        raise ValidationError("lattice estimation supports d2 == 1 only")
    ys = np.asarray(lattice_ys, float)
    m = ys.size
    vals: dict[str, list] = {k: [] for k in need}
    errs: dict[str, list] = {k: [] for k in need}
    gf1, gf2 = [], []

    for j, yj in enumerate(ys):
        msd = subseed(seed, 11, j)
        measure = measure_for(system, [yj], params, msd)

        def fbar1_at(t, yq, _seed=msd):
            mq = measure_for(system, yq, params, _seed)
            v, _ = ergodic_average(system.F, mq, t)
            return v

        if "fbar1" in need:
            v, e = averaged_drift(system, 1, t_anchor, [yj], measure, params,
                                  subseed(seed, 31, j))
            vals["fbar1"].append(v)
            errs["fbar1"].append(e)
        if "fbar2" in need:
            v, e = averaged_drift(system, 2, t_anchor, [yj], measure, params,
                                  subseed(seed, 32, j))
            vals["fbar2"].append(v)
            errs["fbar2"].append(e)
        if "zeta" in need:
            root, mm, se, _ = effective_zeta(system, t_anchor, [yj], measure,
                                             params, subseed(seed, 33, j))
            vals["zeta"].append(root)
            errs["zeta"].append(se)
        for short, kind in (("c_ups", "c_grad_upsilon"), ("c_phi", "c_grad_phi"),
                            ("c_psi", "c_grad_psi"), ("h_phi", "h_phi")):
            if short in need:
                v, e, _ = cross_average(kind, system, t_anchor, [yj], measure,
                                        params, subseed(seed, 34, j))
                vals[short].append(v)
                errs[short].append(e)
        if want_grads:
            gf1.append(grad_y_effective(fbar1_at, t_anchor, [yj],
                                        params.grad_y_h))
            if "fbar2" in need:
                def fbar2_at(t, yq, _seed=msd, _j=j):
                    mq = measure_for(system, yq, params, _seed)
                    v, _ = averaged_drift(system, 2, t, yq, mq, params,
                                          subseed(seed, 32, _j))
                    return v
                gf2.append(grad_y_effective(fbar2_at, t_anchor, [yj],
                                            params.grad_y_h))

    eff = EffectiveCoefficients(d2=1)
    for name in need:
        arr = np.stack(vals[name])
        tab = LatticeField1D(name, ys, arr, np.stack(errs[name]))
        eff.tables[name] = tab
        attr = {"fbar1": "fbar1", "fbar2": "fbar2", "zeta": "zeta",
                "c_phi": "cross_c_phi", "c_ups": "cross_c_upsilon",
                "c_psi": "cross_c_psi", "h_phi": "cross_H_phi"}[name]
        setattr(eff, attr, tab)
        eff.stderr[name] = np.stack(errs[name])

    grads = GradInputs(
        grad_fbar1=LatticeField1D("grad_fbar1", ys, np.stack(gf1)) if gf1 else None,
        grad_fbar2=LatticeField1D("grad_fbar2", ys, np.stack(gf2)) if gf2 else None,
        grad_G=grad_g_callable(system),
    )
    return eff, grads
