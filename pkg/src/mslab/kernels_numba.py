"""Numba stepping kernels (hot loops).

Every kernel is a serial loop over replicas and steps; batch parallelism is
left to the caller so that reductions stay bit-reproducible.  Coefficient
evaluators arrive as njit dispatchers with the uniform scalar signature
``eval(t, x, y, out_flat)``.

The update arithmetic (term order, grouping) is mirrored exactly by
``kernels_numpy``; keep the two files in sync.
"""

import numpy as np
from numba import njit


@njit(cache=False)
def _interp1(xq, xs, vs):
    """Piecewise-linear with flat extrapolation (matches np.interp)."""
    m = xs.shape[0]
    if xq <= xs[0]:
        return vs[0]
    if xq >= xs[m - 1]:
        return vs[m - 1]
    lo = 0
    hi = m - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if xs[mid] <= xq:
            lo = mid
        else:
            hi = mid
    w = (xq - xs[lo]) / (xs[lo + 1] - xs[lo])
    return vs[lo] + w * (vs[lo + 1] - vs[lo])


@njit(cache=False)
def multiscale(sys_eval, t0, dt, x_init, y_init, w1, w2, inv_a2, inv_b, inv_g,
               inv_a, has_c, has_h, bound, save_idx, xs, ys, expl):
    n_rep, n_steps, d1 = w1.shape
    d2 = w2.shape[2]
    b = np.empty(d1)
    c = np.empty(d1)
    sig = np.empty(d1 * d1)
    f = np.empty(d2)
    h = np.empty(d2)
    g = np.empty(d2 * d2)
    x = np.empty(d1)
    y = np.empty(d2)
    xn = np.empty(d1)
    yn = np.empty(d2)
    n_save = save_idx.shape[0]
    for r in range(n_rep):
        for i in range(d1):
            x[i] = x_init[i]
        for i in range(d2):
            y[i] = y_init[i]
        expl[r] = -1
        si = 0
        if n_save > 0 and save_idx[0] == 0:
            for i in range(d1):
                xs[r, 0, i] = x[i]
            for i in range(d2):
                ys[r, 0, i] = y[i]
            si = 1
        for k in range(n_steps):
            if expl[r] < 0:
                t = t0 + k * dt
                sys_eval(t, x, y, b, c, sig, f, h, g)
                for i in range(d1):
                    drift = b[i] * inv_a2
                    if has_c:
                        drift += c[i] * inv_b
                    noise = 0.0
                    for j in range(d1):
                        noise += sig[i * d1 + j] * w1[r, k, j]
                    xn[i] = x[i] + drift * dt + noise * inv_a
                for i in range(d2):
                    drift = f[i]
                    if has_h:
                        drift += h[i] * inv_g
                    noise = 0.0
                    for j in range(d2):
                        noise += g[i * d2 + j] * w2[r, k, j]
                    yn[i] = y[i] + drift * dt + noise
                ok = True
                for i in range(d1):
                    if not (abs(xn[i]) < bound):
                        ok = False
                for i in range(d2):
                    if not (abs(yn[i]) < bound):
                        ok = False
                if ok:
                    for i in range(d1):
                        x[i] = xn[i]
                    for i in range(d2):
                        y[i] = yn[i]
                else:
                    expl[r] = k + 1
            if si < n_save and save_idx[si] == k + 1:
                for i in range(d1):
                    xs[r, si, i] = x[i]
                for i in range(d2):
                    ys[r, si, i] = y[i]
                si += 1


@njit(cache=False)
def multiscale_fluct(sys_eval, rhs_eval, t0, dt, x_init, y_init, w1, w2, inv_a2,
                     inv_b, inv_g, inv_a, has_c, has_h, bound, out_int, expl):
    """Multiscale step loop + trapezoid of rhs_eval(t, x, y) along the path."""
    n_rep, n_steps, d1 = w1.shape
    d2 = w2.shape[2]
    kdim = out_int.shape[1]
    b = np.empty(d1)
    c = np.empty(d1)
    sig = np.empty(d1 * d1)
    f = np.empty(d2)
    h = np.empty(d2)
    g = np.empty(d2 * d2)
    x = np.empty(d1)
    y = np.empty(d2)
    xn = np.empty(d1)
    yn = np.empty(d2)
    fprev = np.empty(kdim)
    fnext = np.empty(kdim)
    for r in range(n_rep):
        for i in range(d1):
            x[i] = x_init[i]
        for i in range(d2):
            y[i] = y_init[i]
        expl[r] = -1
        for i in range(kdim):
            out_int[r, i] = 0.0
        rhs_eval(t0, x, y, fprev)
        for k in range(n_steps):
            if expl[r] >= 0:
                break
            t = t0 + k * dt
            sys_eval(t, x, y, b, c, sig, f, h, g)
            for i in range(d1):
                drift = b[i] * inv_a2
                if has_c:
                    drift += c[i] * inv_b
                noise = 0.0
                for j in range(d1):
                    noise += sig[i * d1 + j] * w1[r, k, j]
                xn[i] = x[i] + drift * dt + noise * inv_a
            for i in range(d2):
                drift = f[i]
                if has_h:
                    drift += h[i] * inv_g
                noise = 0.0
                for j in range(d2):
                    noise += g[i * d2 + j] * w2[r, k, j]
                yn[i] = y[i] + drift * dt + noise
            ok = True
            for i in range(d1):
                if not (abs(xn[i]) < bound):
                    ok = False
            for i in range(d2):
                if not (abs(yn[i]) < bound):
                    ok = False
            if ok:
                for i in range(d1):
                    x[i] = xn[i]
                for i in range(d2):
                    y[i] = yn[i]
                rhs_eval(t0 + (k + 1) * dt, x, y, fnext)
                for i in range(kdim):
                    out_int[r, i] += 0.5 * dt * (fprev[i] + fnext[i])
                    fprev[i] = fnext[i]
            else:
                expl[r] = k + 1


@njit(cache=False)
def frozen_paths(fro_eval, y, dt, x_starts, w1, idx, sgn, bound, save_idx, xs, expl):
    """Frozen fast process; noise row idx[r] with sign sgn[r] (CRN/antithetic)."""
    n_rep, d1 = x_starts.shape
    n_steps = w1.shape[1]
    b = np.empty(d1)
    sig = np.empty(d1 * d1)
    x = np.empty(d1)
    xn = np.empty(d1)
    n_save = save_idx.shape[0]
    for r in range(n_rep):
        for i in range(d1):
            x[i] = x_starts[r, i]
        expl[r] = -1
        si = 0
        if n_save > 0 and save_idx[0] == 0:
            for i in range(d1):
                xs[r, 0, i] = x[i]
            si = 1
        p = idx[r]
        s = sgn[r]
        for k in range(n_steps):
            if expl[r] < 0:
                fro_eval(0.0, x, y, b, sig)
                for i in range(d1):
                    noise = 0.0
                    for j in range(d1):
                        noise += sig[i * d1 + j] * (s * w1[p, k, j])
                    xn[i] = x[i] + b[i] * dt + noise
                ok = True
                for i in range(d1):
                    if not (abs(xn[i]) < bound):
                        ok = False
                if ok:
                    for i in range(d1):
                        x[i] = xn[i]
                else:
                    expl[r] = k + 1
            if si < n_save and save_idx[si] == k + 1:
                for i in range(d1):
                    xs[r, si, i] = x[i]
                si += 1


@njit(cache=False)
def fk_integrals(fro_eval, rhs_eval, t_anchor, y, dt, x_starts, w1, idx, sgn,
                 bound, out_int, expl):
    """Trapezoid of rhs(t_anchor, X_s, y) along frozen paths from x_starts."""
    n_rep, d1 = x_starts.shape
    n_steps = w1.shape[1]
    kdim = out_int.shape[1]
    b = np.empty(d1)
    sig = np.empty(d1 * d1)
    x = np.empty(d1)
    xn = np.empty(d1)
    fprev = np.empty(kdim)
    fnext = np.empty(kdim)
    for r in range(n_rep):
        for i in range(d1):
            x[i] = x_starts[r, i]
        expl[r] = -1
        for i in range(kdim):
            out_int[r, i] = 0.0
        rhs_eval(t_anchor, x, y, fprev)
        p = idx[r]
        s = sgn[r]
        for k in range(n_steps):
            fro_eval(0.0, x, y, b, sig)
            for i in range(d1):
                noise = 0.0
                for j in range(d1):
                    noise += sig[i * d1 + j] * (s * w1[p, k, j])
                xn[i] = x[i] + b[i] * dt + noise
            ok = True
            for i in range(d1):
                if not (abs(xn[i]) < bound):
                    ok = False
            if not ok:
                expl[r] = k + 1
                break
            for i in range(d1):
                x[i] = xn[i]
            rhs_eval(t_anchor, x, y, fnext)
            for i in range(kdim):
                out_int[r, i] += 0.5 * dt * (fprev[i] + fnext[i])
                fprev[i] = fnext[i]


@njit(cache=False)
def averaged_dsl(fbar_eval, g_eval, t0, dt, y_init, w2, bound, save_idx, ys, expl):
    """Averaged slow equation with a DSL effective drift."""
    n_rep, n_steps, d2 = w2.shape
    fb = np.empty(d2)
    g = np.empty(d2 * d2)
    dum = np.zeros(1)
    y = np.empty(d2)
    yn = np.empty(d2)
    n_save = save_idx.shape[0]
    for r in range(n_rep):
        for i in range(d2):
            y[i] = y_init[i]
        expl[r] = -1
        si = 0
        if n_save > 0 and save_idx[0] == 0:
            for i in range(d2):
                ys[r, 0, i] = y[i]
            si = 1
        for k in range(n_steps):
            if expl[r] < 0:
                t = t0 + k * dt
                fbar_eval(t, dum, y, fb)
                g_eval(t, dum, y, g)
                for i in range(d2):
                    noise = 0.0
                    for j in range(d2):
                        noise += g[i * d2 + j] * w2[r, k, j]
                    yn[i] = y[i] + fb[i] * dt + noise
                ok = True
                for i in range(d2):
                    if not (abs(yn[i]) < bound):
                        ok = False
                if ok:
                    for i in range(d2):
                        y[i] = yn[i]
                else:
                    expl[r] = k + 1
            if si < n_save and save_idx[si] == k + 1:
                for i in range(d2):
                    ys[r, si, i] = y[i]
                si += 1


@njit(cache=False)
def averaged_lattice(ys_lat, fb_vals, g_eval, t0, dt, y_init, w2, bound,
                     save_idx, ys, expl):
    """Averaged slow equation, scalar y, drift interpolated from a lattice."""
    n_rep, n_steps, _ = w2.shape
    g = np.empty(1)
    dum = np.zeros(1)
    yv = np.empty(1)
    n_save = save_idx.shape[0]
    for r in range(n_rep):
        y = y_init[0]
        expl[r] = -1
        si = 0
        if n_save > 0 and save_idx[0] == 0:
            ys[r, 0, 0] = y
            si = 1
        for k in range(n_steps):
            if expl[r] < 0:
                t = t0 + k * dt
                fb = _interp1(y, ys_lat, fb_vals)
                yv[0] = y
                g_eval(t, dum, yv, g)
                yn = y + fb * dt + g[0] * w2[r, k, 0]
                if abs(yn) < bound:
                    y = yn
                else:
                    expl[r] = k + 1
            if si < n_save and save_idx[si] == k + 1:
                ys[r, si, 0] = y
                si += 1


@njit(cache=False)
def fused_avg_limit(ys_lat, fb_vals, gf_vals, de_vals, se_vals, g_eval, dg_eval,
                    t0, dt, y_init, w2, wt, bound, save_idx, ybars, zs, expl):
    """Scalar averaged path and its deviation-limit path in one sweep.

    dZ = gf(y) Z dt + dg(t,y) Z dW2 + de(y) dt + se(y) dWt, Z(0) = 0, with the
    averaged path advanced by the same w2 increments.
    """
    n_rep, n_steps, _ = w2.shape
    g = np.empty(1)
    dg = np.empty(1)
    dum = np.zeros(1)
    yv = np.empty(1)
    n_save = save_idx.shape[0]
    for r in range(n_rep):
        y = y_init[0]
        z = 0.0
        expl[r] = -1
        si = 0
        if n_save > 0 and save_idx[0] == 0:
            ybars[r, 0] = y
            zs[r, 0] = z
            si = 1
        for k in range(n_steps):
            if expl[r] < 0:
                t = t0 + k * dt
                fb = _interp1(y, ys_lat, fb_vals)
                gf = _interp1(y, ys_lat, gf_vals)
                de = _interp1(y, ys_lat, de_vals)
                se = _interp1(y, ys_lat, se_vals)
                yv[0] = y
                g_eval(t, dum, yv, g)
                dg_eval(t, dum, yv, dg)
                zn = z + (gf * z + de) * dt + dg[0] * z * w2[r, k, 0] + se * wt[r, k, 0]
                yn = y + fb * dt + g[0] * w2[r, k, 0]
                if abs(yn) < bound and abs(zn) < bound:
                    y = yn
                    z = zn
                else:
                    expl[r] = k + 1
            if si < n_save and save_idx[si] == k + 1:
                ybars[r, si] = y
                zs[r, si] = z
                si += 1


@njit(cache=False)
def limit_from_path(grad_f, grad_g, de, se, dt, w2, wt, bound, zs):
    """General-d2 deviation-limit SDE with coefficients tabulated on the grid.

    grad_f: (n+1, d2, d2); grad_g: (n+1, d2, d2, d2) indexed [i, j, m];
    de: (n+1, d2); se: (n+1, d2, d2).  Returns the explosion step or -1.
    """
    n_steps, d2 = w2.shape
    z = np.zeros(d2)
    zn = np.empty(d2)
    for i in range(d2):
        zs[0, i] = 0.0
    expl = -1
    for k in range(n_steps):
        if expl < 0:
            for i in range(d2):
                drift = de[k, i]
                for j in range(d2):
                    drift += grad_f[k, i, j] * z[j]
                noise = 0.0
                for j in range(d2):
                    gz = 0.0
                    for m in range(d2):
                        gz += grad_g[k, i, j, m] * z[m]
                    noise += gz * w2[k, j]
                for j in range(d2):
                    noise += se[k, i, j] * wt[k, j]
                zn[i] = z[i] + drift * dt + noise
            ok = True
            for i in range(d2):
                if not (abs(zn[i]) < bound):
                    ok = False
            if ok:
                for i in range(d2):
                    z[i] = zn[i]
            else:
                expl = k + 1
        for i in range(d2):
            zs[k + 1, i] = z[i]
    return expl
