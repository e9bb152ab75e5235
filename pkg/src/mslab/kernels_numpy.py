"""Pure-numpy fallback kernels, vectorized across replicas.

Semantics and arithmetic grouping mirror ``kernels_numba`` exactly; field
evaluators arrive as vectorized callables ``fn(t, X, Y) -> (n, rows, cols)``
built by ``CoefficientField.compile_vector``.
"""

import numpy as np


def _finite_inside(arr, bound):
    # NaN compares false, so this also catches non-finite states
    return np.all(np.abs(arr) < bound, axis=-1)


def multiscale(sysv, t0, dt, x_init, y_init, w1, w2, inv_a2, inv_b, inv_g,
               inv_a, has_c, has_h, bound, save_idx, xs, ys, expl):
    b_fn, c_fn, sig_fn, f_fn, h_fn, g_fn = sysv
    n_rep, n_steps, d1 = w1.shape
    d2 = w2.shape[2]
    X = np.tile(np.asarray(x_init, float), (n_rep, 1))
    Y = np.tile(np.asarray(y_init, float), (n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    si = 0
    n_save = save_idx.shape[0]
    if n_save > 0 and save_idx[0] == 0:
        xs[:, 0, :] = X
        ys[:, 0, :] = Y
        si = 1
    for k in range(n_steps):
        t = t0 + k * dt
        drift_x = b_fn(t, X, Y)[..., 0] * inv_a2
        if has_c:
            drift_x = drift_x + c_fn(t, X, Y)[..., 0] * inv_b
        noise_x = np.einsum("rij,rj->ri", sig_fn(t, X, Y), w1[:, k, :])
        Xn = X + drift_x * dt + noise_x * inv_a
        drift_y = f_fn(t, X, Y)[..., 0]
        if has_h:
            drift_y = drift_y + h_fn(t, X, Y)[..., 0] * inv_g
        noise_y = np.einsum("rij,rj->ri", g_fn(t, X, Y), w2[:, k, :])
        Yn = Y + drift_y * dt + noise_y
        ok = _finite_inside(Xn, bound) & _finite_inside(Yn, bound)
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        X[upd] = Xn[upd]
        Y[upd] = Yn[upd]
        alive &= ok
        if si < n_save and save_idx[si] == k + 1:
            xs[:, si, :] = X
            ys[:, si, :] = Y
            si += 1


def multiscale_fluct(sysv, rhs_fn, t0, dt, x_init, y_init, w1, w2, inv_a2,
                     inv_b, inv_g, inv_a, has_c, has_h, bound, out_int, expl):
    b_fn, c_fn, sig_fn, f_fn, h_fn, g_fn = sysv
    n_rep, n_steps, d1 = w1.shape
    X = np.tile(np.asarray(x_init, float), (n_rep, 1))
    Y = np.tile(np.asarray(y_init, float), (n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    out_int[:] = 0.0
    fprev = rhs_fn(t0, X, Y)
    for k in range(n_steps):
        t = t0 + k * dt
        drift_x = b_fn(t, X, Y)[..., 0] * inv_a2
        if has_c:
            drift_x = drift_x + c_fn(t, X, Y)[..., 0] * inv_b
        noise_x = np.einsum("rij,rj->ri", sig_fn(t, X, Y), w1[:, k, :])
        Xn = X + drift_x * dt + noise_x * inv_a
        drift_y = f_fn(t, X, Y)[..., 0]
        if has_h:
            drift_y = drift_y + h_fn(t, X, Y)[..., 0] * inv_g
        noise_y = np.einsum("rij,rj->ri", g_fn(t, X, Y), w2[:, k, :])
        Yn = Y + drift_y * dt + noise_y
        ok = _finite_inside(Xn, bound) & _finite_inside(Yn, bound)
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        X[upd] = Xn[upd]
        Y[upd] = Yn[upd]
        alive &= ok
        fnext = rhs_fn(t0 + (k + 1) * dt, X, Y)
        out_int[upd] += 0.5 * dt * (fprev[upd] + fnext[upd])
        fprev = fnext


def frozen_paths(fro_v, y, dt, x_starts, w1, idx, sgn, bound, save_idx, xs, expl):
    b_fn, sig_fn = fro_v
    n_rep, d1 = x_starts.shape
    n_steps = w1.shape[1]
    X = np.array(x_starts, float)
    Yc = np.tile(np.asarray(y, float), (n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    si = 0
    n_save = save_idx.shape[0]
    if n_save > 0 and save_idx[0] == 0:
        xs[:, 0, :] = X
        si = 1
    for k in range(n_steps):
        wk = w1[idx, k, :] * sgn[:, None]
        noise = np.einsum("rij,rj->ri", sig_fn(0.0, X, Yc), wk)
        Xn = X + b_fn(0.0, X, Yc)[..., 0] * dt + noise
        ok = _finite_inside(Xn, bound)
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        X[upd] = Xn[upd]
        alive &= ok
        if si < n_save and save_idx[si] == k + 1:
            xs[:, si, :] = X
            si += 1


def fk_integrals(fro_v, rhs_fn, t_anchor, y, dt, x_starts, w1, idx, sgn, bound,
                 out_int, expl):
    b_fn, sig_fn = fro_v
    n_rep, d1 = x_starts.shape
    n_steps = w1.shape[1]
    X = np.array(x_starts, float)
    Yc = np.tile(np.asarray(y, float), (n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    out_int[:] = 0.0
    fprev = rhs_fn(t_anchor, X, Yc)
    for k in range(n_steps):
        wk = w1[idx, k, :] * sgn[:, None]
        noise = np.einsum("rij,rj->ri", sig_fn(0.0, X, Yc), wk)
        Xn = X + b_fn(0.0, X, Yc)[..., 0] * dt + noise
        ok = _finite_inside(Xn, bound)
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        X[upd] = Xn[upd]
        alive &= ok
        fnext = rhs_fn(t_anchor, X, Yc)
        out_int[upd] += 0.5 * dt * (fprev[upd] + fnext[upd])
        fprev = fnext


def averaged_dsl(fbar_fn, g_fn, t0, dt, y_init, w2, bound, save_idx, ys, expl):
    n_rep, n_steps, d2 = w2.shape
    Y = np.tile(np.asarray(y_init, float), (n_rep, 1))
    Xdum = np.zeros((n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    si = 0
    n_save = save_idx.shape[0]
    if n_save > 0 and save_idx[0] == 0:
        ys[:, 0, :] = Y
        si = 1
    for k in range(n_steps):
        t = t0 + k * dt
        fb = fbar_fn(t, Xdum, Y)[..., 0]
        noise = np.einsum("rij,rj->ri", g_fn(t, Xdum, Y), w2[:, k, :])
        Yn = Y + fb * dt + noise
        ok = _finite_inside(Yn, bound)
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        Y[upd] = Yn[upd]
        alive &= ok
        if si < n_save and save_idx[si] == k + 1:
            ys[:, si, :] = Y
            si += 1


def averaged_lattice(ys_lat, fb_vals, g_fn, t0, dt, y_init, w2, bound,
                     save_idx, ys, expl):
    n_rep, n_steps, _ = w2.shape
    Y = np.full(n_rep, float(y_init[0]))
    Xdum = np.zeros((n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    si = 0
    n_save = save_idx.shape[0]
    if n_save > 0 and save_idx[0] == 0:
        ys[:, 0, 0] = Y
        si = 1
    for k in range(n_steps):
        t = t0 + k * dt
        fb = np.interp(Y, ys_lat, fb_vals)
        g = g_fn(t, Xdum, Y[:, None])[..., 0, 0]
        Yn = Y + fb * dt + g * w2[:, k, 0]
        ok = np.abs(Yn) < bound
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        Y[upd] = Yn[upd]
        alive &= ok
        if si < n_save and save_idx[si] == k + 1:
            ys[:, si, 0] = Y
            si += 1


def fused_avg_limit(ys_lat, fb_vals, gf_vals, de_vals, se_vals, g_fn, dg_fn,
                    t0, dt, y_init, w2, wt, bound, save_idx, ybars, zs, expl):
    n_rep, n_steps, _ = w2.shape
    Y = np.full(n_rep, float(y_init[0]))
    Z = np.zeros(n_rep)
    Xdum = np.zeros((n_rep, 1))
    expl[:] = -1
    alive = np.ones(n_rep, bool)
    si = 0
    n_save = save_idx.shape[0]
    if n_save > 0 and save_idx[0] == 0:
        ybars[:, 0] = Y
        zs[:, 0] = Z
        si = 1
    for k in range(n_steps):
        t = t0 + k * dt
        fb = np.interp(Y, ys_lat, fb_vals)
        gf = np.interp(Y, ys_lat, gf_vals)
        de = np.interp(Y, ys_lat, de_vals)
        se = np.interp(Y, ys_lat, se_vals)
        g = g_fn(t, Xdum, Y[:, None])[..., 0, 0]
        dg = dg_fn(t, Xdum, Y[:, None])[..., 0, 0]
        Zn = Z + (gf * Z + de) * dt + dg * Z * w2[:, k, 0] + se * wt[:, k, 0]
        Yn = Y + fb * dt + g * w2[:, k, 0]
        ok = (np.abs(Yn) < bound) & (np.abs(Zn) < bound)
        newly = alive & ~ok
        expl[newly] = k + 1
        upd = alive & ok
        Y[upd] = Yn[upd]
        Z[upd] = Zn[upd]
        alive &= ok
        if si < n_save and save_idx[si] == k + 1:
            ybars[:, si] = Y
            zs[:, si] = Z
            si += 1


def limit_from_path(grad_f, grad_g, de, se, dt, w2, wt, bound, zs):
    n_steps, d2 = w2.shape
    z = np.zeros(d2)
    zs[0, :] = 0.0
    expl = -1
    for k in range(n_steps):
        if expl < 0:
            drift = de[k] + grad_f[k] @ z
            gz = grad_g[k] @ z  # (d2, d2): [i, j] = sum_m grad_g[i,j,m] z_m
            noise = gz @ w2[k] + se[k] @ wt[k]
            zn = z + drift * dt + noise
            if np.all(np.abs(zn) < bound):
                z = zn
            else:
                expl = k + 1
        zs[k + 1, :] = z
    return expl
