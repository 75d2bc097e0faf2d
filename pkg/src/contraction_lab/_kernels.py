"""Compiled pair stepper for constant diffusion and a builtin drift.

Follows the vectorised stepper in ``coupling`` operation by operation and
draws the same lanes from the same counter-based streams, so both routes
simulate the same paths; the loop runs path by path and stops a path as
soon as it couples.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numba import njit

from .rng import _mix, _normal_at, _uniform_at

# exp(-40) is below the smallest uniform the generator can produce
_BRIDGE_CUT = 40.0
_BLOCK = 64


@njit(cache=True, inline="always")
def _drift(code, params, x, out):
    d = x.shape[0]
    if code == 0:
        for i in range(d):
            out[i] = 0.0
    elif code == 1:
        K = -params[0]
        for i in range(d):
            out[i] = K * x[i]
    elif code == 2:
        for i in range(d):
            out[i] = x[i] - x[i] ** 3
    else:
        r2 = x[0] * x[0]
        for i in range(1, d):
            r2 = r2 + x[i] * x[i]
        r2 = params[2] ** 2 + r2
        f = r2 ** (params[1] / 2)
        for i in range(d):
            out[i] = -params[0] * f * x[i]


@lru_cache(maxsize=None)
def pair_kernel(kind, d, m, code, skip_shared, bridge, record):
    """Kernel specialised on its structural flags; they are compile-time constants."""

    @njit(error_model="numpy")
    def run(keys, wn, wu, x0, y0, n_steps, every, dt, params, S, S0, lam, r0, thr, w,
            rho_out, T, div_step, states):
        _pair_loop(keys, wn, wu, x0, y0, n_steps, every, dt, code, params, S, S0, kind, lam, r0,
                   thr, bridge, skip_shared, w, record, rho_out, T, div_step, states, d, m)

    return run


@njit(inline="always", error_model="numpy")
def _pair_loop(keys, wn, wu, x0, y0, n_steps, every, dt, code, params, S, S0, kind, lam, r0,
               thr, bridge, skip_shared, w, record, rho_out, T, div_step, states, d, m):
    n = keys.shape[0]
    c = math.sqrt(2.0 * dt)
    var_full = 8.0 * lam**2
    x = np.empty(d)
    y = np.empty(d)
    xn = np.empty(d)
    yn = np.empty(d)
    bx = np.empty(d)
    by = np.empty(d)
    e = np.empty(d)
    xi = np.empty(max(d, m))
    refl = np.empty(d)
    extra = np.empty(d)
    n_shared = d if kind != 0 else m
    if kind != 0 and skip_shared:
        n_shared = 0
    # buffer columns: shared block, reflected block, hybrid shared block
    n_cols = n_shared + (d if kind != 0 else 0) + (d if kind == 2 else 0)
    lanes = np.empty(n_cols, dtype=np.int64)
    for j in range(n_shared):
        lanes[j] = j
    if kind != 0:
        for j in range(d):
            lanes[n_shared + j] = w + j
    if kind == 2:
        for j in range(d):
            lanes[n_shared + d + j] = w + d + j
    off_r = n_shared
    off_x = n_shared + d
    buf = np.empty((_BLOCK, n_cols))
    for i in range(n):
        key = keys[i]
        for j in range(d):
            x[j] = x0[j]
            y[j] = y0[j]
        z2 = (x[0] - y[0]) * (x[0] - y[0])
        for j in range(1, d):
            z2 = z2 + (x[j] - y[j]) * (x[j] - y[j])
        rho_out[i, 0] = math.sqrt(z2)
        glued = z2 == 0.0
        if glued:
            T[i] = 0.0
        if record:
            for j in range(d):
                states[i, 0, 0, j] = x[j]
                states[i, 0, 1, j] = y[j]
        for k in range(n_steps):
            if glued and not record:
                break
            kb = k % _BLOCK
            if kb == 0:
                # fill the next block of steps up front; the draws do not depend on the state
                for kk in range(min(_BLOCK, n_steps - k)):
                    base = _mix(key ^ wn[k + kk])
                    for cc in range(n_cols):
                        buf[kk, cc] = _normal_at(base, lanes[cc])
            z0 = x[0] - y[0]
            rr = z0 * z0
            for j in range(1, d):
                zj = x[j] - y[j]
                rr = rr + zj * zj
            rho = math.sqrt(rr)
            for j in range(d):
                e[j] = (x[j] - y[j]) / rho if rho > 0 else 0.0
            _drift(code, params, x, bx)
            _drift(code, params, y, by)
            h = 1.0
            if kind == 0:
                for j in range(m):
                    xi[j] = buf[kb, j]
                for j in range(d):
                    s = S[j, 0] * xi[0]
                    for l in range(1, m):
                        s = s + S[j, l] * xi[l]
                    xn[j] = x[j] + bx[j] * dt + c * s
                    yn[j] = y[j] + by[j] * dt + c * s
            else:
                g = 0.0
                if kind == 2:
                    u = rho - r0
                    u = 0.0 if u < 0.0 else (1.0 if u > 1.0 else u)
                    sm = u * u * (3.0 - 2.0 * u)
                    if u >= 1.0:
                        h, g = 0.0, 1.0
                    else:
                        h, g = math.cos(0.5 * np.pi * sm), math.sin(0.5 * np.pi * sm)
                for j in range(d):
                    refl[j] = buf[kb, off_r + j]
                dot = e[0] * refl[0]
                for j in range(1, d):
                    dot = dot + e[j] * refl[j]
                if kind == 2:
                    for j in range(d):
                        extra[j] = buf[kb, off_x + j]
                if not skip_shared:
                    for j in range(n_shared):
                        xi[j] = buf[kb, j]
                for j in range(d):
                    nx = lam * (h * refl[j])
                    ny = lam * (h * (refl[j] - 2.0 * e[j] * dot))
                    if kind == 2:
                        nx = nx + lam * (g * extra[j])
                        ny = ny + lam * (g * extra[j])
                    if not skip_shared:
                        s = S0[j, 0] * xi[0]
                        for l in range(1, d):
                            s = s + S0[j, l] * xi[l]
                        nx = s + nx
                        ny = s + ny
                    xn[j] = x[j] + bx[j] * dt + c * nx
                    yn[j] = y[j] + by[j] * dt + c * ny
            if glued:
                for j in range(d):
                    yn[j] = xn[j]
            else:
                signed = (xn[0] - yn[0]) * e[0]
                for j in range(1, d):
                    signed = signed + (xn[j] - yn[j]) * e[j]
                hit = signed <= thr and rho > 0
                if kind != 0 and bridge and not hit:
                    var = var_full * h**2
                    if var > 0 and rho > thr:
                        q = -2.0 * (rho - thr) * (signed - thr) / (var * dt)
                        if q > -_BRIDGE_CUT:
                            ub = _uniform_at(_mix(key ^ wu[k]), 0)
                            hit = ub < math.exp(q)
                if hit:
                    T[i] = (k + 1) * dt
                    glued = True
                    for j in range(d):
                        yn[j] = xn[j]
            bad = False
            for j in range(d):
                if not (abs(xn[j]) <= 1e8 and abs(yn[j]) <= 1e8):
                    bad = True
            for j in range(d):
                x[j] = xn[j]
                y[j] = yn[j]
            if bad:
                div_step[i] = k
                col = (k + 1 + every - 1) // every
                for cc in range(col, rho_out.shape[1]):
                    rho_out[i, cc] = np.nan
                break
            if (k + 1) % every == 0:
                col = (k + 1) // every
                z0 = x[0] - y[0]
                rr = z0 * z0
                for j in range(1, d):
                    zj = x[j] - y[j]
                    rr = rr + zj * zj
                rho_out[i, col] = math.sqrt(rr)
                if record:
                    for j in range(d):
                        states[i, col, 0, j] = x[j]
                        states[i, col, 1, j] = y[j]
