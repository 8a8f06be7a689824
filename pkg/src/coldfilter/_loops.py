"""Compiled per-step simulation loops.

Each loop reports -1 on success, or the first sample index at which the
divergence bound was exceeded (NaN counts as exceeded).  State samples are
stored before the step update, so x[k] is the displacement at time k*dt.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def closed_loop_velocity_gain(a00, a01, a10, a11, b0, b1, coef, delay,
                              force, meas, x0, v0, bound, x, v, fact, xt):
    # coef[k] = -m*gamma*g_f(k)/dt; actuation uses the backward difference of
    # the measured record, delayed by `delay` whole steps, zero prehistory.
    xx = x0
    vv = v0
    n = force.shape[0]
    for k in range(n):
        if not (abs(xx) <= bound):
            return k
        x[k] = xx
        v[k] = vv
        xt[k] = xx + meas[k]
        i = k - delay
        if i >= 1:
            fa = coef[k] * (xt[i] - xt[i - 1])
        elif i == 0:
            fa = coef[k] * xt[0]
        else:
            fa = 0.0
        fact[k] = fa
        f = force[k] + fa
        xn = a00 * xx + a01 * vv + b0 * f
        vn = a10 * xx + a11 * vv + b1 * f
        xx = xn
        vv = vn
    return -1


@njit(cache=True, nogil=True)
def closed_loop_taps(a00, a01, a10, a11, b0, b1, taps,
                     force, meas, x0, v0, bound, x, v, fact, xt):
    # F_act[k] = sum_j taps[j] * xt[k-j], zero prehistory.
    xx = x0
    vv = v0
    n = force.shape[0]
    nt = taps.shape[0]
    for k in range(n):
        if not (abs(xx) <= bound):
            return k
        x[k] = xx
        v[k] = vv
        xt[k] = xx + meas[k]
        fa = 0.0
        jmax = min(nt, k + 1)
        for j in range(jmax):
            fa += taps[j] * xt[k - j]
        fact[k] = fa
        f = force[k] + fa
        xn = a00 * xx + a01 * vv + b0 * f
        vn = a10 * xx + a11 * vv + b1 * f
        xx = xn
        vv = vn
    return -1


@njit(cache=True, nogil=True)
def closed_loop_two_time(a00, a01, a10, a11, b0, b1, gmat,
                         force, meas, x0, v0, bound, x, v, fact, xt):
    # F_act[k] = sum_{l<=k} gmat[k, l] * xt[l].
    xx = x0
    vv = v0
    n = force.shape[0]
    for k in range(n):
        if not (abs(xx) <= bound):
            return k
        x[k] = xx
        v[k] = vv
        xt[k] = xx + meas[k]
        fa = 0.0
        for l in range(k + 1):
            fa += gmat[k, l] * xt[l]
        fact[k] = fa
        f = force[k] + fa
        xn = a00 * xx + a01 * vv + b0 * f
        vn = a10 * xx + a11 * vv + b1 * f
        xx = xn
        vv = vn
    return -1


@njit(cache=True, nogil=True)
def fill_schedule_kernel(h_x, coef, delay, out):
    # out[i, l] = coef[l+d]*h_x[i-l-d] - coef[l+d+1]*h_x[i-l-d-1] on the strict
    # lower triangle (h_x[0] = 0 keeps the diagonal zero); upper part untouched.
    n = coef.shape[0]
    for i in range(n):
        for l in range(i + 1):
            j = l + delay
            acc = 0.0
            if j <= i:
                acc += coef[j] * h_x[i - j]
            j += 1
            if j <= i:
                acc -= coef[j] * h_x[i - j]
            out[i, l] = acc


@njit(cache=True, nogil=True)
def fill_toeplitz(col, out):
    # Lower-triangular Toeplitz fill: out[i, l] = col[i - l] for l <= i.
    n = col.shape[0]
    for i in range(n):
        for l in range(i + 1):
            out[i, l] = col[i - l]


@njit(cache=True, nogil=True)
def impulse_response(a00, a01, a10, a11, b0, b1, out):
    # out[j] = displacement j steps after a unit ZOH force over one step;
    # out[0] = 0 by the ZOH convention.
    n = out.shape[0]
    out[0] = 0.0
    sx = b0
    sv = b1
    for j in range(1, n):
        out[j] = sx
        nx = a00 * sx + a01 * sv
        nv = a10 * sx + a11 * sv
        sx = nx
        sv = nv
    return out


def as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)
