# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: switched rollouts with cost quadrature and the costate sweeps.

Same signatures and semantics as ``needlevar._pycore``.
"""

import numpy as np
from libc.math cimport sin, cos, sqrt, exp, fabs, isfinite

cdef enum:
    NMAX = 16

cdef double DIST_SMOOTHING = 1e-6


cdef inline void _rotate(const double* q, double w0, double w1, double w2, double* out) noexcept nogil:
    cdef double q0 = q[0], q1 = q[1], q2 = q[2], q3 = q[3]
    out[0] = (q0*q0 + q1*q1 - q2*q2 - q3*q3) * w0 + 2*(q1*q2 - q0*q3) * w1 + 2*(q1*q3 + q0*q2) * w2
    out[1] = 2*(q1*q2 + q0*q3) * w0 + (q0*q0 - q1*q1 + q2*q2 - q3*q3) * w1 + 2*(q2*q3 - q0*q1) * w2
    out[2] = 2*(q1*q3 - q0*q2) * w0 + 2*(q2*q3 + q0*q1) * w1 + (q0*q0 - q1*q1 - q2*q2 + q3*q3) * w2


cdef inline void _qdot(const double* q, double w0, double w1, double w2, double* out) noexcept nogil:
    cdef double q0 = q[0], q1 = q[1], q2 = q[2], q3 = q[3]
    out[0] = 0.5 * (-q1*w0 - q2*w1 - q3*w2)
    out[1] = 0.5 * (q0*w0 - q3*w1 + q2*w2)
    out[2] = 0.5 * (q3*w0 + q0*w1 - q1*w2)
    out[3] = 0.5 * (-q2*w0 + q1*w1 + q0*w2)


cdef void _dyn(int code, const double* p, const double* x, const double* u, double* out) noexcept nogil:
    cdef double th, s, a0, a1, a2
    if code == 0:
        th = x[2]
        s = u[0] + u[1]
        out[0] = p[0] * cos(th) * s
        out[1] = p[0] * sin(th) * s
        out[2] = p[0] / p[1] * (u[0] - u[1])
    elif code == 1:
        _rotate(x + 3, u[0], 0.0, u[1], out)
        _qdot(x + 3, u[2], u[3], 0.0, out + 3)
    else:
        _rotate(x + 3, x[7], x[8], x[9], out)
        out[0] += p[6]
        out[1] += p[7]
        out[2] += p[8]
        _qdot(x + 3, x[10], x[11], x[12], out + 3)
        # M v x w and J w x w, both divided by the diagonal
        a0 = p[0] * x[7]
        a1 = p[1] * x[8]
        a2 = p[2] * x[9]
        out[7] = (a1 * x[12] - a2 * x[11] + p[9] * u[0]) / p[0]
        out[8] = (a2 * x[10] - a0 * x[12]) / p[1]
        out[9] = (a0 * x[11] - a1 * x[10] + p[9] * u[1]) / p[2]
        a0 = p[3] * x[10]
        a1 = p[4] * x[11]
        a2 = p[5] * x[12]
        out[10] = (a1 * x[12] - a2 * x[11] + p[10] * u[2]) / p[3]
        out[11] = (a2 * x[10] - a0 * x[12] + p[10] * u[3]) / p[4]
        out[12] = (a0 * x[11] - a1 * x[10]) / p[5]


cdef struct CostSpec:
    int n
    const double* Q
    int kind
    const double* target
    int npos
    const long* rows
    int nobs
    const double* motion
    const double* shape


cdef double _ell(CostSpec* c, const double* x, double t) noexcept nogil:
    cdef double e[NMAX]
    cdef double val = 0.0, rad, d2, diff, d, ctr
    cdef int i, j, k, m
    cdef const double* mo
    for i in range(c.n):
        e[i] = x[i]
    if c.kind == 1:
        rad = 20.0 + 10.0 * cos(t / 5.0)
        e[0] -= cos(3.0 * t / 10.0) * rad
        e[1] -= sin(3.0 * t / 10.0) * rad
        e[2] -= 10.0 * sin(2.0 * t / 5.0)
    else:
        for i in range(c.n):
            e[i] -= c.target[i]
    for i in range(c.n):
        for j in range(c.n):
            val += 0.5 * e[i] * c.Q[i * c.n + j] * e[j]
    m = c.npos
    for k in range(c.nobs):
        mo = c.motion + k * 5 * m
        d2 = DIST_SMOOTHING * DIST_SMOOTHING
        for i in range(m):
            ctr = mo[i] + mo[m + i] * t + mo[2*m + i] * sin(mo[3*m + i] * t + mo[4*m + i])
            diff = x[c.rows[i]] - ctr
            d2 += diff * diff
        d = sqrt(d2)
        val += c.shape[3*k + 1] * exp(-c.shape[3*k + 2] * (d - c.shape[3*k]))
    return val


cdef inline void _normalize(int code, double* x) noexcept nogil:
    cdef double nrm
    cdef int i
    if code == 1 or code == 2:
        nrm = sqrt(x[3]*x[3] + x[4]*x[4] + x[5]*x[5] + x[6]*x[6])
        for i in range(3, 7):
            x[i] /= nrm


def rollout(
    int model_code, const double[::1] mparams, const double[::1] x0, double t0, double dt, int n,
    const double[::1] v, const double[::1] u, double t_on, double t_off,
    const double[:, ::1] qmat, int target_kind, const double[::1] target, const long[::1] pos_rows,
    const double[:, :, ::1] obs_motion, const double[:, ::1] obs_shape,
):
    cdef int N = x0.shape[0]
    if N > NMAX:
        raise ValueError("state too large for the compiled kernel")
    if model_code < 0 or model_code > 2:
        raise ValueError(f"unknown kernel id {model_code}")
    states_arr = np.empty((n + 1, N))
    derivs_arr = np.empty((n + 1, N))
    cdef double[:, ::1] states = states_arr
    cdef double[:, ::1] derivs = derivs_arr
    cdef double x[NMAX]
    cdef double xs[NMAX]
    cdef double k1[NMAX]
    cdef double k2[NMAX]
    cdef double k3[NMAX]
    cdef double k4[NMAX]
    cdef double cuts[4]
    cdef double pad[1]
    cdef double total = 0.0, comp = 0.0, inc, tsum, t, a, b, h, tm, c1, c2, c3, c4, s
    cdef int i, k, ncut, piece
    cdef bint ok = True
    cdef const double* w
    cdef const double* p = &mparams[0] if mparams.shape[0] > 0 else pad
    cdef CostSpec c
    c.n = N
    c.Q = &qmat[0, 0]
    c.kind = target_kind
    c.target = &target[0]
    c.npos = pos_rows.shape[0]
    c.rows = &pos_rows[0] if pos_rows.shape[0] > 0 else NULL
    c.nobs = obs_shape.shape[0]
    c.motion = &obs_motion[0, 0, 0] if c.nobs > 0 else NULL
    c.shape = &obs_shape[0, 0] if c.nobs > 0 else NULL
    cdef const double* vp = &v[0]
    cdef const double* up = &u[0]
    cdef double lo_s = t_on if t_on < t_off else t_off
    cdef double hi_s = t_off if t_on < t_off else t_on

    for i in range(N):
        x[i] = x0[i]
        states[0, i] = x[i]
    with nogil:
        for k in range(n):
            t = t0 + k * dt
            w = up if (t_on <= t and t < t_off) else vp
            _dyn(model_code, p, x, w, k1)
            for i in range(N):
                derivs[k, i] = k1[i]
            ncut = 0
            cuts[0] = t
            ncut = 1
            if t < lo_s and lo_s < t + dt:
                cuts[ncut] = lo_s
                ncut += 1
            if t < hi_s and hi_s < t + dt and hi_s != cuts[ncut - 1]:
                cuts[ncut] = hi_s
                ncut += 1
            cuts[ncut] = t + dt
            for piece in range(ncut):
                a = cuts[piece]
                b = cuts[piece + 1]
                h = b - a
                tm = 0.5 * (a + b)
                w = up if (t_on <= tm and tm < t_off) else vp
                _dyn(model_code, p, x, w, k1)
                c1 = _ell(&c, x, a)
                for i in range(N):
                    xs[i] = x[i] + 0.5 * h * k1[i]
                _dyn(model_code, p, xs, w, k2)
                c2 = _ell(&c, xs, a + 0.5 * h)
                for i in range(N):
                    xs[i] = x[i] + 0.5 * h * k2[i]
                _dyn(model_code, p, xs, w, k3)
                c3 = _ell(&c, xs, a + 0.5 * h)
                for i in range(N):
                    xs[i] = x[i] + h * k3[i]
                _dyn(model_code, p, xs, w, k4)
                c4 = _ell(&c, xs, b)
                for i in range(N):
                    x[i] = x[i] + (h / 6.0) * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])
                # compensated sum: cost differences between rollouts sit far below J
                inc = (h / 6.0) * (c1 + 2 * c2 + 2 * c3 + c4)
                tsum = total + inc
                if fabs(total) >= fabs(inc):
                    comp += (total - tsum) + inc
                else:
                    comp += (inc - tsum) + total
                total = tsum
            _normalize(model_code, x)
            s = total
            for i in range(N):
                s += x[i]
            if not isfinite(s):
                ok = False
                break
            for i in range(N):
                states[k + 1, i] = x[i]
        if ok:
            tm = t0 + n * dt
            w = up if (t_on <= tm and tm < t_off) else vp
            _dyn(model_code, p, x, w, k1)
            for i in range(N):
                derivs[n, i] = k1[i]
    if not ok:
        states_arr[k + 1:] = np.nan
        derivs_arr[k:] = np.nan
    return states_arr, derivs_arr, total + comp, ok


def sweep_rho(const double[:, :, ::1] A, const double[:, ::1] b, const double[::1] rho_end, const double[::1] steps):
    cdef int n = (A.shape[0] - 1) // 2
    cdef int N = rho_end.shape[0]
    out_arr = np.empty((n + 1, N))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] kk = np.empty((4, N))
    cdef double[::1] y = np.array(rho_end, dtype=float)
    cdef double[::1] ys = np.empty(N)
    cdef int k, i, j, st, idx
    cdef double h, acc, fac, s
    cdef int bad = -1
    out[n, :] = y
    with nogil:
        for k in range(n - 1, -1, -1):
            h = steps[k]
            for st in range(4):
                if st == 0:
                    idx = 2 * k + 2
                    fac = 0.0
                elif st == 3:
                    idx = 2 * k
                    fac = h
                else:
                    idx = 2 * k + 1
                    fac = 0.5 * h
                for i in range(N):
                    ys[i] = y[i] - fac * kk[st - 1, i] if st > 0 else y[i]
                for i in range(N):
                    acc = -b[idx, i]
                    for j in range(N):
                        acc -= A[idx, j, i] * ys[j]
                    kk[st, i] = acc
            s = 0.0
            for i in range(N):
                y[i] = y[i] - (h / 6.0) * (kk[0, i] + 2 * kk[1, i] + 2 * kk[2, i] + kk[3, i])
                s += y[i]
                out[k, i] = y[i]
            if not isfinite(s):
                bad = k
                break
    if bad >= 0:
        out_arr[: bad + 1] = np.nan
    return out_arr


def sweep_omega(const double[:, :, ::1] A, const double[:, :, ::1] C, const double[:, ::1] omega_end, const double[::1] steps):
    cdef int n = (A.shape[0] - 1) // 2
    cdef int N = omega_end.shape[0]
    out_arr = np.empty((n + 1, N, N))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] kk = np.empty((4, N, N))
    cdef double[:, ::1] y = np.empty((N, N))
    cdef double[:, ::1] ys = np.empty((N, N))
    cdef double[:, ::1] AtO = np.empty((N, N))
    cdef int k, i, j, l, st, idx
    cdef double h, acc, fac, s
    cdef int bad = -1
    for i in range(N):
        for j in range(N):
            y[i, j] = 0.5 * (omega_end[i, j] + omega_end[j, i])
    out[n, :, :] = y
    with nogil:
        for k in range(n - 1, -1, -1):
            h = steps[k]
            for st in range(4):
                if st == 0:
                    idx = 2 * k + 2
                    fac = 0.0
                elif st == 3:
                    idx = 2 * k
                    fac = h
                else:
                    idx = 2 * k + 1
                    fac = 0.5 * h
                for i in range(N):
                    for j in range(N):
                        ys[i, j] = y[i, j] - fac * kk[st - 1, i, j] if st > 0 else y[i, j]
                for i in range(N):
                    for j in range(N):
                        acc = 0.0
                        for l in range(N):
                            acc += A[idx, l, i] * ys[l, j]
                        AtO[i, j] = acc
                for i in range(N):
                    for j in range(N):
                        kk[st, i, j] = -AtO[i, j] - AtO[j, i] - C[idx, i, j]
            s = 0.0
            for i in range(N):
                for j in range(N):
                    ys[i, j] = y[i, j] - (h / 6.0) * (kk[0, i, j] + 2 * kk[1, i, j] + 2 * kk[2, i, j] + kk[3, i, j])
            for i in range(N):
                for j in range(N):
                    y[i, j] = 0.5 * (ys[i, j] + ys[j, i])
                    s += y[i, j]
                    out[k, i, j] = y[i, j]
            if not isfinite(s):
                bad = k
                break
    if bad >= 0:
        out_arr[: bad + 1] = np.nan
    return out_arr
