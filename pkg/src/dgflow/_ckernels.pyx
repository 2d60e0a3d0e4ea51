# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ETD stepper and linear recurrences.

Mirrors ``_pykernels`` for the catalog objectives whose gradients have a
kernel code (see ``objective.K_*``). The step loop runs without the GIL so
that independent integrations can share a thread pool.
"""
import numpy as np

from libc.math cimport exp, expm1, log1p, pow, fabs, sqrt, isfinite
from libc.stdlib cimport malloc, free

DEF K_ZERO = 0
DEF K_QUADRATIC = 1
DEF K_QUARTIC = 2
DEF K_ABS = 3
DEF K_SADDLE3D = 4
DEF K_QUADFORM = 5

DEF POWER = 0
DEF EXPONENTIAL = 1

DEF KINK_TOL = 1e-14
DEF SERIES_CUT = 0.5
DEF SERIES_TERMS = 18
DEF CLOCK_RATIO = 4.0


cdef struct Curve:
    int kind
    double c
    double p
    double offset


cdef struct System:
    int kind
    int M
    const double* P
    const double* V
    const double* q
    bint identity
    Curve lin
    Curve wt
    double* xbuf
    double* gbuf
    long nfev


cdef inline double curve_value(const Curve* cv, double t) noexcept nogil:
    if cv.kind == POWER:
        return cv.c * pow(cv.offset + t, cv.p)
    return cv.c * exp(cv.p * t)


cdef inline double curve_integral(const Curve* cv, double a, double b) noexcept nogil:
    cdef double sa, r
    if cv.kind == POWER:
        sa = cv.offset + a
        if sa <= 0.0:
            return cv.c * (pow(cv.offset + b, cv.p + 1.0) - pow(sa if sa > 0.0 else 0.0, cv.p + 1.0)) / (cv.p + 1.0)
        r = log1p((b - a) / sa)
        if cv.p == -1.0:
            return cv.c * r
        return cv.c * pow(sa, cv.p + 1.0) * expm1((cv.p + 1.0) * r) / (cv.p + 1.0)
    if cv.p == 0.0:
        return cv.c * (b - a)
    return cv.c / cv.p * exp(cv.p * a) * expm1(cv.p * (b - a))


cdef inline double curve_advance(const Curve* cv, double a, double u) noexcept nogil:
    """``s`` with ``integral(a, s) = u``."""
    cdef double sa
    if cv.kind == POWER:
        sa = cv.offset + a
        if cv.p == -1.0:
            return a + sa * expm1(u / cv.c)
        return a + sa * expm1(log1p(u * (cv.p + 1.0) / (cv.c * pow(sa, cv.p + 1.0))) / (cv.p + 1.0))
    if cv.p == 0.0:
        return a + u / cv.c
    return a + log1p(u * cv.p / (cv.c * exp(cv.p * a))) / cv.p


cdef struct Clock:
    double K      # int kappa over the step
    double H      # stage weight: K on the local clock, h when frozen
    double tm     # stage midpoint in t
    double s0, sm, s1   # 1/kappa at t, tm, t+h (or 1 when frozen)


cdef inline Clock step_clock(const Curve* cv, double t, double h) noexcept nogil:
    # stages run on tau = int kappa, where the decay rate is constant
    cdef Clock ck
    cdef double k0 = curve_value(cv, t), k1 = curve_value(cv, t + h)
    cdef double lo = k0 if k0 < k1 else k1, hi = k1 if k0 < k1 else k0
    ck.K = curve_integral(cv, t, t + h)
    if cv.c > 0.0 and lo > 0.0 and hi <= CLOCK_RATIO * lo:
        ck.H = ck.K
        ck.tm = curve_advance(cv, t, 0.5 * ck.K)
        ck.s0 = 1.0 / k0
        ck.sm = 1.0 / curve_value(cv, ck.tm)
        ck.s1 = 1.0 / k1
    else:
        ck.H = h
        ck.tm = t + 0.5 * h
        ck.s0 = ck.sm = ck.s1 = 1.0
    return ck


cdef inline void phis(double z, double* e, double* p1, double* p2, double* p3) noexcept nogil:
    cdef double term, s1, s2, s3, f1, f2, f3, em1
    cdef int j
    e[0] = exp(z)
    if fabs(z) < SERIES_CUT:
        term = 1.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        f1 = 1.0
        f2 = 2.0
        f3 = 6.0
        for j in range(SERIES_TERMS):
            s1 += term / f1
            s2 += term / f2
            s3 += term / f3
            term *= z
            f1 *= j + 2
            f2 *= j + 3
            f3 *= j + 4
        p1[0] = s1
        p2[0] = s2
        p3[0] = s3
    else:
        em1 = expm1(z)
        p1[0] = em1 / z
        p2[0] = (em1 - z) / (z * z)
        p3[0] = (em1 - z - 0.5 * z * z) / (z * z * z)


cdef void gradient(System* s, const double* x, double* g) noexcept nogil:
    cdef int i, j, M = s.M
    cdef double r, tol, w, acc
    s.nfev += 1
    if s.kind == K_ZERO:
        for i in range(M):
            g[i] = 0.0
    elif s.kind == K_QUADRATIC:
        for i in range(M):
            g[i] = x[i] - s.P[i]
    elif s.kind == K_QUARTIC:
        for i in range(M):
            g[i] = x[i] * x[i] * x[i] - x[i] + s.P[i]
    elif s.kind == K_ABS:
        for i in range(M):
            r = x[i] - s.P[i]
            tol = KINK_TOL * (fabs(s.P[i]) if fabs(s.P[i]) > 1.0 else 1.0)
            if fabs(r) <= tol:
                g[i] = 0.0
            elif r > 0:
                g[i] = 1.0
            else:
                g[i] = -1.0
    elif s.kind == K_SADDLE3D:
        w = 1.0 + x[2]
        g[0] = 0.5 * (2 * x[0] + 2 * x[0] * x[1] + x[1] * x[1]) * w
        g[1] = 0.5 * (-2 * x[1] + x[0] * x[0] + 2 * x[0] * x[1]) * w
        g[2] = 0.5 * (x[0] * x[0] - x[1] * x[1] + x[0] * x[0] * x[1] + x[0] * x[1] * x[1]) + 1.0
    elif s.kind == K_QUADFORM:
        for i in range(M):
            acc = s.P[i * (M + 1) + M]
            for j in range(M):
                acc += s.P[i * (M + 1) + j] * x[j]
            g[i] = acc


cdef void nonlin(System* s, const double* xi, double t, double* out) noexcept nogil:
    """``out = -w(t) V^T grad(V xi)``."""
    cdef int i, j, M = s.M
    cdef double w = curve_value(&s.wt, t), acc
    if s.identity:
        gradient(s, xi, out)
        for i in range(M):
            out[i] = -w * out[i]
        return
    for i in range(M):
        acc = 0.0
        for j in range(M):
            acc += s.V[i * M + j] * xi[j]
        s.xbuf[i] = acc
    gradient(s, s.xbuf, s.gbuf)
    for i in range(M):
        acc = 0.0
        for j in range(M):
            acc += s.V[j * M + i] * s.gbuf[j]
        out[i] = -w * acc


cdef void etd2(System* s, const double* xi, double t, double h, double* out, double* work) noexcept nogil:
    cdef int i, M = s.M
    cdef double* n0 = work
    cdef double* xa = work + M
    cdef Clock ck = step_clock(&s.lin, t, h)
    cdef double ea, p1a, e, p1, d2, d3
    nonlin(s, xi, t, n0)
    for i in range(M):
        phis(-s.q[i] * 0.5 * ck.K, &ea, &p1a, &d2, &d3)
        xa[i] = ea * xi[i] + 0.5 * ck.H * p1a * ck.s0 * n0[i]
    nonlin(s, xa, ck.tm, n0)
    for i in range(M):
        phis(-s.q[i] * ck.K, &e, &p1, &d2, &d3)
        out[i] = e * xi[i] + ck.H * p1 * ck.sm * n0[i]


cdef void etd4(System* s, const double* xi, double t, double h, double* out, double* work) noexcept nogil:
    cdef int i, M = s.M
    cdef double* n0 = work
    cdef double* na = work + M
    cdef double* nb = work + 2 * M
    cdef double* nc = work + 3 * M
    cdef double* a = work + 4 * M
    cdef double* b = work + 5 * M
    cdef double* c = work + 6 * M
    cdef Clock ck = step_clock(&s.lin, t, h)
    cdef double H = ck.H
    cdef double ea, p1a, e, p1, p2, p3, d2, d3
    nonlin(s, xi, t, n0)
    for i in range(M):
        n0[i] *= ck.s0
        phis(-s.q[i] * 0.5 * ck.K, &ea, &p1a, &d2, &d3)
        a[i] = ea * xi[i] + 0.5 * H * p1a * n0[i]
    nonlin(s, a, ck.tm, na)
    for i in range(M):
        na[i] *= ck.sm
        phis(-s.q[i] * 0.5 * ck.K, &ea, &p1a, &d2, &d3)
        b[i] = ea * xi[i] + 0.5 * H * p1a * na[i]
    nonlin(s, b, ck.tm, nb)
    for i in range(M):
        nb[i] *= ck.sm
        phis(-s.q[i] * 0.5 * ck.K, &ea, &p1a, &d2, &d3)
        c[i] = ea * a[i] + 0.5 * H * p1a * (2.0 * nb[i] - n0[i])
    nonlin(s, c, t + h, nc)
    for i in range(M):
        nc[i] *= ck.s1
        phis(-s.q[i] * ck.K, &e, &p1, &p2, &p3)
        out[i] = e * xi[i] + H * ((p1 - 3.0 * p2 + 4.0 * p3) * n0[i]
                                  + 2.0 * (p2 - 2.0 * p3) * (na[i] + nb[i])
                                  + (4.0 * p3 - p2) * nc[i])


cdef inline double norm2(const double* v, int M) noexcept nogil:
    cdef double acc = 0.0
    cdef int i
    for i in range(M):
        acc += v[i] * v[i]
    return sqrt(acc)


cdef Curve _curve(tuple args):
    cdef Curve cv
    cv.kind = <int>args[0]
    cv.c = <double>args[1]
    cv.p = <double>args[2]
    cv.offset = <double>args[3]
    return cv


def integrate_modes(int kind, const double[::1] params, const double[:, ::1] V, const double[::1] q,
                    tuple lin, tuple weight, const double[::1] x0, double t0, double t_end,
                    double rtol=1e-6, double atol=1e-9, double max_step=0.5,
                    double min_step=1e-12, h0=None, int order=2, double blowup=1e8,
                    long max_store=10000, exit_center=None, double exit_radius=0.0,
                    long max_steps=50000000):
    """Compiled counterpart of ``_pykernels.integrate_modes``.

    ``kind`` selects the gradient kernel and ``params`` its flat parameter
    array; ``lin`` and ``weight`` are ``(kind, c, p_or_rate, offset)``.
    """
    cdef int M = x0.shape[0], i, j
    cdef System s
    cdef const double[::1] Vflat = np.ascontiguousarray(V).ravel()
    cdef const double[::1] center = np.zeros(M) if exit_center is None else np.ascontiguousarray(exit_center, dtype=float)
    cdef bint use_exit = exit_center is not None and exit_radius > 0
    cdef double[:, ::1] store = np.empty((max_store + 2, M))
    cdef double[::1] st = np.empty(max_store + 2)
    cdef double[::1] sdt = np.empty(max_store + 2)
    cdef const double[::1] pbuf = params if params.shape[0] > 0 else np.zeros(1)
    cdef double* mem = <double*>malloc(sizeof(double) * M * 16)
    cdef double* xi = mem
    cdef double* full = mem + M
    cdef double* half = mem + 2 * M
    cdef double* two = mem + 3 * M
    cdef double* xout = mem + 4 * M
    cdef double* work = mem + 5 * M
    cdef double t = t0, span = t_end - t0, h, hh, err, scale, ratio, grow, nx, acc, dist
    cdef double store_dt, next_store, denom = pow(2.0, order) - 1.0
    cdef long nstore = 0, nsteps = 0, nrej = 0
    cdef int status = 0
    cdef bint last, bad, exited
    if mem == NULL:
        raise MemoryError()
    s.kind = kind
    s.M = M
    s.P = &pbuf[0]
    s.V = &Vflat[0]
    s.q = &q[0]
    s.identity = bool(np.array_equal(np.asarray(V), np.eye(M)))
    s.lin = _curve(lin)
    s.wt = _curve(weight)
    s.xbuf = mem + 12 * M
    s.gbuf = mem + 13 * M
    s.nfev = 0
    h = min(max_step, span) if h0 is None else min(<double>h0, max_step)
    store_dt = span / (max_store - 1 if max_store > 1 else 1)
    next_store = t + store_dt
    try:
        with nogil:
            # xi = V^T x0
            for i in range(M):
                if s.identity:
                    xi[i] = x0[i]
                else:
                    acc = 0.0
                    for j in range(M):
                        acc += s.V[j * M + i] * x0[j]
                    xi[i] = acc
            st[0] = t
            sdt[0] = 0.0
            for i in range(M):
                store[0, i] = x0[i]
            nstore = 1
            while t < t_end:
                if nsteps + nrej >= max_steps:
                    status = 4
                    break
                last = t + h >= t_end
                hh = (t_end - t) if last else h
                if order == 4:
                    etd4(&s, xi, t, hh, full, work)
                    etd4(&s, xi, t, 0.5 * hh, half, work)
                    etd4(&s, half, t + 0.5 * hh, 0.5 * hh, two, work)
                else:
                    etd2(&s, xi, t, hh, full, work)
                    etd2(&s, xi, t, 0.5 * hh, half, work)
                    etd2(&s, half, t + 0.5 * hh, 0.5 * hh, two, work)
                err = 0.0
                for i in range(M):
                    err += (two[i] - full[i]) * (two[i] - full[i])
                err = sqrt(err) / denom
                nx = norm2(xi, M)
                scale = norm2(two, M)
                scale = atol + rtol * (nx if nx > scale else scale)
                ratio = err / scale if isfinite(err) else 1e300
                if ratio > 1.0:
                    nrej += 1
                    h = 0.5 * hh
                    if h < min_step:
                        status = 3
                        break
                    continue
                nsteps += 1
                for i in range(M):
                    xi[i] = two[i]
                if last:
                    t = t_end
                else:
                    t = t + hh
                    grow = 2.0 if ratio == 0 else 0.9 * pow(ratio, -1.0 / (order + 1))
                    if grow > 2.0:
                        grow = 2.0
                    if grow < 1.0:
                        grow = 1.0
                    h = hh * grow
                    if h > max_step:
                        h = max_step
                bad = False
                for i in range(M):
                    if s.identity:
                        xout[i] = xi[i]
                    else:
                        acc = 0.0
                        for j in range(M):
                            acc += s.V[i * M + j] * xi[j]
                        xout[i] = acc
                    if not isfinite(xout[i]) or fabs(xout[i]) > blowup:
                        bad = True
                exited = False
                if use_exit and not bad:
                    dist = 0.0
                    for i in range(M):
                        dist += (xout[i] - center[i]) * (xout[i] - center[i])
                    exited = sqrt(dist) > exit_radius
                if (t >= next_store or last or bad or exited) and nstore < max_store + 2:
                    st[nstore] = t
                    sdt[nstore] = hh
                    for i in range(M):
                        store[nstore, i] = xout[i]
                    nstore += 1
                    while next_store <= t:
                        next_store += store_dt
                if bad:
                    status = 1
                    break
                if exited:
                    status = 2
                    break
    finally:
        free(mem)
    return (np.asarray(st[:nstore]).copy(), np.asarray(store[:nstore]).copy(),
            np.asarray(sdt[:nstore]).copy(), status, nsteps, nrej, s.nfev)


def forward_recurrence(const double[:, ::1] decay, const double[:, ::1] src, const double[::1] init):
    """``out[0] = init``; ``out[k+1] = decay[k] * out[k] + src[k]``."""
    cdef Py_ssize_t K = decay.shape[0], m = decay.shape[1], k, i
    out_arr = np.empty((K + 1, m))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(m):
            out[0, i] = init[i]
        for k in range(K):
            for i in range(m):
                out[k + 1, i] = decay[k, i] * out[k, i] + src[k, i]
    return out_arr


def backward_recurrence(const double[:, ::1] decay, const double[:, ::1] src):
    """``out[K] = 0``; ``out[k] = decay[k] * out[k+1] + src[k]``."""
    cdef Py_ssize_t K = decay.shape[0], m = decay.shape[1], k, i
    out_arr = np.zeros((K + 1, m))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for k in range(K - 1, -1, -1):
            for i in range(m):
                out[k, i] = decay[k, i] * out[k + 1, i] + src[k, i]
    return out_arr
