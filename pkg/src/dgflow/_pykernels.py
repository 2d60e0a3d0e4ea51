"""Pure-Python reference kernels.

Same algorithms as the compiled ``_ckernels`` module, but with the
nonlinear term supplied as an arbitrary gradient callable. Selected
automatically when the extension is missing or disabled.
"""
from __future__ import annotations

import math

import numpy as np

STATUS_OK, STATUS_BLOWUP, STATUS_EXITED, STATUS_UNDERFLOW, STATUS_MAXSTEPS = 0, 1, 2, 3, 4

CLOCK_RATIO = 4.0
_SERIES_CUT = 0.5
_SERIES_TERMS = 18


def phi_functions(z):
    """``exp(z), phi1(z), phi2(z), phi3(z)`` elementwise.

    ``phi_k(z) = sum_j z^j / (j + k)!``; a truncated series is used near 0
    where the closed forms cancel.
    """
    z = np.asarray(z, dtype=float)
    e = np.exp(z)
    small = np.abs(z) < _SERIES_CUT
    with np.errstate(divide="ignore", invalid="ignore"):
        em1 = np.expm1(z)
        p1 = em1 / z
        p2 = (em1 - z) / z ** 2
        p3 = (em1 - z - 0.5 * z ** 2) / z ** 3
    if np.any(small):
        zs = z[small]
        s1 = np.zeros_like(zs)
        s2 = np.zeros_like(zs)
        s3 = np.zeros_like(zs)
        term = np.ones_like(zs)
        for j in range(_SERIES_TERMS):
            s1 += term / math.factorial(j + 1)
            s2 += term / math.factorial(j + 2)
            s3 += term / math.factorial(j + 3)
            term = term * zs
        p1 = np.where(small, 0, p1)
        p2 = np.where(small, 0, p2)
        p3 = np.where(small, 0, p3)
        p1[small], p2[small], p3[small] = s1, s2, s3
    return e, p1, p2, p3


class _ModeSystem:
    """``xi' = -kappa(t) q xi + n(xi, t)`` in Q's eigenbasis."""

    def __init__(self, grad, V, q, lin, weight):
        self.grad = grad
        self.V = np.asarray(V, dtype=float)
        self.identity = np.array_equal(self.V, np.eye(self.V.shape[0]))
        self.q = np.asarray(q, dtype=float)
        self.lin = lin
        self.weight = weight
        self.nfev = 0

    def to_x(self, xi):
        return xi if self.identity else self.V @ xi

    def to_xi(self, x):
        return x if self.identity else self.V.T @ x

    def nonlin(self, xi, t):
        self.nfev += 1
        g = np.asarray(self.grad(self.to_x(xi)), dtype=float)
        return -float(self.weight(t)) * self.to_xi(g)

    def etd2(self, xi, t, h):
        K, H, mid, scale = self._clock(t, h)
        ea, p1a, _, _ = phi_functions(-self.q * 0.5 * K)
        e, p1, _, _ = phi_functions(-self.q * K)
        n0 = self.nonlin(xi, t) * scale(t)
        xa = ea * xi + 0.5 * H * p1a * n0
        na = self.nonlin(xa, mid) * scale(mid)
        return e * xi + H * p1 * na

    def etd4(self, xi, t, h):
        # Cox-Matthews ETDRK4
        K, H, tm, scale = self._clock(t, h)
        ea, p1a, _, _ = phi_functions(-self.q * 0.5 * K)
        e, p1, p2, p3 = phi_functions(-self.q * K)
        n0 = self.nonlin(xi, t) * scale(t)
        a = ea * xi + 0.5 * H * p1a * n0
        na = self.nonlin(a, tm) * scale(tm)
        b = ea * xi + 0.5 * H * p1a * na
        nb = self.nonlin(b, tm) * scale(tm)
        c = ea * a + 0.5 * H * p1a * (2.0 * nb - n0)
        nc = self.nonlin(c, t + h) * scale(t + h)
        f1 = p1 - 3.0 * p2 + 4.0 * p3
        f2 = p2 - 2.0 * p3
        f3 = 4.0 * p3 - p2
        return e * xi + H * (f1 * n0 + 2.0 * f2 * (na + nb) + f3 * nc)

    def _clock(self, t, h):
        """``(K, H, t_mid, scale)`` for one step.

        Stages run on the local clock ``tau = int kappa`` where the decay
        rate is constant: ``K = H`` is the clock length, ``t_mid`` the clock
        midpoint, and ``scale = 1/kappa``. Without a closed-form inverse, or
        when ``kappa`` varies by more than ``CLOCK_RATIO`` over the step (as
        next to a zero of ``kappa``), the rate is frozen over the step instead.
        """
        K = float(self.lin.integral(t, t + h))
        if hasattr(self.lin, "advance") and self.lin.c > 0:
            k0, k1 = float(self.lin(t)), float(self.lin(t + h))
            if min(k0, k1) > 0 and max(k0, k1) <= CLOCK_RATIO * min(k0, k1):
                mid = float(self.lin.advance(t, 0.5 * K))
                return K, K, mid, lambda s: 1.0 / float(self.lin(s))
        return K, h, t + 0.5 * h, lambda s: 1.0


def integrate_modes(grad, V, q, lin, weight, x0, t0, t_end, *, rtol=1e-6, atol=1e-9,
                    max_step=0.5, min_step=1e-12, h0=None, order=2, blowup=1e8,
                    max_store=10_000, exit_center=None, exit_radius=0.0,
                    max_steps=50_000_000):
    """Adaptive ETD integration of ``x' = -lin(t) Q x - weight(t) grad(x)``.

    ``Q = V diag(q) V^T``. Local error comes from step doubling and is
    measured as ``||x_half - x_full|| / (2^p - 1)`` against
    ``atol + rtol * ||x||``. Returns ``(times, states, dts, status, nsteps,
    nreject, nfev)``.
    """
    sysm = _ModeSystem(grad, V, q, lin, weight)
    step = sysm.etd4 if order == 4 else sysm.etd2
    denom = 2.0 ** order - 1.0
    xi = sysm.to_xi(np.asarray(x0, dtype=float).copy())
    t = float(t0)
    span = float(t_end) - t
    h = min(max_step, span) if h0 is None else min(float(h0), max_step)
    store_dt = span / max(int(max_store) - 1, 1)
    next_store = t + store_dt
    times, states, dts = [t], [sysm.to_x(xi).copy()], [0.0]
    center = None if exit_center is None else np.asarray(exit_center, dtype=float)
    status = STATUS_OK
    nsteps = nrej = 0
    while t < t_end:
        if nsteps + nrej >= max_steps:
            status = STATUS_MAXSTEPS
            break
        last = t + h >= t_end
        hh = (t_end - t) if last else h
        full = step(xi, t, hh)
        half = step(xi, t, 0.5 * hh)
        two = step(half, t + 0.5 * hh, 0.5 * hh)
        err = float(np.linalg.norm(two - full)) / denom
        scale = atol + rtol * max(float(np.linalg.norm(xi)), float(np.linalg.norm(two)))
        ratio = err / scale if np.isfinite(err) else np.inf
        if ratio > 1.0:
            nrej += 1
            h = 0.5 * hh
            if h < min_step:
                status = STATUS_UNDERFLOW
                break
            continue
        nsteps += 1
        xi = two
        t = float(t_end) if last else t + hh
        if not last:
            grow = 2.0 if ratio == 0 else min(2.0, 0.9 * ratio ** (-1.0 / (order + 1)))
            h = min(max_step, hh * max(grow, 1.0))
        x = sysm.to_x(xi)
        bad = not np.all(np.isfinite(x)) or float(np.max(np.abs(x))) > blowup
        exited = (not bad) and exit_radius > 0 and center is not None and \
            float(np.linalg.norm(x - center)) > exit_radius
        if t >= next_store or last or bad or exited:
            times.append(t)
            states.append(x.copy())
            dts.append(hh)
            while next_store <= t:
                next_store += store_dt
        if bad:
            status = STATUS_BLOWUP
            break
        if exited:
            status = STATUS_EXITED
            break
    return (np.array(times), np.array(states), np.array(dts), status, nsteps, nrej, sysm.nfev)


def forward_recurrence(decay, src, init):
    """``out[0] = init``; ``out[k+1] = decay[k] * out[k] + src[k]`` (rows are knots)."""
    decay = np.asarray(decay, dtype=float)
    src = np.asarray(src, dtype=float)
    out = np.empty((decay.shape[0] + 1, decay.shape[1]))
    out[0] = init
    for k in range(decay.shape[0]):
        out[k + 1] = decay[k] * out[k] + src[k]
    return out


def backward_recurrence(decay, src):
    """``out[K] = 0``; ``out[k] = decay[k] * out[k+1] + src[k]``."""
    decay = np.asarray(decay, dtype=float)
    src = np.asarray(src, dtype=float)
    out = np.zeros((decay.shape[0] + 1, decay.shape[1]))
    for k in range(decay.shape[0] - 1, -1, -1):
        out[k] = decay[k] * out[k + 1] + src[k]
    return out
