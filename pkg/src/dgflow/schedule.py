"""Weight schedules (alpha_t, beta_t, gamma_t) and clock changes.

All weights are exact power laws ``c * (offset + t) ** p`` (or exponentials,
which arise from the alpha-clock when ``tau_alpha = 1``), so every quantity the
integrators need -- value, derivative, antiderivative, inverse clock -- is
closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

POWER, EXPONENTIAL = 0, 1


class ScheduleError(ValueError):
    pass


class ExponentOrder(ScheduleError):
    pass


class OutOfRange(ScheduleError):
    pass


@dataclass(frozen=True)
class PowerLaw:
    """``t -> c * (offset + t) ** p``."""

    c: float
    p: float
    offset: float = 0.0

    kind = POWER

    def __post_init__(self):
        if self.p < 0 and self.offset <= 0:
            raise OutOfRange("negative exponent needs a positive offset")

    def __call__(self, t):
        return self.c * np.power(self.offset + np.asarray(t, dtype=float), self.p)

    def derivative(self, t):
        if self.p == 0:
            return np.zeros_like(np.asarray(t, dtype=float))
        return self.c * self.p * np.power(self.offset + np.asarray(t, dtype=float), self.p - 1)

    def antiderivative(self, t):
        s = self.offset + np.asarray(t, dtype=float)
        if self.p == -1:
            return self.c * np.log(s)
        return self.c * np.power(s, self.p + 1) / (self.p + 1)

    def integral(self, a, b):
        # (o+a)^{p+1} expm1((p+1) log1p(h/(o+a))) / (p+1): no cancellation at large t
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        sa = self.offset + a
        if np.any(sa <= 0):
            return self.antiderivative(b) - self.antiderivative(a)
        r = np.log1p((b - a) / sa)
        if self.p == -1:
            return self.c * r
        return self.c * np.power(sa, self.p + 1) * np.expm1((self.p + 1) * r) / (self.p + 1)

    def advance(self, a, u):
        """``s`` with ``integral(a, s) = u`` (``u >= 0``, ``c > 0``)."""
        sa = self.offset + a
        if self.p == -1:
            return a + sa * math.expm1(u / self.c)
        x = u * (self.p + 1) / (self.c * sa ** (self.p + 1))
        return a + sa * math.expm1(math.log1p(x) / (self.p + 1))

    def kernel_args(self) -> tuple:
        return (POWER, float(self.c), float(self.p), float(self.offset))


@dataclass(frozen=True)
class Exponential:
    """``t -> c * exp(rate * t)``."""

    c: float
    rate: float

    kind = EXPONENTIAL

    def __call__(self, t):
        return self.c * np.exp(self.rate * np.asarray(t, dtype=float))

    def derivative(self, t):
        return self.rate * self(t)

    def integral(self, a, b):
        if self.rate == 0:
            return self.c * (np.asarray(b, dtype=float) - a)
        # c/r * e^{ra} * expm1(r(b-a)) keeps precision for short intervals
        a = np.asarray(a, dtype=float)
        return self.c / self.rate * np.exp(self.rate * a) * np.expm1(self.rate * (np.asarray(b) - a))

    def advance(self, a, u):
        """``s`` with ``integral(a, s) = u``."""
        if self.rate == 0:
            return a + u / self.c
        return a + math.log1p(u * self.rate / (self.c * math.exp(self.rate * a))) / self.rate

    def kernel_args(self) -> tuple:
        return (EXPONENTIAL, float(self.c), float(self.rate), 0.0)


def constant(value: float = 1.0) -> PowerLaw:
    return PowerLaw(float(value), 0.0, 1.0)


@dataclass(frozen=True)
class WeightSchedule:
    """``alpha_t = c_alpha (t_offset + t)^-tau_alpha``, likewise ``beta_t``."""

    c_alpha: float
    tau_alpha: float
    c_beta: float
    tau_beta: float
    t_offset: float = 1.0

    @property
    def alpha(self) -> PowerLaw:
        return PowerLaw(self.c_alpha, -self.tau_alpha, self.t_offset)

    @property
    def beta(self) -> PowerLaw:
        return PowerLaw(self.c_beta, -self.tau_beta, self.t_offset)

    @property
    def gamma(self) -> PowerLaw:
        """``beta_t / alpha_t``."""
        return PowerLaw(self.c_beta / self.c_alpha, self.tau_alpha - self.tau_beta, self.t_offset)

    def gamma_dot(self, t):
        return self.gamma.derivative(t)


def make_schedule(c_alpha: float = 1.0, tau_alpha: float = 0.6, c_beta: float = 1.0,
                  tau_beta: float = 0.1, t_offset: float = 1.0) -> WeightSchedule:
    """Validated schedule; requires ``0 <= tau_beta < tau_alpha <= 1``."""
    vals = dict(c_alpha=c_alpha, tau_alpha=tau_alpha, c_beta=c_beta,
                tau_beta=tau_beta, t_offset=t_offset)
    for k, v in vals.items():
        if not np.isfinite(v):
            raise OutOfRange(f"{k} must be finite, got {v}")
    if tau_beta >= tau_alpha:
        raise ExponentOrder(
            f"Assumption A.6 violated: need tau_beta < tau_alpha, got "
            f"tau_beta={tau_beta}, tau_alpha={tau_alpha}")
    if not (0 <= tau_beta and tau_alpha <= 1):
        raise OutOfRange(
            f"Assumption A.6 violated: need 0 <= tau_beta < tau_alpha <= 1, got "
            f"tau_beta={tau_beta}, tau_alpha={tau_alpha}")
    if c_alpha <= 0 or c_beta <= 0:
        raise OutOfRange("c_alpha and c_beta must be positive")
    if t_offset <= 0:
        raise OutOfRange("t_offset must be positive")
    return WeightSchedule(float(c_alpha), float(tau_alpha), float(c_beta),
                          float(tau_beta), float(t_offset))


@dataclass(frozen=True)
class TimeChange:
    """Clock ``tau = S(t) = int_0^t w(r) dr`` with ``w`` = alpha or beta.

    ``linear_coef`` and ``weight`` give the consensus and descent weights of
    the dynamics expressed on the new clock:
    ``dy/dtau = -linear_coef(tau) Q y - weight(tau) v(y)``.
    """

    kind: str
    schedule: WeightSchedule
    linear_coef: object
    weight: object

    def _rate(self):
        s = self.schedule
        return (s.c_alpha, s.tau_alpha) if self.kind == "alpha_clock" else (s.c_beta, s.tau_beta)

    def forward(self, t):
        c, tau = self._rate()
        o = self.schedule.t_offset
        t = np.asarray(t, dtype=float)
        if tau == 1:
            return c * (np.log(o + t) - math.log(o))
        return c * (np.power(o + t, 1 - tau) - o ** (1 - tau)) / (1 - tau)

    def inverse(self, s):
        c, tau = self._rate()
        o = self.schedule.t_offset
        s = np.asarray(s, dtype=float)
        if tau == 1:
            return o * np.expm1(s / c)
        return np.power(o ** (1 - tau) + (1 - tau) * s / c, 1 / (1 - tau)) - o


def time_change(s: WeightSchedule, kind: str = "alpha_clock") -> TimeChange:
    """Closed-form alpha- or beta-clock for a power-law schedule."""
    o = s.t_offset
    a, b = s.tau_alpha, s.tau_beta
    if kind == "alpha_clock":
        # gamma(T(tau)) is again a power law in tau (exponential when a = 1)
        if a == 1:
            lin = Exponential(s.c_beta / s.c_alpha * o ** (1 - b), (1 - b) / s.c_alpha)
        else:
            p = (a - b) / (1 - a)
            lin = PowerLaw((s.c_beta / s.c_alpha) * ((1 - a) / s.c_alpha) ** p, p,
                           s.c_alpha * o ** (1 - a) / (1 - a))
        return TimeChange(kind, s, lin, constant(1.0))
    if kind == "beta_clock":
        p = (b - a) / (1 - b)
        w = PowerLaw((s.c_alpha / s.c_beta) * ((1 - b) / s.c_beta) ** p, p,
                     s.c_beta * o ** (1 - b) / (1 - b))
        return TimeChange(kind, s, constant(1.0), w)
    raise ValueError(f"unknown clock {kind!r}")


def reparametrize_trajectory(traj, tc: TimeChange, grid=None, inverse: bool = False):
    """Express a trajectory on another clock.

    With ``inverse=False`` knot times ``t`` map to ``S(t)``; with
    ``inverse=True`` knot times ``tau`` map back to ``T(tau)``. If ``grid`` is
    given, states are linearly interpolated onto it (in the new clock).
    """
    new_times = tc.inverse(traj.times) if inverse else tc.forward(traj.times)
    out = replace(traj, times=np.asarray(new_times, dtype=float))
    if grid is None:
        return out
    return out.resample(np.asarray(grid, dtype=float))
