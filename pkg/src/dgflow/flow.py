"""Integrators for distributed gradient flow and the penalized flow.

Both dynamics have the form ``x' = -kappa(t) Q x - w(t) v(x)`` with ``v`` a
subgradient selection of the objective: ``kappa = beta, w = alpha`` for DGF
on ``Q = L (x) I_d`` and ``kappa = gamma, w = 1`` for the penalized flow.
The stepper integrates the linear part exactly along Q's eigenmodes (the
decay exponent is the exact integral of ``kappa`` over the step) and treats
``v`` explicitly (exponential midpoint, or fourth-order ETD on request),
with step-doubling error control.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from . import kernels
from .graph import CommGraph, PenaltyMatrix, laplacian, lift_penalty
from .objective import (
    ScalarField, SeparableObjective, min_norm_point, min_norm_subgrad_estimate, restrict,
)
from .schedule import Exponential, PowerLaw, WeightSchedule, constant, time_change

STATUS_NAMES = {
    kernels.STATUS_OK: "ok",
    kernels.STATUS_BLOWUP: "blowup",
    kernels.STATUS_EXITED: "exited",
    kernels.STATUS_UNDERFLOW: "underflow",
    kernels.STATUS_MAXSTEPS: "max_steps",
}


class NumericalError(RuntimeError):
    """Integration failure; ``trajectory`` holds the knots computed so far."""

    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


class BlowUp(NumericalError):
    pass


class StepUnderflow(NumericalError):
    pass


@dataclass(frozen=True)
class IntegrationOptions:
    """Stepper settings.

    ``order`` 2 is the exponential midpoint rule, 4 is Cox-Matthews ETD.
    ``exit_radius > 0`` stops integration once ``||x - exit_center||``
    exceeds it (status ``"exited"``). ``backend`` is ``"compiled"``,
    ``"python"`` or None for automatic selection.
    """

    rtol: float = 1e-6
    atol: float = 1e-9
    max_step: float = 0.5
    min_step: float = 1e-12
    h0: Optional[float] = None
    order: int = 2
    blowup: float = 1e8
    max_store: int = 10_000
    max_steps: int = 50_000_000
    exit_center: Optional[tuple] = None
    exit_radius: float = 0.0
    backend: Optional[str] = None
    raise_on_failure: bool = True
    diagnostics: bool = True

    def kernel_kwargs(self) -> dict:
        return dict(rtol=self.rtol, atol=self.atol, max_step=self.max_step,
                    min_step=self.min_step, h0=self.h0, order=self.order, blowup=self.blowup,
                    max_store=self.max_store, max_steps=self.max_steps,
                    exit_center=None if self.exit_center is None else np.asarray(self.exit_center, float),
                    exit_radius=self.exit_radius)


class CallableCurve:
    """Adapter for an arbitrary weight function ``t -> gamma(t)``.

    Step integrals use 8-point Gauss-Legendre quadrature, so ``gamma`` should
    be smooth on each step. Only the pure-Python backend accepts it.
    """

    _nodes, _weights = np.polynomial.legendre.leggauss(8)

    def __init__(self, func: Callable[[float], float]):
        self.func = func

    def __call__(self, t):
        return self.func(t)

    def integral(self, a, b):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return half * sum(w * float(self.func(mid + half * s)) for s, w in zip(self._nodes, self._weights))


def as_curve(gamma) -> object:
    """Accept a schedule curve, a constant, or a plain callable."""
    if isinstance(gamma, (PowerLaw, Exponential, CallableCurve)):
        return gamma
    if np.isscalar(gamma):
        return constant(float(gamma))
    if callable(gamma):
        return CallableCurve(gamma)
    raise TypeError(f"cannot interpret {gamma!r} as a weight function")


@dataclass(frozen=True, eq=False)
class FlowProblem:
    """An objective, a penalty matrix, weights and an initial condition.

    DGF problems carry ``schedule`` and ``graph`` (``Q = L (x) I_d``);
    penalized problems carry ``gamma``.
    """

    objective: ScalarField
    penalty: PenaltyMatrix
    x0: np.ndarray
    t0: float
    t_end: float
    schedule: Optional[WeightSchedule] = None
    gamma: Optional[object] = None
    graph: Optional[CommGraph] = None

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).ravel()
        object.__setattr__(self, "x0", x0)
        M = x0.size
        if self.objective.dim != M or self.penalty.dim != M:
            raise ValueError(f"dimension mismatch: objective {self.objective.dim}, "
                             f"penalty {self.penalty.dim}, x0 {M}")
        if not np.all(np.isfinite(x0)):
            raise ValueError("x0 must be finite")
        if not self.t_end > self.t0:
            raise ValueError("need t_end > t0")
        if (self.schedule is None) == (self.gamma is None):
            raise ValueError("give exactly one of schedule (DGF) or gamma (penalized)")

    @property
    def is_dgf(self) -> bool:
        return self.schedule is not None

    @property
    def dim(self) -> int:
        return self.x0.size


def dgf_problem(objective: SeparableObjective, graph: CommGraph, schedule: WeightSchedule,
                x0, t0: float = 0.0, t_end: float = 100.0) -> FlowProblem:
    if not isinstance(objective, SeparableObjective):
        raise TypeError("DGF needs a SeparableObjective")
    if objective.N != graph.num_agents:
        raise ValueError(f"objective has {objective.N} agents, graph has {graph.num_agents}")
    Q = lift_penalty(laplacian(graph), objective.d)
    return FlowProblem(objective, Q, x0, t0, t_end, schedule=schedule, graph=graph)


def penalized_problem(h: ScalarField, Q: PenaltyMatrix, gamma, x0, t0: float = 0.0,
                      t_end: float = 10.0) -> FlowProblem:
    return FlowProblem(h, Q, x0, t0, t_end, gamma=as_curve(gamma))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Stored knots of one integration plus per-knot diagnostics.

    ``consensus_err`` is ``max_n ||x_n - mean||`` for DGF and the distance to
    the constraint set otherwise. ``h_restricted`` is ``h`` at the projection
    ``x_c`` onto the constraint set; ``subgrad_residual`` is the norm of the
    projected subgradient selection there. ``dt`` is the step that produced
    each knot.
    """

    times: np.ndarray
    states: np.ndarray
    consensus_err: np.ndarray
    h_restricted: np.ndarray
    subgrad_residual: np.ndarray
    dt: np.ndarray
    status: str = "ok"
    nsteps: int = 0
    nrejected: int = 0
    nfev: int = 0
    backend: str = ""
    clock: str = "t"

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    def resample(self, grid) -> "Trajectory":
        """Linear interpolation of states and diagnostics onto ``grid``."""
        grid = np.asarray(grid, dtype=float)
        interp = lambda y: np.interp(grid, self.times, y)  # noqa: E731
        states = np.column_stack([interp(self.states[:, i]) for i in range(self.states.shape[1])])
        return replace(self, times=grid, states=states,
                       consensus_err=interp(self.consensus_err),
                       h_restricted=interp(self.h_restricted),
                       subgrad_residual=interp(self.subgrad_residual), dt=interp(self.dt))

    def state_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.states[:, i]) for i in range(self.states.shape[1])])

    def to_csv(self, path) -> None:
        M = self.states.shape[1]
        header = ",".join(["t"] + [f"x_{i + 1}" for i in range(M)]
                          + ["consensus_err", "h_restricted", "subgrad_residual", "dt"])
        data = np.column_stack([self.times, self.states, self.consensus_err,
                                self.h_restricted, self.subgrad_residual, self.dt])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def constraint_projection(problem: FlowProblem, X: np.ndarray) -> np.ndarray:
    return np.atleast_2d(X) @ (problem.penalty.nullspace_basis @ problem.penalty.nullspace_basis.T)


def knot_diagnostics(problem: FlowProblem, X: np.ndarray):
    """Per-row constraint error, ``h(x_c)`` and projected selection residual."""
    X = np.atleast_2d(X)
    B = problem.penalty.nullspace_basis
    Xc = (X @ B) @ B.T
    obj = problem.objective
    hval = np.array([obj.value(x) for x in Xc])
    G = obj.grad_batch(Xc)
    if problem.is_dgf:
        N, d = obj.N, obj.d
        blocks = X.reshape(len(X), N, d)
        cons = np.max(np.linalg.norm(blocks - blocks.mean(axis=1, keepdims=True), axis=2), axis=1)
        # residual of f = sum_n f_n at the agent average
        res = np.linalg.norm(G.reshape(len(X), N, d).sum(axis=1), axis=1)
    else:
        cons = np.linalg.norm(X - Xc, axis=1)
        res = np.linalg.norm(G @ B, axis=1)
    return cons, hval, res


def _run(problem: FlowProblem, lin, weight, t0, t_end, x0, opts: IntegrationOptions, clock: str,
         time_map=None) -> Trajectory:
    Q = problem.penalty
    backend = opts.backend
    if backend is None and not kernels.compiled_supported(problem.objective):
        backend = "python"
    if isinstance(lin, CallableCurve) or isinstance(weight, CallableCurve):
        backend = "python"
    T, X, D, status, nsteps, nrej, nfev = kernels.integrate_modes(
        problem.objective, Q.eigvecs, Q.eigvals, lin, weight, x0, t0, t_end,
        backend=backend, **opts.kernel_kwargs())
    if time_map is not None:
        T = time_map(T)
        D = np.concatenate([[0.0], np.diff(T)])
    n = len(T)
    if opts.diagnostics and status != kernels.STATUS_BLOWUP:
        cons, hval, res = knot_diagnostics(problem, X)
    elif opts.diagnostics:
        ok = np.all(np.isfinite(X), axis=1) & (np.max(np.abs(X), axis=1) <= opts.blowup)
        cons, hval, res = (np.full(n, np.nan) for _ in range(3))
        if np.any(ok):
            c, hv, r = knot_diagnostics(problem, X[ok])
            cons[ok], hval[ok], res[ok] = c, hv, r
    else:
        cons = hval = res = np.full(n, np.nan)
    traj = Trajectory(T, X, cons, hval, res, D, STATUS_NAMES[status], int(nsteps), int(nrej),
                      int(nfev), backend or kernels.BACKEND, clock)
    if opts.raise_on_failure:
        if status == kernels.STATUS_BLOWUP:
            raise BlowUp(f"|x| exceeded {opts.blowup:g} at t = {T[-1]:.6g}", traj)
        if status == kernels.STATUS_UNDERFLOW:
            raise StepUnderflow(f"step fell below {opts.min_step:g} at t = {T[-1]:.6g}", traj)
        if status == kernels.STATUS_MAXSTEPS:
            raise NumericalError(f"step budget exhausted at t = {T[-1]:.6g}", traj)
    return traj


def integrate_penalized(h: ScalarField, Q: PenaltyMatrix, gamma, x0, t0: float, t_end: float,
                        opts: Optional[IntegrationOptions] = None) -> Trajectory:
    """Integrate ``x' in -dh(x) - gamma(t) Q x`` on ``[t0, t_end]``."""
    problem = penalized_problem(h, Q, gamma, x0, t0, t_end)
    return integrate_problem(problem, opts)


def integrate_dgf(problem: FlowProblem, opts: Optional[IntegrationOptions] = None,
                  clock: str = "direct") -> Trajectory:
    """Integrate ``x_n' = beta_t sum_{l in nbrs(n)} (x_l - x_n) - alpha_t v_n``.

    ``clock="direct"`` steps in ``t``. ``clock="alpha_clock"`` integrates the
    single-weight form ``y' = -gamma(T(tau)) Q y - v(y)`` in
    ``tau = int alpha`` and maps the knots back to ``t``.
    """
    if not problem.is_dgf:
        raise ValueError("integrate_dgf needs a DGF problem (with a schedule)")
    opts = opts or IntegrationOptions()
    s = problem.schedule
    if clock == "direct":
        return _run(problem, s.beta, s.alpha, problem.t0, problem.t_end, problem.x0, opts, "t")
    if clock == "alpha_clock":
        tc = time_change(s, "alpha_clock")
        tau0, tau1 = float(tc.forward(problem.t0)), float(tc.forward(problem.t_end))
        # max_step applies on the clock that is being stepped
        return _run(problem, tc.linear_coef, tc.weight, tau0, tau1, problem.x0, opts, "t",
                    time_map=lambda T: np.asarray(tc.inverse(T), dtype=float))
    raise ValueError(f"unknown clock {clock!r}")


def integrate_problem(problem: FlowProblem, opts: Optional[IntegrationOptions] = None,
                      clock: str = "direct") -> Trajectory:
    opts = opts or IntegrationOptions()
    if problem.is_dgf:
        return integrate_dgf(problem, opts, clock)
    return _run(problem, problem.gamma, constant(1.0), problem.t0, problem.t_end, problem.x0,
                opts, "t")


@dataclass
class ConvergenceReport:
    constraint_error: float
    tail_oscillation: float
    subgrad_residual: float
    converged_to_point: bool
    tail_displacement: float
    nearest_critical_point: Optional[tuple] = None
    nearest_kind: Optional[str] = None
    nearest_distance: Optional[float] = None
    x_c: np.ndarray = field(default=None, repr=False)

    def as_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "x_c"}
        out["x_c"] = None if self.x_c is None else [float(v) for v in self.x_c]
        return out


def run_convergence_report(traj: Trajectory, problem: FlowProblem, catalog_name: Optional[str] = None,
                           residual_radius: float = 1e-6, match_radius: float = 0.1) -> ConvergenceReport:
    """Summarize how close a trajectory ended to a critical point of ``h|_C``.

    The tail oscillation is ``max - min`` of ``h(x_c)`` over the last 20% of
    the window; "converged to a point" means the state moved less than 1e-4
    over the last 10%. For DGF the residual is that of ``f = sum_n f_n`` at
    the agent average; otherwise it is that of ``h|_C`` at ``x_c``.
    """
    t0, t1 = traj.times[0], traj.times[-1]
    x_end = traj.final
    Xc = constraint_projection(problem, x_end)[0]
    cons, _, _ = knot_diagnostics(problem, x_end)
    tail = traj.times >= t1 - 0.2 * (t1 - t0)
    hvals = traj.h_restricted[tail]
    osc = float(np.nanmax(hvals) - np.nanmin(hvals)) if np.any(np.isfinite(hvals)) else math.nan
    x_late = traj.state_at(t1 - 0.1 * (t1 - t0))
    disp = float(np.linalg.norm(x_end - x_late))
    obj = problem.objective
    if problem.is_dgf:
        xbar = Xc[: obj.d]
        res = min_norm_subgrad_estimate(obj.sum_field(), xbar, radius=residual_radius)
        point = xbar
    else:
        rf = restrict(obj, problem.penalty)
        res = min_norm_subgrad_estimate(rf, problem.penalty.nullspace_basis.T @ Xc, radius=residual_radius)
        point = Xc
    rep = ConvergenceReport(float(cons[0]), osc, float(res), disp < 1e-4, disp, x_c=Xc)
    if catalog_name is not None:
        from .catalog import known_critical_points

        best = None
        for cp in known_critical_points(catalog_name, obj):
            loc = np.asarray(cp.location, dtype=float)
            if loc.size != point.size:
                continue
            dist = float(np.linalg.norm(point - loc))
            if best is None or dist < best[0]:
                best = (dist, cp)
        if best is not None and best[0] <= match_radius:
            rep.nearest_critical_point = tuple(best[1].location)
            rep.nearest_kind = best[1].kind
            rep.nearest_distance = best[0]
    return rep


def subgrad_residual_hull(field: ScalarField, x) -> float:
    """Exact min-norm element of the declared Clarke subdifferential at ``x``."""
    return float(np.linalg.norm(min_norm_point(field.piece_gradients(x))))
