"""Time-dependent stable manifolds of saddles of the penalized flow.

Pipeline: recentering curve ``g(gamma)`` (critical points of the penalized
objective near the saddle), linearization ``A(t)`` along ``g(gamma_t)`` with a
continuously tracked eigenbasis ``U(t)``, exponential propagators of the
diagonal part, Picard iteration of the variation-of-constants equation in
the rotated, recentered coordinates ``z = U(t) (x - g(gamma_t))``, and the
chart ``a_s -> psi(a_s)`` it induces at a fixed initial time.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .flow import IntegrationOptions, NumericalError, integrate_problem, penalized_problem
from .graph import PenaltyMatrix
from .objective import TOL_EIG, ScalarField, classify_critical_point, restrict
from .schedule import WeightSchedule


class ManifoldError(RuntimeError):
    pass


class NewtonDiverged(ManifoldError):
    pass


class SingularJacobian(ManifoldError):
    pass


class EigenMatchAmbiguous(ManifoldError):
    pass


class SplitNotFound(ManifoldError):
    pass


class NoContraction(ManifoldError):
    pass


class TailBoundTooLarge(ManifoldError):
    pass


def _gamma_curve(schedule):
    """Accept a WeightSchedule (uses ``beta / alpha``) or a curve with ``derivative``."""
    if isinstance(schedule, WeightSchedule):
        return schedule.gamma
    if not hasattr(schedule, "derivative"):
        raise TypeError("schedule must be a WeightSchedule or a curve with a derivative")
    return schedule


def _grad_rows(h: ScalarField, X: np.ndarray) -> np.ndarray:
    return np.asarray(h.grad_batch(np.atleast_2d(X)), dtype=float)


# ---------------------------------------------------------------------------
# recentering curve


@dataclass(frozen=True, eq=False)
class RecenterCurve:
    """``g(gamma)`` solving ``grad h(g) + gamma Q g = 0`` near the saddle."""

    gamma_grid: np.ndarray
    points: np.ndarray
    derivative: np.ndarray
    residuals: np.ndarray
    x_star: np.ndarray

    def at(self, gamma: float):
        """Point and derivative at ``gamma`` (exact knot or linear interpolation)."""
        gg = self.gamma_grid
        k = int(np.searchsorted(gg, gamma))
        if k < len(gg) and gg[k] == gamma:
            return self.points[k], self.derivative[k]
        interp = lambda Y: np.array([np.interp(gamma, gg, Y[:, i]) for i in range(Y.shape[1])])  # noqa: E731
        return interp(self.points), interp(self.derivative)


def _newton(h, Q, gamma, x, tol, max_iter=50):
    Qm = Q.entries
    for _ in range(max_iter):
        F = h.subgrad(x) + gamma * (Qm @ x)
        J = h.hessian(x) + gamma * Qm
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"Jacobian singular at gamma = {gamma:g}") from exc
        if not np.all(np.isfinite(dx)):
            raise NewtonDiverged(f"non-finite Newton step at gamma = {gamma:g}")
        x = x + dx
        if np.linalg.norm(dx) <= 1e-15 * max(1.0, np.linalg.norm(x)):
            break
    F = h.subgrad(x) + gamma * (Qm @ x)
    res = float(np.linalg.norm(F))
    if not res <= tol:
        raise NewtonDiverged(f"residual {res:.3e} > {tol:.1e} at gamma = {gamma:g}")
    return x, res


def solve_recenter_curve(h: ScalarField, Q: PenaltyMatrix, x_star, gamma_grid,
                         tol: float = 1e-10) -> RecenterCurve:
    """Newton continuation from the largest ``gamma`` down to the smallest.

    ``g'(gamma) = -[hess h(g) + gamma Q]^{-1} Q g`` by implicit differentiation.
    """
    gg = np.asarray(gamma_grid, dtype=float)
    if gg.ndim != 1 or gg.size == 0 or np.any(np.diff(gg) <= 0):
        raise ValueError("gamma_grid must be strictly increasing")
    x_star = np.asarray(x_star, dtype=float)
    pts = np.empty((gg.size, x_star.size))
    der = np.empty_like(pts)
    res = np.empty(gg.size)
    x = x_star.copy()
    for k in range(gg.size - 1, -1, -1):
        x, r = _newton(h, Q, gg[k], x, tol)
        J = h.hessian(x) + gg[k] * Q.entries
        if np.linalg.cond(J) > 1e14:
            raise SingularJacobian(f"Jacobian near-singular at gamma = {gg[k]:g}")
        pts[k], res[k] = x, r
        der[k] = -np.linalg.solve(J, Q.entries @ x)
    return RecenterCurve(gg, pts, der, res, x_star)


# ---------------------------------------------------------------------------
# eigenbasis tracking


def _procrustes_align(V_new: np.ndarray, V_prev: np.ndarray) -> np.ndarray:
    """Rotate the columns of ``V_new`` (same span) to best match ``V_prev``."""
    W, _, Zt = np.linalg.svd(V_new.T @ V_prev)
    return V_new @ (W @ Zt)


def _clusters(w: np.ndarray, tol: float):
    groups, start = [], 0
    for i in range(1, w.size + 1):
        if i == w.size or w[i] - w[i - 1] > tol * max(1.0, abs(w[i])):
            groups.append(list(range(start, i)))
            start = i
    return groups


def match_eigenbasis(V_prev: np.ndarray, w_new: np.ndarray, V_new: np.ndarray,
                     margin_tol: float = 0.5, cluster_tol: float = 1e-10):
    """Reorder and sign-fix the columns of ``V_new`` to follow ``V_prev``.

    Degenerate clusters are first Procrustes-aligned to the previous frame;
    columns are then assigned greedily by maximum overlap. Returns the
    matched ``(w, V, margin)``; raises :class:`EigenMatchAmbiguous` when some
    column's best overlap beats its runner-up by less than ``margin_tol``.
    """
    V_new = V_new.copy()
    for grp in _clusters(w_new, cluster_tol):
        if len(grp) > 1:
            sub = V_new[:, grp]
            # project the previous frame onto the cluster span, then align
            P = sub @ (sub.T @ V_prev)
            cols = np.argsort(-np.linalg.norm(P, axis=0))[: len(grp)]
            V_new[:, grp] = _procrustes_align(sub, V_prev[:, np.sort(cols)])
    O = np.abs(V_prev.T @ V_new)
    m = O.shape[0]
    perm = -np.ones(m, dtype=int)
    work = O.copy()
    for _ in range(m):
        i, j = np.unravel_index(np.argmax(work), work.shape)
        perm[i] = j
        work[i, :] = -1.0
        work[:, j] = -1.0
    margin = np.inf
    for i in range(m):
        row = np.delete(O[i], perm[i])
        runner = row.max() if row.size else 0.0
        margin = min(margin, O[i, perm[i]] - runner)
    if margin < margin_tol:
        raise EigenMatchAmbiguous(f"eigenvector overlap margin {margin:.3f} < {margin_tol}")
    V = V_new[:, perm]
    signs = np.sign(np.einsum("ij,ij->j", V_prev, V))
    signs[signs == 0] = 1.0
    return w_new[perm], V * signs, float(margin)


def track_eigenbasis(mats: Sequence[np.ndarray], margin_tol: float = 0.5):
    """Continuous eigen-decomposition of a sequence of symmetric matrices.

    Returns ``(W, V, margins)`` with ``W[k]`` eigenvalues and ``V[k]`` the
    matching eigenvector columns; the first knot is sorted ascending.
    """
    n = len(mats)
    M = mats[0].shape[0]
    W = np.empty((n, M))
    V = np.empty((n, M, M))
    margins = np.full(n, np.inf)
    w0, V0 = np.linalg.eigh(0.5 * (mats[0] + mats[0].T))
    W[0], V[0] = w0, V0
    for k in range(1, n):
        w, Vk = np.linalg.eigh(0.5 * (mats[k] + mats[k].T))
        W[k], V[k], margins[k] = match_eigenbasis(V[k - 1], w, Vk, margin_tol)
    return W, V, margins


def eigenvector_limit_spread(field: ScalarField, center, radii=(0.2, 0.15, 0.1, 0.07),
                             angles: int = 12) -> np.ndarray:
    """Spread of Hessian eigenframes over a circle of each radius.

    For every radius, the leading (largest ``|lambda|``) eigenvector is
    computed at ``angles`` points of the circle; the spread is
    ``1 - min |<v_i, v_j>|``. A continuous eigenframe at ``center`` makes
    the spread vanish as the radius shrinks; a spread that stays O(1) flags
    a discontinuity.
    """
    center = np.asarray(center, dtype=float)
    out = []
    for r in radii:
        vecs = []
        for th in np.linspace(0, 2 * np.pi, angles, endpoint=False):
            p = center.copy()
            p[0] += r * math.cos(th)
            p[1] += r * math.sin(th)
            w, V = np.linalg.eigh(field.hessian(p))
            vecs.append(V[:, np.argmax(np.abs(w))])
        G = np.abs(np.array(vecs) @ np.array(vecs).T)
        out.append(1.0 - float(G.min()))
    return np.array(out)


def detect_eigenvector_discontinuity(field: ScalarField, center, radii=(0.2, 0.15, 0.1, 0.07),
                                     threshold: float = 0.5) -> dict:
    spread = eigenvector_limit_spread(field, center, radii)
    return {"radii": list(radii), "spread": spread.tolist(),
            "discontinuous": bool(spread[-1] > threshold)}


# ---------------------------------------------------------------------------
# linearization


@dataclass(frozen=True, eq=False)
class Linearization:
    """``A(t) = -(hess h(g(gamma_t)) + gamma_t Q)`` and its tracked diagonal form.

    Rows of ``U[k]`` are eigenvectors: ``U A U^T = diag(Lambda)``. The first
    ``n_s`` entries are the stable ones (ascending at the split time).
    """

    time_grid: np.ndarray
    gammas: np.ndarray
    gamma_dot: np.ndarray
    A: np.ndarray
    U: np.ndarray
    Lambda: np.ndarray
    n_s: int
    split_index: int
    g: np.ndarray
    g_prime: np.ndarray
    margins: np.ndarray

    @property
    def T_split(self) -> float:
        return float(self.time_grid[self.split_index])

    @property
    def M(self) -> int:
        return self.A.shape[1]

    @property
    def E(self) -> np.ndarray:
        """Cumulative trapezoid integral of ``Lambda`` from the first knot."""
        dt = np.diff(self.time_grid)[:, None]
        inc = 0.5 * dt * (self.Lambda[1:] + self.Lambda[:-1])
        return np.vstack([np.zeros((1, self.M)), np.cumsum(inc, axis=0)])

    def E_at(self, t: float) -> np.ndarray:
        """Integral of the piecewise-linear ``Lambda`` up to ``t``."""
        tg = self.time_grid
        k = int(np.clip(np.searchsorted(tg, t, side="right") - 1, 0, len(tg) - 2))
        s = t - tg[k]
        lam_t = self.Lambda[k] + (self.Lambda[k + 1] - self.Lambda[k]) * s / (tg[k + 1] - tg[k])
        return self.E[k] + 0.5 * s * (self.Lambda[k] + lam_t)

    def U_dot(self) -> np.ndarray:
        return np.gradient(self.U, self.time_grid, axis=0)

    def diagonalization_error(self) -> float:
        rec = np.einsum("kji,kj,kjl->kil", self.U, self.Lambda, self.U)
        return float(np.max(np.abs(rec - self.A)))

    def orthonormality_error(self) -> float:
        I = np.eye(self.M)
        return float(np.max(np.abs(np.einsum("kij,klj->kil", self.U, self.U) - I)))

    def continuity_constant(self) -> float:
        """``max_k ||U_{k+1} - U_k|| / dt_k``."""
        dU = np.linalg.norm(np.diff(self.U, axis=0), axis=(1, 2))
        return float(np.max(dU / np.diff(self.time_grid))) if len(dU) else 0.0


def linearize(h: ScalarField, Q: PenaltyMatrix, schedule, x_star, time_grid,
              tol_eig: float = TOL_EIG, margin_tol: float = 0.5,
              recenter: Optional[RecenterCurve] = None) -> Linearization:
    """Linearize the penalized flow along ``g(gamma_t)`` on ``time_grid``."""
    gam = _gamma_curve(schedule)
    tg = np.asarray(time_grid, dtype=float)
    if tg.ndim != 1 or tg.size < 2 or np.any(np.diff(tg) <= 0):
        raise ValueError("time_grid must be strictly increasing with at least 2 knots")
    gammas = np.asarray(gam(tg), dtype=float)
    if np.any(np.diff(gammas) <= 0):
        raise ValueError("gamma must be increasing on the time grid")
    rc = recenter if recenter is not None else solve_recenter_curve(h, Q, x_star, gammas)
    G = np.array([rc.at(g)[0] for g in gammas])
    Gp = np.array([rc.at(g)[1] for g in gammas])
    A = np.array([-(h.hessian(G[k]) + gammas[k] * Q.entries) for k in range(tg.size)])
    A = 0.5 * (A + np.transpose(A, (0, 2, 1)))
    W, V, margins = track_eigenbasis(A, margin_tol)
    # split: first knot after which every eigenvalue keeps its sign, |lambda| >= 2 tol
    sign = np.sign(W[-1])
    good = np.all(np.abs(W) >= 2 * tol_eig, axis=1) & np.all(np.sign(W) == sign, axis=1)
    if not good[-1] or (tg.size > 1 and not good[-2]):
        raise SplitNotFound("spectrum not sign-stable at the end of the time grid")
    split = tg.size - 1
    while split > 0 and good[split - 1]:
        split -= 1
    stable = np.flatnonzero(sign < 0)
    unstable = np.flatnonzero(sign > 0)
    stable = stable[np.argsort(W[split, stable], kind="stable")]
    unstable = unstable[np.argsort(W[split, unstable], kind="stable")]
    order = np.concatenate([stable, unstable])
    W = W[:, order]
    U = np.transpose(V[:, :, order], (0, 2, 1))
    return Linearization(tg, gammas, np.asarray(gam.derivative(tg), dtype=float), A, U, W,
                         int(stable.size), int(split), G, Gp, margins)


def eigen_asymptotics(lin: Linearization, h: ScalarField, Q: PenaltyMatrix, x_star) -> dict:
    """Compare final-knot eigenvalues with ``B = -hess(h|_C)(x*)``.

    The ``d = dim C`` tracked eigenvalues closest to ``eig(B)`` are paired with
    them; the rest are reported as multiples of ``-gamma``.
    """
    rf = restrict(h, Q)
    y = Q.nullspace_basis.T @ np.asarray(x_star, dtype=float)
    B = -rf.hessian(y)
    wB = np.sort(np.linalg.eigvalsh(0.5 * (B + B.T)))
    lam = lin.Lambda[-1]
    gamma = lin.gammas[-1]
    # the M - d eigenvalues that diverge are the most negative ones
    d = wB.size
    idx = np.argsort(lam)
    diverging = idx[: lam.size - d]
    finite = np.sort(lam[idx[lam.size - d:]])
    return {
        "gamma": float(gamma), "B_eigenvalues": wB.tolist(), "finite": finite.tolist(),
        "finite_error": (np.abs(finite - wB)).tolist(),
        "diverging": lam[diverging].tolist(),
        "diverging_ratio": (lam[diverging] / gamma).tolist(),
    }


# ---------------------------------------------------------------------------
# propagators and constants


def propagators(lin: Linearization, t1: float, t2: float):
    """Diagonal ``(V^s(t2, t1), V^u(t2, t1))``: exponentials of the integrated
    stable / unstable eigenvalues, zero on the complementary block."""
    dE = lin.E_at(t2) - lin.E_at(t1)
    ns = lin.n_s
    vs = np.zeros(lin.M)
    vu = np.zeros(lin.M)
    vs[:ns] = np.exp(dE[:ns])
    vu[ns:] = np.exp(dE[ns:])
    return np.diag(vs), np.diag(vu)


@dataclass(frozen=True)
class Constants:
    K: float
    nu: float
    sigma: float


def measure_constants(lin: Linearization, start: int = 0) -> Constants:
    """``nu``, ``sigma`` from the spectrum on knots ``start:`` and the smallest
    ``K`` with ``|V^s(t2,t1)| <= K e^{-(nu+sigma)(t2-t1)}`` and
    ``|V^u(t2,t1)| <= K e^{sigma(t2-t1)}`` on the grid (running extrema)."""
    L = lin.Lambda[start:]
    ns = lin.n_s
    t = lin.time_grid[start:]
    E = lin.E[start:]
    nu = 0.5 * float(np.min(np.abs(L[:, :ns]))) if ns else math.inf
    sigma = 0.5 * float(np.min(L[:, ns:])) if ns < lin.M else math.inf
    logK = 0.0
    if ns:
        c = (nu + sigma) if np.isfinite(sigma) else nu
        S = E[:, :ns] + c * t[:, None]
        logK = max(logK, float(np.max(S - np.minimum.accumulate(S, axis=0))))
    if ns < lin.M:
        S = E[:, ns:] - sigma * t[:, None]
        # t2 <= t1: E(t2) - E(t1) - sigma (t2 - t1) = S(t2) - S(t1)
        logK = max(logK, float(np.max(np.maximum.accumulate(S, axis=0) - S)))
    return Constants(math.exp(logK), nu, sigma)


# ---------------------------------------------------------------------------
# Picard iteration


def _psi_a(z):
    """``(e^z - 1) / z``."""
    return kernels.phi_functions(z)[1]


def _psi_b(z):
    """``(e^z (z - 1) + 1) / z^2 = int_0^1 s e^{zs} ds``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 0.5
    zs = z[small]
    acc = np.zeros_like(zs)
    term = np.ones_like(zs)
    for j in range(20):
        acc += term / (math.factorial(j) * (j + 2))
        term = term * zs
    out[small] = acc
    zl = z[~small]
    out[~small] = (np.exp(zl) * (zl - 1.0) + 1.0) / zl ** 2
    return out


# |lambda| h below which finite differences of u track Lambda u + G
_RESOLVED_STEP = 0.05


@dataclass(frozen=True)
class PicardOptions:
    max_iter: int = 200
    tol: float = 1e-10
    divergence_factor: float = 1e3
    tail_tol: float = 1e-10


@dataclass(frozen=True, eq=False)
class PicardSolution:
    times: np.ndarray
    u: np.ndarray
    a_s: np.ndarray
    iterations: int
    increment: float
    residual: float
    tail_bound: float
    derivative_error: float

    @property
    def psi(self) -> np.ndarray:
        return self.u[0, len(self.a_s):]


class _PicardOperator:
    """The discretized right-hand side of the integral equation.

    Per segment, ``Lambda`` is replaced by its mean (exact integral of the
    trapezoid exponent) and the forcing ``G`` by its linear interpolant;
    both integrals are then exact.
    """

    def __init__(self, h: ScalarField, lin: Linearization):
        self.h = h
        self.lin = lin
        self.t = lin.time_grid
        self.dt = np.diff(self.t)
        self.E = lin.E
        self.dE = np.diff(self.E, axis=0)
        self.grad_g = _grad_rows(h, lin.g)
        self.H_g = np.array([h.hessian(x) for x in lin.g])
        self.Udot = lin.U_dot()
        # - U g' gamma_dot, the recentering drift in z coordinates
        self.drift = -np.einsum("kij,kj->ki", lin.U, lin.g_prime) * lin.gamma_dot[:, None]
        ns = lin.n_s
        zs = self.dE[:, :ns]
        zu = -self.dE[:, ns:]
        self.s_decay = np.exp(zs)
        self.s_pa, self.s_pb = _psi_a(zs), _psi_b(zs)
        self.u_decay = np.exp(zu)
        self.u_pa, self.u_pb = _psi_a(zu), _psi_b(zu)

    def forcing(self, u: np.ndarray) -> np.ndarray:
        """``G = F~(u, t) - U g' gamma_dot`` at every knot."""
        lin = self.lin
        y = np.einsum("kji,kj->ki", lin.U, u)  # U^T z
        F = -(_grad_rows(self.h, lin.g + y) - self.grad_g - np.einsum("kij,kj->ki", self.H_g, y))
        Ft = np.einsum("kij,kj->ki", lin.U, F) + np.einsum("kij,kj->ki", self.Udot, y)
        return Ft + self.drift

    def apply(self, u: np.ndarray, a_s: np.ndarray) -> np.ndarray:
        ns = self.lin.n_s
        G = self.forcing(u)
        dG = np.diff(G, axis=0)
        h = self.dt[:, None]
        out = np.empty_like(u)
        if ns:
            Gs, dGs = G[:, :ns], dG[:, :ns]
            src = h * (Gs[1:] * self.s_pa - dGs * self.s_pb)
            out[:, :ns] = kernels.forward_recurrence(self.s_decay, src, a_s)
        if ns < u.shape[1]:
            Gu, dGu = G[:, ns:], dG[:, ns:]
            src = h * (Gu[:-1] * self.u_pa + dGu * self.u_pb)
            out[:, ns:] = -kernels.backward_recurrence(self.u_decay, src)
        return out

    def apply_direct(self, u: np.ndarray, a_s: np.ndarray) -> np.ndarray:
        """Same operator by explicit O(n^2) sums over segments (no recurrences)."""
        ns = self.lin.n_s
        G = self.forcing(u)
        dG = np.diff(G, axis=0)
        h = self.dt[:, None]
        n = len(self.t)
        out = np.zeros_like(u)
        E = self.E
        if ns:
            seg_s = h * (G[1:, :ns] * self.s_pa - dG[:, :ns] * self.s_pb)  # weight at right end
            Es = E[:, :ns]
            out[:, :ns] = np.exp(Es - Es[0]) * a_s
            for j in range(1, n):
                fac = np.exp(Es[j] - Es[1:j + 1])
                out[j, :ns] += np.sum(fac * seg_s[:j], axis=0)
        if ns < u.shape[1]:
            seg_u = h * (G[:-1, ns:] * self.u_pa + dG[:, ns:] * self.u_pb)  # weight at left end
            Eu = E[:, ns:]
            for j in range(n - 1):
                fac = np.exp(Eu[j] - Eu[j:n - 1])
                out[j, ns:] = -np.sum(fac * seg_u[j:], axis=0)
        return out


def picard_solve(lin: Linearization, h: ScalarField, a_s, opts: Optional[PicardOptions] = None,
                 constants: Optional[Constants] = None, operator: Optional[_PicardOperator] = None,
                 check_residual: bool = True) -> PicardSolution:
    """Fixed-point iteration of the integral equation on ``lin.time_grid``.

    The unstable integral runs to the last knot ``T_max``; the recorded tail
    bound is ``K exp(-sigma (T_max - t0)) sup|G|``.
    """
    opts = opts or PicardOptions()
    if lin.split_index != 0:
        raise ValueError(f"t0 = {lin.time_grid[0]:g} precedes the split time {lin.T_split:g}")
    a_s = np.asarray(a_s, dtype=float)
    if a_s.size != lin.n_s:
        raise ValueError(f"a_s has {a_s.size} entries, stable dimension is {lin.n_s}")
    op = operator or _PicardOperator(h, lin)
    consts = constants or measure_constants(lin)
    n, M = lin.Lambda.shape
    u = np.zeros((n, M))
    if lin.n_s:
        u[:, : lin.n_s] = np.exp(op.E[:, : lin.n_s] - op.E[0, : lin.n_s]) * a_s
    first = None
    inc = math.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            new = op.apply(u, a_s)
        inc = float(np.max(np.abs(new - u)))
        if not np.isfinite(inc):
            raise NoContraction("Picard iterate became non-finite")
        first = inc if first is None else first
        u = new
        if inc < opts.tol:
            break
        if inc > opts.divergence_factor * max(first, 1e-300):
            raise NoContraction(f"Picard increment grew to {inc:.3e}")
    else:
        raise NoContraction(f"no convergence in {opts.max_iter} iterations (last increment {inc:.3e})")
    G = op.forcing(u)
    span = lin.time_grid[-1] - lin.time_grid[0]
    tail = consts.K * math.exp(-consts.sigma * span) * float(np.max(np.abs(G))) if lin.n_s < M else 0.0
    if tail > opts.tail_tol:
        raise TailBoundTooLarge(f"tail bound {tail:.3e} exceeds {opts.tail_tol:.1e}; enlarge T_max")
    res = float(np.max(np.abs(op.apply_direct(u, a_s) - u))) if check_residual else math.nan
    # consistency: du/dt against Lambda u + G, on entries the grid resolves
    dudt = np.gradient(u, lin.time_grid, axis=0, edge_order=2)
    rhs = lin.Lambda * u + G
    spacing = np.maximum(op.dt[:-1], op.dt[1:])[:, None]
    resolved = np.abs(lin.Lambda[1:-1]) * spacing <= _RESOLVED_STEP
    gap = np.abs(dudt[1:-1] - rhs[1:-1])[resolved]
    der = float(np.max(gap)) if gap.size else math.nan
    return PicardSolution(lin.time_grid, u, a_s, it, inc, res, tail, der)


# ---------------------------------------------------------------------------
# chart


def geometric_grid(t0: float, T_max: float, n: int, ratio: float = 50.0) -> np.ndarray:
    """``n`` knots on ``[t0, T_max]`` whose last spacing is ``ratio`` times the first."""
    if n < 2:
        raise ValueError("need at least 2 knots")
    q = ratio ** (1.0 / max(n - 2, 1))
    steps = q ** np.arange(n - 1)
    return t0 + (T_max - t0) * np.concatenate([[0.0], np.cumsum(steps)]) / steps.sum()


def geometric_grid_first_step(t0: float, T_max: float, n: int, first: float) -> np.ndarray:
    """``n`` geometric knots on ``[t0, T_max]`` whose first spacing is ``first``."""
    span = T_max - t0
    if first * (n - 1) >= span:
        return np.linspace(t0, T_max, n)

    def total(q):
        e = (n - 1) * math.log(q)
        return math.inf if e > 700 else first * math.expm1(e) / (q - 1.0)

    lo, hi = 1.0 + 1e-12, 2.0
    while total(hi) < span:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if total(mid) < span else (lo, mid)
    return geometric_grid(t0, T_max, n, hi ** (n - 2))


def chart_grid(n_s: int, radius: float, points_per_axis: int = 9) -> np.ndarray:
    """Cartesian grid inscribed in the ball of the given radius in ``R^{n_s}``."""
    side = radius / math.sqrt(n_s)
    axis = np.linspace(-side, side, points_per_axis)
    mesh = np.meshgrid(*([axis] * n_s), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class ChartOptions:
    r: float = 0.3
    points_per_axis: int = 9
    knots: int = 2000
    grid_ratio: float = 50.0
    horizon_factor: float = 40.0
    min_r: float = 1e-3
    threads: int = 1
    picard: PicardOptions = field(default_factory=PicardOptions)


@dataclass(frozen=True, eq=False)
class ManifoldChart:
    """Samples of ``psi`` on a stable-coordinate grid at time ``t0``.

    Ambient points: ``x = U(t0)^T (a_s, psi) + g(gamma_{t0})``.
    """

    t0: float
    r: float
    n_s: int
    q: int
    a_s: np.ndarray
    psi: np.ndarray
    ambient: np.ndarray
    frame_g: np.ndarray
    frame_U: np.ndarray
    constants: Constants
    T_max: float
    residuals: np.ndarray
    tail_bounds: np.ndarray
    iterations: np.ndarray
    derivative_errors: np.ndarray
    x_star: np.ndarray
    h: ScalarField = field(repr=False)
    Q: PenaltyMatrix = field(repr=False)
    gamma: object = field(repr=False)
    lin: Linearization = field(repr=False)
    operator: object = field(repr=False, default=None)
    picard_opts: PicardOptions = field(repr=False, default_factory=PicardOptions)

    @property
    def radius(self) -> float:
        return self.r / 3.0

    def to_ambient(self, a_s, psi) -> np.ndarray:
        z = np.concatenate([np.atleast_1d(a_s), np.atleast_1d(psi)])
        return self.frame_U.T @ z + self.frame_g

    def psi_at(self, a_s) -> np.ndarray:
        sol = picard_solve(self.lin, self.h, a_s, self.picard_opts, self.constants, self.operator,
                           check_residual=False)
        return sol.psi

    def metadata(self) -> dict:
        return {
            "t0": self.t0, "r": self.r, "chart_radius": self.radius, "n_s": self.n_s, "q": self.q,
            "M": int(self.ambient.shape[1]), "K": self.constants.K, "nu": self.constants.nu,
            "sigma": self.constants.sigma, "T_max": self.T_max,
            "tail_bound": float(np.max(self.tail_bounds)),
            "max_picard_residual": float(np.max(self.residuals)),
            "x_star": self.x_star.tolist(),
        }

    def to_csv(self, path, meta_path=None) -> None:
        ns, nu_ = self.n_s, self.psi.shape[1]
        M = self.ambient.shape[1]
        header = ",".join([f"a_s_{i + 1}" for i in range(ns)] + [f"psi_{i + 1}" for i in range(nu_)]
                          + [f"amb_x_{i + 1}" for i in range(M)])
        np.savetxt(path, np.column_stack([self.a_s, self.psi, self.ambient]), delimiter=",",
                   header=header, comments="", fmt="%.17g")
        if meta_path is not None:
            with open(meta_path, "w") as fh:
                json.dump(self.metadata(), fh, indent=2)

    def to_svg(self, path, size: int = 480) -> None:
        """Wireframe of a 2-parameter chart in R^3 (oblique projection)."""
        if self.ambient.shape[1] != 3 or self.n_s != 2:
            raise ValueError("SVG export needs a 2-dimensional chart in R^3")
        m = int(round(math.sqrt(len(self.a_s))))
        P = self.ambient.reshape(m, m, 3)
        az, el = math.radians(35.0), math.radians(25.0)
        R = np.array([[math.cos(az), -math.sin(az), 0.0],
                      [math.sin(az) * math.sin(el), math.cos(az) * math.sin(el), math.cos(el)]])
        span = np.ptp(self.ambient, axis=0)
        XY = (P / np.where(span > 0, span, 1.0)) @ R.T
        lo, hi = XY.reshape(-1, 2).min(axis=0), XY.reshape(-1, 2).max(axis=0)
        S = (XY - lo) / np.where(hi - lo > 0, hi - lo, 1.0) * (size - 40) + 20
        S[..., 1] = size - S[..., 1]
        lines = []
        for i in range(m):
            for path_pts in (S[i, :, :], S[:, i, :]):
                pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in path_pts)
                lines.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e79" stroke-width="1"/>')
        svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
               f'viewBox="0 0 {size} {size}"><rect width="100%" height="100%" fill="white"/>'
               + "".join(lines) + "</svg>\n")
        with open(path, "w") as fh:
            fh.write(svg)


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def build_linearization(h, Q, schedule, x_star, t0: float, opts: ChartOptions):
    """Linearization on ``[t0, t0 + horizon_factor / sigma]`` with a geometric grid.

    ``sigma`` is measured on a coarse preliminary grid.
    """
    probe = linearize(h, Q, schedule, x_star, np.linspace(t0, t0 + 50.0, 101))
    sigma = measure_constants(probe).sigma
    T_max = t0 + opts.horizon_factor / sigma if np.isfinite(sigma) else t0 + 50.0
    grid = geometric_grid(t0, T_max, opts.knots, opts.grid_ratio)
    # the first cell must resolve the fastest stable mode's boundary layer
    fastest = float(np.max(np.abs(probe.Lambda[0, : probe.n_s]))) if probe.n_s else 0.0
    if fastest > 0 and fastest * (grid[1] - grid[0]) > _RESOLVED_STEP:
        grid = geometric_grid_first_step(t0, T_max, opts.knots, _RESOLVED_STEP / fastest)
    return linearize(h, Q, schedule, x_star, grid)


def chart(h: ScalarField, Q: PenaltyMatrix, schedule, x_star, t0: float,
          opts: Optional[ChartOptions] = None) -> ManifoldChart:
    """Sample the stable-manifold slice at ``t0`` over a grid of stable coordinates.

    The chart radius ``r`` starts at ``opts.r`` and is halved whenever the
    Picard iteration fails to contract.
    """
    opts = opts or ChartOptions()
    x_star = np.asarray(x_star, dtype=float)
    rf = restrict(h, Q)
    report = classify_critical_point(rf, Q.nullspace_basis.T @ x_star)
    q = report.q if report.q is not None else -1
    lin = build_linearization(h, Q, schedule, x_star, t0, opts)
    if q >= 0 and lin.n_s != lin.M - q:
        raise ManifoldError(f"stable dimension {lin.n_s} != M - q = {lin.M - q}")
    consts = measure_constants(lin)
    op = _PicardOperator(h, lin)
    r = opts.r
    while True:
        grid = chart_grid(lin.n_s, r / 3.0, opts.points_per_axis)
        try:
            sols = _map(lambda a: picard_solve(lin, h, a, opts.picard, consts, op), grid, opts.threads)
            break
        except NoContraction:
            r *= 0.5
            if r < opts.min_r:
                raise
    psi = np.array([s.psi for s in sols])
    U0, g0 = lin.U[0], lin.g[0]
    amb = np.array([U0.T @ np.concatenate([a, p]) + g0 for a, p in zip(grid, psi)])
    return ManifoldChart(
        t0=float(t0), r=float(r), n_s=lin.n_s, q=int(lin.M - lin.n_s), a_s=grid, psi=psi,
        ambient=amb, frame_g=g0, frame_U=U0, constants=consts, T_max=float(lin.time_grid[-1]),
        residuals=np.array([s.residual for s in sols]),
        tail_bounds=np.array([s.tail_bound for s in sols]),
        iterations=np.array([s.iterations for s in sols]),
        derivative_errors=np.array([s.derivative_error for s in sols]),
        x_star=x_star, h=h, Q=Q, gamma=_gamma_curve(schedule), lin=lin, operator=op,
        picard_opts=opts.picard)


# ---------------------------------------------------------------------------
# verification


@dataclass
class ChartReport:
    on_manifold_max_dist: float
    on_manifold_pass: bool
    off_manifold_exit_fraction: float
    off_manifold_pass: bool
    tangency_max_entry: float
    tangency_pass: bool
    max_picard_residual: float
    residual_pass: bool
    K: float
    nu: float
    sigma: float
    tail_bound: float
    T_verify: float
    on_distances: list = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "on_distances"}


def tangency_jacobian(ch: ManifoldChart, step: float = 1e-4) -> np.ndarray:
    """Central-difference ``d psi / d a_s`` at ``a_s = 0``."""
    J = np.empty((ch.psi.shape[1], ch.n_s))
    for i in range(ch.n_s):
        e = np.zeros(ch.n_s)
        e[i] = step
        J[:, i] = (ch.psi_at(e) - ch.psi_at(-e)) / (2 * step)
    return J


def verify_chart(ch: ManifoldChart, T_verify: Optional[float] = None, delta: float = 1e-2,
                 exit_radius: float = 0.5, conv_tol: float = 1e-3, tangency_tol: float = 1e-2,
                 residual_tol: float = 1e-8, opts: Optional[IntegrationOptions] = None,
                 threads: int = 1) -> ChartReport:
    """Integrate chart points (and unstable perturbations of them) with the flow."""
    T_verify = ch.t0 + 8.0 if T_verify is None else float(T_verify)
    opts = opts or IntegrationOptions(rtol=1e-12, atol=1e-14, order=4, max_step=0.05,
                                      diagnostics=False)

    def on(x0):
        p = penalized_problem(ch.h, ch.Q, ch.gamma, x0, ch.t0, T_verify)
        try:
            tr = integrate_problem(p, opts)
        except NumericalError:
            return math.inf
        return float(np.linalg.norm(tr.final - ch.x_star))

    dirs = ch.frame_U[ch.n_s:]

    def off(x0):
        exited = []
        for d in dirs:
            for s in (1.0, -1.0):
                o = IntegrationOptions(**{**opts.__dict__, "exit_center": tuple(ch.x_star),
                                          "exit_radius": exit_radius, "raise_on_failure": False})
                p = penalized_problem(ch.h, ch.Q, ch.gamma, x0 + s * delta * d, ch.t0, T_verify)
                tr = integrate_problem(p, o)
                exited.append(tr.status in ("exited", "blowup")
                              or float(np.linalg.norm(tr.final - ch.x_star)) > exit_radius)
        return exited

    dists = _map(on, list(ch.ambient), threads)
    exits = [e for row in _map(off, list(ch.ambient), threads) for e in row]
    J = tangency_jacobian(ch)
    tang = float(np.max(np.abs(J))) if J.size else 0.0
    res = float(np.max(ch.residuals))
    frac = float(np.mean(exits)) if exits else 1.0
    return ChartReport(
        on_manifold_max_dist=float(max(dists)), on_manifold_pass=bool(max(dists) < conv_tol),
        off_manifold_exit_fraction=frac, off_manifold_pass=frac == 1.0,
        tangency_max_entry=tang, tangency_pass=tang <= tangency_tol,
        max_picard_residual=res, residual_pass=res <= residual_tol,
        K=ch.constants.K, nu=ch.constants.nu, sigma=ch.constants.sigma,
        tail_bound=float(np.max(ch.tail_bounds)), T_verify=T_verify, on_distances=dists)


# ---------------------------------------------------------------------------
# Monte Carlo saddle avoidance


@dataclass
class MonteCarloStats:
    replicates: int
    near_saddle: int
    per_minimum: dict
    unresolved: int
    diverged: int
    endpoints: np.ndarray = field(repr=False)

    @property
    def resolved_fraction(self) -> float:
        return sum(self.per_minimum.values()) / self.replicates

    def as_dict(self) -> dict:
        return {"replicates": self.replicates, "near_saddle": self.near_saddle,
                "per_minimum": self.per_minimum, "unresolved": self.unresolved,
                "diverged": self.diverged, "resolved_fraction": self.resolved_fraction}


def monte_carlo_saddle_avoidance(make_problem: Callable[[np.ndarray], object], box_lo, box_hi,
                                 x_saddle, minima: Sequence, replicates: int = 200, seed: int = 0,
                                 project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                                 opts: Optional[IntegrationOptions] = None, threads: int = 1,
                                 saddle_tol: float = 1e-2, min_tol: float = 1e-2) -> MonteCarloStats:
    """Integrate ``replicates`` uniform initializations and classify endpoints.

    ``make_problem(x0)`` builds a :class:`~dgflow.flow.FlowProblem`;
    ``project`` maps a final state to the coordinates of ``x_saddle`` and
    ``minima`` (identity by default). An endpoint is "near the saddle" when it
    is within ``saddle_tol`` and moved less than 1e-4 over the trailing 10%
    of the window. Each replicate draws from its own child of
    ``SeedSequence(seed)``, so results do not depend on thread scheduling.
    """
    lo, hi = np.asarray(box_lo, dtype=float), np.asarray(box_hi, dtype=float)
    children = np.random.SeedSequence(seed).spawn(replicates)
    x0s = [np.random.default_rng(c).uniform(lo, hi) for c in children]
    opts = opts or IntegrationOptions(diagnostics=False, max_store=200)
    opts = IntegrationOptions(**{**opts.__dict__, "raise_on_failure": False})
    proj = project or (lambda x: x)
    xs = np.asarray(x_saddle, dtype=float)
    mins = [np.asarray(m, dtype=float) for m in minima]

    def run(x0):
        p = make_problem(x0)
        tr = integrate_problem(p, opts)
        if tr.status != "ok":
            return tr.status, np.full(xs.size, np.nan), math.inf
        t0, t1 = tr.times[0], tr.times[-1]
        disp = float(np.linalg.norm(tr.final - tr.state_at(t1 - 0.1 * (t1 - t0))))
        return "ok", proj(tr.final), disp

    results = _map(run, x0s, threads)
    near = unresolved = diverged = 0
    per_min = {str(tuple(np.round(m, 6).tolist())): 0 for m in mins}
    ends = []
    for status, y, disp in results:
        ends.append(y)
        if status != "ok":
            diverged += 1
            continue
        if np.linalg.norm(y - xs) < saddle_tol and disp < 1e-4:
            near += 1
            continue
        hit = [k for k, m in zip(per_min, mins) if np.linalg.norm(y - m) < min_tol]
        if hit:
            per_min[hit[0]] += 1
        else:
            unresolved += 1
    return MonteCarloStats(replicates, near, per_min, unresolved, diverged, np.array(ends))
