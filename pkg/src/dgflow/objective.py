"""Scalar fields with value / Clarke-subgradient / Hessian oracles.

A :class:`ScalarField` exposes ``value``, ``subgrad`` (one element of the
Clarke generalized gradient, the minimum-norm one at declared kinks) and,
where twice differentiable, ``hessian``. Nondifferentiability is declared
analytically by each field through ``kink_distance`` and ``piece_gradients``;
nothing here tries to detect kinks numerically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

TOL_CRIT = 1e-6
TOL_EIG = 1e-8
KINK_TOL = 1e-14

GLOBALLY_C2 = "globally_C2"
PIECEWISE_SMOOTH = "piecewise_smooth"
LOCALLY_LIPSCHITZ = "locally_Lipschitz"

# Kernel codes shared with the compiled stepper (see _ckernels.pyx).
K_ZERO, K_QUADRATIC, K_QUARTIC, K_ABS, K_SADDLE3D, K_QUADFORM = range(6)


class ObjectiveError(ValueError):
    pass


class NotCritical(ObjectiveError):
    pass


class NoHessian(ObjectiveError):
    pass


class UnknownName(ObjectiveError, KeyError):
    pass


# ---------------------------------------------------------------------------
# minimum-norm point of a convex hull


def min_norm_point(P: np.ndarray, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Minimum-norm point of ``conv(rows of P)`` by Wolfe's algorithm.

    Terminates finitely; ``max_iter`` only guards against cycling on
    degenerate input.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    m = P.shape[0]
    if m == 1:
        return P[0].copy()
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    j0 = int(np.argmin(np.sum(P * P, axis=1)))
    S = [j0]
    lam = np.array([1.0])
    x = P[j0].copy()
    for _ in range(max_iter):
        proj = P @ x
        j = int(np.argmin(proj))
        if proj[j] >= x @ x - tol * scale or j in S:
            break
        S.append(j)
        lam = np.append(lam, 0.0)
        while True:
            Ps = P[S]
            k = len(S)
            G = np.ones((k + 1, k + 1))
            G[:k, :k] = Ps @ Ps.T
            G[k, k] = 0.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            mu = np.linalg.lstsq(G, rhs, rcond=None)[0][:k]
            if np.all(mu > tol):
                lam = mu
                x = mu @ Ps
                break
            neg = mu <= tol
            ratios = np.where(neg, lam / np.where(lam - mu > 0, lam - mu, np.inf), np.inf)
            theta = float(min(1.0, np.min(ratios)))
            lam = lam + theta * (mu - lam)
            keep = lam > tol
            if not np.any(keep):
                keep[int(np.argmax(lam))] = True
            S = [s for s, kp in zip(S, keep) if kp]
            lam = lam[keep]
            lam = lam / lam.sum()
            x = lam @ P[S]
    return x


# ---------------------------------------------------------------------------
# fields


class ScalarField:
    """Base class. Subclasses implement ``value`` and ``piece_gradients``.

    ``piece_gradients(x)`` returns the gradients of every smooth piece active
    at ``x`` (one row at differentiable points); their convex hull is the
    Clarke generalized gradient for the catalog's piecewise families.
    """

    dim: int
    smoothness: str = GLOBALLY_C2
    name: str = "field"
    kernel_kind: Optional[int] = None
    kernel_params: Optional[np.ndarray] = None

    def value(self, x) -> float:
        raise NotImplementedError

    def piece_gradients(self, x) -> np.ndarray:
        raise NotImplementedError

    def subgrad(self, x) -> np.ndarray:
        G = self.piece_gradients(np.asarray(x, dtype=float))
        return G[0] if G.shape[0] == 1 else min_norm_point(G)

    def grad_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self.subgrad(x) for x in X])

    def hessian(self, x) -> np.ndarray:
        raise NoHessian(f"{self.name}: no Hessian oracle")

    def kink_distance(self, x) -> float:
        """Distance from ``x`` to the declared nondifferentiability set."""
        return np.inf

    def __call__(self, x):
        return self.value(x)


def subgrad_select(field: ScalarField, x) -> np.ndarray:
    """One element of the Clarke generalized gradient (min-norm at kinks)."""
    return field.subgrad(np.asarray(x, dtype=float))


class Polynomial(ScalarField):
    """Sum of monomials ``coef * prod_i x_i ** e_i``."""

    def __init__(self, dim: int, terms: Sequence, name: str = "polynomial"):
        self.dim = int(dim)
        self.name = name
        E = np.array([t[0] for t in terms], dtype=int).reshape(-1, self.dim)
        C = np.array([t[1] for t in terms], dtype=float)
        if np.any(E < 0):
            raise ObjectiveError("monomial exponents must be nonnegative")
        self._E, self._C = E, C
        self._dE, self._dC = [], []
        for i in range(self.dim):
            Ei = E.copy()
            Ei[:, i] -= 1
            ci = C * E[:, i]
            keep = E[:, i] > 0
            self._dE.append(Ei[keep])
            self._dC.append(ci[keep])
        self._hE, self._hC = {}, {}
        for i in range(self.dim):
            for j in range(i, self.dim):
                Eij = self._dE[i].copy()
                cij = self._dC[i] * Eij[:, j]
                Eij[:, j] -= 1
                keep = self._dE[i][:, j] > 0
                self._hE[i, j], self._hC[i, j] = Eij[keep], cij[keep]

    @staticmethod
    def _eval(E, C, X):
        if len(C) == 0:
            return np.zeros(X.shape[:-1])
        return np.prod(X[..., None, :] ** E, axis=-1) @ C

    def value(self, x):
        return float(self._eval(self._E, self._C, np.asarray(x, dtype=float)))

    def gradient(self, X):
        X = np.asarray(X, dtype=float)
        return np.stack([self._eval(self._dE[i], self._dC[i], X) for i in range(self.dim)], axis=-1)

    def piece_gradients(self, x):
        return self.gradient(x)[None, :]

    def subgrad(self, x):
        return self.gradient(x)

    def grad_batch(self, X):
        return self.gradient(np.atleast_2d(X))

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        H = np.zeros((self.dim, self.dim))
        for (i, j), E in self._hE.items():
            H[i, j] = H[j, i] = self._eval(E, self._hC[i, j], x)
        return H


class Saddle3D(Polynomial):
    """``1/2 (x1^2 - x2^2 + x1^2 x2 + x1 x2^2)(1 + x3) + x3``."""

    def __init__(self):
        half = 0.5
        terms = [
            ((2, 0, 0), half), ((0, 2, 0), -half), ((2, 1, 0), half), ((1, 2, 0), half),
            ((2, 0, 1), half), ((0, 2, 1), -half), ((2, 1, 1), half), ((1, 2, 1), half),
            ((0, 0, 1), 1.0),
        ]
        super().__init__(3, terms, name="saddle3d")
        self.kernel_kind = K_SADDLE3D
        self.kernel_params = np.zeros((1, 3))

    def gradient(self, X):
        X = np.asarray(X, dtype=float)
        x1, x2, x3 = X[..., 0], X[..., 1], X[..., 2]
        w = 1.0 + x3
        p = x1 * x1 - x2 * x2 + x1 * x1 * x2 + x1 * x2 * x2
        return np.stack([
            0.5 * (2 * x1 + 2 * x1 * x2 + x2 * x2) * w,
            0.5 * (-2 * x2 + x1 * x1 + 2 * x1 * x2) * w,
            0.5 * p + 1.0,
        ], axis=-1)


class QuadForm(ScalarField):
    """``1/2 x^T H x + b^T x`` for symmetric ``H``."""

    def __init__(self, H, b=None, name: str = "quadform"):
        H = np.asarray(H, dtype=float)
        self.H = 0.5 * (H + H.T)
        self.dim = H.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float)
        self.name = name
        self.kernel_kind = K_QUADFORM
        self.kernel_params = np.hstack([self.H, self.b[:, None]])

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.b @ x)

    def piece_gradients(self, x):
        return (self.H @ np.asarray(x, dtype=float) + self.b)[None, :]

    def subgrad(self, x):
        return self.H @ np.asarray(x, dtype=float) + self.b

    def grad_batch(self, X):
        return np.atleast_2d(X) @ self.H + self.b

    def hessian(self, x):
        return self.H.copy()


class QuadraticAgent(ScalarField):
    """``1/2 ||x - c||^2``."""

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))
        self.dim = self.c.size
        self.name = "quadratic"
        self.kernel_kind = K_QUADRATIC
        self.kernel_params = self.c

    def value(self, x):
        r = np.asarray(x, dtype=float) - self.c
        return float(0.5 * r @ r)

    def subgrad(self, x):
        return np.asarray(x, dtype=float) - self.c

    def piece_gradients(self, x):
        return self.subgrad(x)[None, :]

    def grad_batch(self, X):
        return np.atleast_2d(X) - self.c

    def hessian(self, x):
        return np.eye(self.dim)


class QuarticWellsAgent(ScalarField):
    """``sum_i (x_i^4 / 4 - x_i^2 / 2) + tilt . x``; wells at +-1 when untilted."""

    def __init__(self, tilt):
        self.tilt = np.atleast_1d(np.asarray(tilt, dtype=float))
        self.dim = self.tilt.size
        self.name = "quartic_wells"
        self.kernel_kind = K_QUARTIC
        self.kernel_params = self.tilt

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(0.25 * x ** 4 - 0.5 * x ** 2) + self.tilt @ x)

    def subgrad(self, x):
        x = np.asarray(x, dtype=float)
        return x ** 3 - x + self.tilt

    def piece_gradients(self, x):
        return self.subgrad(x)[None, :]

    def grad_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X ** 3 - X + self.tilt

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        return np.diag(3 * x ** 2 - 1)


class AbsAgent(ScalarField):
    """``||x - c||_1``; kinks on the hyperplanes ``x_i = c_i``."""

    smoothness = PIECEWISE_SMOOTH

    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))
        self.dim = self.c.size
        self.name = "abs_median"
        self.kernel_kind = K_ABS
        self.kernel_params = self.c

    def _at_kink(self, r):
        return np.abs(r) <= KINK_TOL * np.maximum(1.0, np.abs(self.c))

    def value(self, x):
        return float(np.sum(np.abs(np.asarray(x, dtype=float) - self.c)))

    def subgrad(self, x):
        r = np.asarray(x, dtype=float) - self.c
        return np.where(self._at_kink(r), 0.0, np.sign(r))

    def grad_batch(self, X):
        R = np.atleast_2d(np.asarray(X, dtype=float)) - self.c
        return np.where(self._at_kink(R), 0.0, np.sign(R))

    def piece_gradients(self, x):
        r = np.asarray(x, dtype=float) - self.c
        kink = self._at_kink(r)
        base = np.sign(r)
        idx = np.flatnonzero(kink)
        rows = []
        for signs in product((-1.0, 1.0), repeat=len(idx)):
            g = base.copy()
            g[idx] = signs
            rows.append(g)
        return np.array(rows)

    def hessian(self, x):
        if self.kink_distance(x) <= KINK_TOL:
            raise NoHessian("abs_median: at a kink")
        return np.zeros((self.dim, self.dim))

    def kink_distance(self, x):
        return float(np.min(np.abs(np.asarray(x, dtype=float) - self.c)))


class MaxAffine(ScalarField):
    """``max_i (a_i . x + b_i)``."""

    smoothness = PIECEWISE_SMOOTH

    def __init__(self, slopes, intercepts=None, name: str = "max_affine", tie_tol: float = 1e-12):
        self.A = np.atleast_2d(np.asarray(slopes, dtype=float))
        if self.A.shape[0] == 1 and self.A.shape[1] > 1 and intercepts is not None \
                and np.size(intercepts) == self.A.shape[1]:
            self.A = self.A.T
        self.b = np.zeros(self.A.shape[0]) if intercepts is None else np.asarray(intercepts, float)
        self.dim = self.A.shape[1]
        self.name = name
        self.tie_tol = tie_tol

    def _vals(self, x):
        return self.A @ np.asarray(x, dtype=float) + self.b

    def value(self, x):
        return float(np.max(self._vals(x)))

    def piece_gradients(self, x):
        v = self._vals(x)
        active = v >= v.max() - self.tie_tol * max(1.0, abs(v.max()))
        return self.A[active]

    def hessian(self, x):
        if self.piece_gradients(x).shape[0] > 1:
            raise NoHessian(f"{self.name}: at a kink")
        return np.zeros((self.dim, self.dim))

    def kink_distance(self, x):
        v = self._vals(x)
        if v.size < 2:
            return np.inf
        order = np.argsort(v)[::-1]
        top = order[0]
        best = np.inf
        for j in order[1:]:
            dn = np.linalg.norm(self.A[top] - self.A[j])
            if dn > 0:
                best = min(best, (v[top] - v[j]) / dn)
        return float(best)


class EigDiscontinuity(ScalarField):
    """``exp(-1/r^2) cos(theta)`` on R^2: smooth, Hessian eigenvectors discontinuous at 0."""

    violates_eigvec_continuity = True

    def __init__(self):
        self.dim = 2
        self.name = "eig_discontinuity"

    @staticmethod
    def _phis(s):
        e = np.exp(-1.0 / s)
        phi = e * s ** -0.5
        d1 = e * (s ** -2.5 - 0.5 * s ** -1.5)
        d2 = e * (s ** -4.5 - 3.0 * s ** -3.5 + 0.75 * s ** -2.5)
        return phi, d1, d2

    def value(self, x):
        x1, x2 = np.asarray(x, dtype=float)
        s = x1 * x1 + x2 * x2
        if s == 0:
            return 0.0
        return float(x1 * self._phis(s)[0])

    def piece_gradients(self, x):
        x1, x2 = np.asarray(x, dtype=float)
        s = x1 * x1 + x2 * x2
        if s == 0:
            return np.zeros((1, 2))
        phi, d1, _ = self._phis(s)
        return np.array([[phi + 2 * x1 * x1 * d1, 2 * x1 * x2 * d1]])

    def hessian(self, x):
        x1, x2 = np.asarray(x, dtype=float)
        s = x1 * x1 + x2 * x2
        if s == 0:
            return np.zeros((2, 2))
        _, d1, d2 = self._phis(s)
        hxx = 6 * x1 * d1 + 4 * x1 ** 3 * d2
        hxy = 2 * x2 * d1 + 4 * x1 * x1 * x2 * d2
        hyy = 2 * x1 * d1 + 4 * x1 * x2 * x2 * d2
        return np.array([[hxx, hxy], [hxy, hyy]])


class FunctionField(ScalarField):
    """Field from user callables (no kinks unless ``kink_distance`` given)."""

    def __init__(self, dim, value, grad, hessian=None, smoothness=GLOBALLY_C2,
                 kink_distance=None, name="function"):
        self.dim = int(dim)
        self._value, self._grad, self._hess = value, grad, hessian
        self.smoothness = smoothness
        self._kd = kink_distance
        self.name = name

    def value(self, x):
        return float(self._value(np.asarray(x, dtype=float)))

    def piece_gradients(self, x):
        return np.atleast_2d(self._grad(np.asarray(x, dtype=float)))

    def hessian(self, x):
        if self._hess is None:
            raise NoHessian(f"{self.name}: no Hessian oracle")
        return np.asarray(self._hess(np.asarray(x, dtype=float)), dtype=float)

    def kink_distance(self, x):
        return np.inf if self._kd is None else float(self._kd(np.asarray(x, dtype=float)))


class SumField(ScalarField):
    """``x -> sum_n f_n(x)`` on the common agent domain R^d."""

    def __init__(self, agents: Sequence[ScalarField]):
        self.agents = list(agents)
        self.dim = self.agents[0].dim
        self.name = "sum"
        flags = {a.smoothness for a in self.agents}
        self.smoothness = GLOBALLY_C2 if flags == {GLOBALLY_C2} else PIECEWISE_SMOOTH

    def value(self, x):
        return float(sum(a.value(x) for a in self.agents))

    def piece_gradients(self, x):
        # Minkowski sum of each agent's piece set; small for the catalog.
        G = np.zeros((1, self.dim))
        for a in self.agents:
            Pa = a.piece_gradients(x)
            G = (G[:, None, :] + Pa[None, :, :]).reshape(-1, self.dim)
        return G

    def subgrad(self, x):
        G = self.piece_gradients(np.asarray(x, dtype=float))
        return G[0] if G.shape[0] == 1 else min_norm_point(G)

    def hessian(self, x):
        return sum(a.hessian(x) for a in self.agents)

    def kink_distance(self, x):
        return min(a.kink_distance(x) for a in self.agents)


class SeparableObjective(ScalarField):
    """``h(x) = sum_n f_n(x_n)`` on stacked states ``x = (x_1, ..., x_N)``."""

    def __init__(self, agents: Sequence[ScalarField]):
        self.agents = list(agents)
        if not self.agents:
            raise ObjectiveError("need at least one agent")
        d = {a.dim for a in self.agents}
        if len(d) != 1:
            raise ObjectiveError(f"agents disagree on dimension: {sorted(d)}")
        self.d = d.pop()
        self.N = len(self.agents)
        self.dim = self.N * self.d
        self.name = self.agents[0].name if len({a.name for a in self.agents}) == 1 else "separable"
        flags = {a.smoothness for a in self.agents}
        self.smoothness = GLOBALLY_C2 if flags == {GLOBALLY_C2} else PIECEWISE_SMOOTH
        kinds = {a.kernel_kind for a in self.agents}
        if len(kinds) == 1 and None not in kinds and K_QUADFORM not in kinds and K_SADDLE3D not in kinds:
            self.kernel_kind = kinds.pop()
            self.kernel_params = np.array([a.kernel_params for a in self.agents], dtype=float)
        else:
            self.kernel_kind = None
            self.kernel_params = None

    def _blocks(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ObjectiveError(f"state length {x.shape[-1]} != N*d = {self.dim}")
        return x.reshape(x.shape[:-1] + (self.N, self.d))

    def value(self, x):
        X = self._blocks(x)
        return float(sum(a.value(X[n]) for n, a in enumerate(self.agents)))

    def subgrad(self, x):
        X = self._blocks(x)
        return np.concatenate([a.subgrad(X[n]) for n, a in enumerate(self.agents)])

    def grad_batch(self, X):
        B = self._blocks(np.atleast_2d(X))
        return np.concatenate([a.grad_batch(B[:, n]) for n, a in enumerate(self.agents)], axis=-1)

    def piece_gradients(self, x):
        X = self._blocks(x)
        G = np.zeros((1, 0))
        for n, a in enumerate(self.agents):
            Pa = a.piece_gradients(X[n])
            G = np.array([np.concatenate([g, p]) for g in G for p in Pa])
        return G

    def hessian(self, x):
        X = self._blocks(x)
        H = np.zeros((self.dim, self.dim))
        for n, a in enumerate(self.agents):
            s = slice(n * self.d, (n + 1) * self.d)
            H[s, s] = a.hessian(X[n])
        return H

    def kink_distance(self, x):
        X = self._blocks(x)
        return min(a.kink_distance(X[n]) for n, a in enumerate(self.agents))

    def sum_field(self) -> SumField:
        return SumField(self.agents)


def eval_sum(obj: SeparableObjective, x) -> float:
    """``sum_n f_n(x_n)`` for a stacked state."""
    return obj.value(x)


class RestrictedField(ScalarField):
    """``y -> h(B y)`` for an orthonormal basis ``B`` of the constraint set."""

    def __init__(self, h: ScalarField, basis: np.ndarray):
        self.h = h
        self.B = np.asarray(basis, dtype=float)
        self.dim = self.B.shape[1]
        self.smoothness = h.smoothness
        self.name = f"{h.name}|C"

    def value(self, y):
        return self.h.value(self.B @ np.asarray(y, dtype=float))

    def piece_gradients(self, y):
        return self.h.piece_gradients(self.B @ np.asarray(y, dtype=float)) @ self.B

    def subgrad(self, y):
        return self.B.T @ self.h.subgrad(self.B @ np.asarray(y, dtype=float))

    def hessian(self, y):
        return self.B.T @ self.h.hessian(self.B @ np.asarray(y, dtype=float)) @ self.B

    def kink_distance(self, y):
        return self.h.kink_distance(self.B @ np.asarray(y, dtype=float))


def restrict(h: ScalarField, Q) -> RestrictedField:
    """``h`` restricted to the nullspace of a :class:`~dgflow.graph.PenaltyMatrix`."""
    return RestrictedField(h, Q.nullspace_basis)


# ---------------------------------------------------------------------------
# criticality diagnostics


def min_norm_subgrad_estimate(field: ScalarField, x, radius: float = 1e-6,
                              samples: int = 8, seed: int = 0) -> float:
    """Norm of the min-norm convex combination of nearby subgradient selections.

    Uses the selection at ``x`` plus ``samples`` selections at points drawn
    uniformly from the ball of the given radius (fixed seed).
    """
    if radius <= 0 or samples < 1:
        raise ValueError("radius must be > 0 and samples >= 1")
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(samples, x.size))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= radius * rng.random((samples, 1)) ** (1.0 / x.size)
    G = np.vstack([field.subgrad(x)] + [field.subgrad(x + v) for v in u])
    return float(np.linalg.norm(min_norm_point(G)))


@dataclass
class CriticalPointReport:
    location: np.ndarray
    residual: float
    classification: str
    hessian_spectrum: Optional[np.ndarray] = None
    q: Optional[int] = None


def classify_critical_point(field: ScalarField, x, tol_crit: float = TOL_CRIT,
                            tol_eig: float = TOL_EIG) -> CriticalPointReport:
    """Classify a critical point by its Hessian spectrum.

    Classes: ``local_min_candidate``, ``local_max_candidate``,
    ``regular_saddle``, ``degenerate`` or ``nonsmooth_point``.
    """
    x = np.asarray(x, dtype=float)
    res = min_norm_subgrad_estimate(field, x, radius=1e-9, samples=4)
    if res > tol_crit:
        raise NotCritical(f"residual {res:.3e} exceeds {tol_crit:.1e}")
    if field.kink_distance(x) <= 1e-12:
        return CriticalPointReport(x, res, "nonsmooth_point")
    try:
        H = field.hessian(x)
    except NoHessian:
        return CriticalPointReport(x, res, "nonsmooth_point")
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    q = int(np.sum(w < -tol_eig))
    if np.min(np.abs(w)) <= tol_eig:
        cls = "degenerate"
    elif q == 0:
        cls = "local_min_candidate"
    elif q == w.size:
        cls = "local_max_candidate"
    else:
        cls = "regular_saddle"
    return CriticalPointReport(x, res, cls, w, q)


def coercivity_flag(field: ScalarField, box: float = 10.0, samples: int = 2000,
                    seed: int = 0) -> bool:
    """Heuristic: is ``field`` larger on the sampled box boundary than inside?

    Only a sampled indication; coercivity cannot be certified numerically.
    """
    rng = np.random.default_rng(seed)
    inner = rng.uniform(-box / 10, box / 10, size=(samples, field.dim))
    outer = rng.normal(size=(samples, field.dim))
    outer *= box / np.linalg.norm(outer, axis=1, keepdims=True)
    return min(field.value(p) for p in outer) > max(field.value(p) for p in inner)
