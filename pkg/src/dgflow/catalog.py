"""Builtin objectives with analytic oracles and known critical points."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .objective import (
    GLOBALLY_C2, PIECEWISE_SMOOTH, AbsAgent, EigDiscontinuity, MaxAffine,
    QuadForm, QuadraticAgent, QuarticWellsAgent, Saddle3D, SeparableObjective,
    UnknownName,
)


@dataclass(frozen=True)
class CriticalPoint:
    location: tuple
    kind: str
    q: Optional[int] = None


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    dims: str
    smoothness: str
    separable: bool
    critical_points: tuple
    notes: str = ""
    flags: tuple = ()
    penalty: Optional[tuple] = None  # constraint matrix for the non-separable examples


SADDLE3D_Q = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
COERCIVITY_H = ((0.0, -1.0), (-1.0, -1.0))
COERCIVITY_Q = ((1.0, 0.0), (0.0, 0.0))

ENTRIES = {
    "saddle3d": CatalogEntry(
        "saddle3d", "3", GLOBALLY_C2, False,
        (CriticalPoint((0.0, 0.0, 0.0), "regular_saddle", 1),
         CriticalPoint((2.0, -2.0, 0.0), "regular_saddle", 1)),
        "critical points of h restricted to C = {x3 = 0}; no local minimum",
        penalty=SADDLE3D_Q),
    "coercivity_counterexample": CatalogEntry(
        "coercivity_counterexample", "2", GLOBALLY_C2, False,
        (CriticalPoint((0.0, 0.0), "local_max_candidate", 1),),
        "non-coercive quadratic; C = {x1 = 0}", flags=("non_coercive",),
        penalty=COERCIVITY_Q),
    "eig_discontinuity": CatalogEntry(
        "eig_discontinuity", "2", GLOBALLY_C2, False,
        (CriticalPoint((0.0, 0.0), "degenerate", 0),),
        "C-infinity, not analytic; Hessian eigenvectors discontinuous at 0",
        flags=("violates_B8",)),
    "abs_median": CatalogEntry(
        "abs_median", "N x d", PIECEWISE_SMOOTH, True, (),
        "f_n = ||x - c_n||_1; sum minimized at the coordinatewise median of c"),
    "quartic_wells": CatalogEntry(
        "quartic_wells", "N x d", GLOBALLY_C2, True,
        (CriticalPoint((-1.0,), "local_min_candidate", 0),
         CriticalPoint((0.0,), "local_max_candidate", 1),
         CriticalPoint((1.0,), "local_min_candidate", 0)),
        "f_n = sum_i x_i^4/4 - x_i^2/2 + tilt_n . x; listed points for zero tilt, d = 1"),
    "quadratic": CatalogEntry(
        "quadratic", "N x d", GLOBALLY_C2, True, (),
        "f_n = ||x - c_n||^2 / 2; sum minimized at mean(c)"),
    "max_affine": CatalogEntry(
        "max_affine", "d", PIECEWISE_SMOOTH, False, (),
        "max_i (a_i . x + b_i)"),
}


def _per_agent(values, num_agents, d, default=0.0):
    if values is None:
        return np.full((num_agents, d), default)
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None] if d == 1 or arr.size == num_agents else arr[None, :]
    if arr.shape[0] == 1 and num_agents > 1:
        arr = np.repeat(arr, num_agents, axis=0)
    if arr.shape != (num_agents, d):
        raise ValueError(f"expected per-agent parameters of shape {(num_agents, d)}, got {arr.shape}")
    return arr


def builtin_catalog(name: str, num_agents: Optional[int] = None, d: int = 1, **params):
    """Build a catalog objective.

    Separable families (``abs_median``, ``quartic_wells``, ``quadratic``)
    return a :class:`SeparableObjective` over ``num_agents`` agents, or a
    single agent field when ``num_agents`` is None. Parameters: ``c``
    (abs_median, quadratic) and ``tilt`` (quartic_wells), per agent.
    """
    if name not in ENTRIES:
        raise UnknownName(f"unknown catalog objective {name!r}; known: {sorted(ENTRIES)}")
    if name == "saddle3d":
        return Saddle3D()
    if name == "coercivity_counterexample":
        return QuadForm(np.array(COERCIVITY_H), name=name)
    if name == "eig_discontinuity":
        return EigDiscontinuity()
    if name == "max_affine":
        return MaxAffine(params["slopes"], params.get("intercepts"))
    make: Callable = {"abs_median": AbsAgent, "quartic_wells": QuarticWellsAgent,
                      "quadratic": QuadraticAgent}[name]
    key = "tilt" if name == "quartic_wells" else "c"
    raw = params.get(key)
    if name == "abs_median" and raw is None:
        raise ValueError("abs_median needs centers c")
    if num_agents is None:
        if raw is not None and np.ndim(raw) >= 1 and np.size(raw) > d:
            num_agents = len(raw)
        else:
            return make(np.zeros(d) if raw is None else np.broadcast_to(np.asarray(raw, float), (d,)))
    P = _per_agent(raw, int(num_agents), d)
    return SeparableObjective([make(P[n]) for n in range(int(num_agents))])


def catalog_penalty(name: str):
    from .graph import penalty_matrix

    entry = ENTRIES[name]
    if entry.penalty is None:
        raise ValueError(f"{name} has no builtin constraint")
    return penalty_matrix(np.array(entry.penalty))


def known_critical_points(name: str, objective=None) -> list[CriticalPoint]:
    """Critical points of ``h|_C`` (or of ``f = sum f_n`` for separable families)."""
    entry = ENTRIES[name]
    if not entry.separable or objective is None:
        return list(entry.critical_points)
    agents = getattr(objective, "agents", [objective])
    d = agents[0].dim
    if name == "quadratic":
        c = np.mean([a.c for a in agents], axis=0)
        return [CriticalPoint(tuple(c), "local_min_candidate", 0)]
    if name == "abs_median":
        C = np.array([a.c for a in agents])
        N = C.shape[0]
        if N % 2 == 1:
            return [CriticalPoint(tuple(np.median(C, axis=0)), "nonsmooth_point")]
        S = np.sort(C, axis=0)
        lo, hi = S[N // 2 - 1], S[N // 2]
        return [CriticalPoint(tuple(lo), "nonsmooth_point"), CriticalPoint(tuple(hi), "nonsmooth_point")]
    if name == "quartic_wells":
        tilt = np.sum([a.tilt for a in agents], axis=0) / len(agents)
        pts = []
        roots = [np.sort(np.real(r[np.abs(np.imag(r)) < 1e-9]))
                 for r in (np.roots([1.0, 0.0, -1.0, t]) for t in tilt)]
        for combo in np.array(np.meshgrid(*roots, indexing="ij")).reshape(d, -1).T:
            curv = 3 * combo ** 2 - 1
            q = int(np.sum(curv < 0))
            kind = "local_min_candidate" if q == 0 else ("local_max_candidate" if q == d else "regular_saddle")
            pts.append(CriticalPoint(tuple(combo), kind, q))
        return pts
    return list(entry.critical_points)


def catalog_table() -> str:
    rows = [("name", "dims", "smoothness", "critical points", "flags")]
    for e in sorted(ENTRIES.values(), key=lambda e: e.name):
        cps = "; ".join(f"{p.location} {p.kind}" + (f" q={p.q}" if p.q is not None else "")
                        for p in e.critical_points) or "-"
        rows.append((e.name, e.dims, e.smoothness, cps, ",".join(e.flags) or "-"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
