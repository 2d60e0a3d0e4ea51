"""Communication graphs, Laplacians and the lifted consensus penalty.

Agents are indexed ``0..N-1`` internally. :func:`build_graph` accepts the
1-based edge lists used in experiment configs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TOL_EIG = 1e-10


class GraphError(ValueError):
    """Base class for invalid graph input."""


class Disconnected(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class DuplicateEdge(UserWarning):
    pass


@dataclass(frozen=True)
class CommGraph:
    """Undirected, unweighted, connected agent graph."""

    num_agents: int
    edges: frozenset
    neighbor_lists: tuple

    def degree(self, n: int) -> int:
        return len(self.neighbor_lists[n])

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbor_lists], dtype=int)


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    """Symmetric PSD matrix ``Q`` whose nullspace is the constraint set."""

    entries: np.ndarray
    nullspace_dim: int
    eigvals: np.ndarray = field(repr=False)
    eigvecs: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def nullspace_basis(self) -> np.ndarray:
        """Orthonormal basis (columns) of ``{x : Qx = 0}``."""
        return self.eigvecs[:, : self.nullspace_dim]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the nullspace."""
        B = self.nullspace_basis
        return B @ (B.T @ x)


def penalty_matrix(Q: np.ndarray, tol: float = TOL_EIG) -> PenaltyMatrix:
    """Validate a dense penalty matrix and cache its eigendecomposition."""
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"penalty matrix must be square, got shape {Q.shape}")
    if not np.allclose(Q, Q.T, atol=1e-12, rtol=0):
        raise ValueError("penalty matrix must be symmetric")
    Q = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(Q)
    if w[0] < -tol:
        raise ValueError(f"penalty matrix not PSD (min eigenvalue {w[0]:.3e})")
    null = int(np.sum(np.abs(w) <= tol))
    if null == 0:
        raise ValueError("penalty matrix has no zero eigenvalue; constraint set is {0}")
    # eigh sorts ascending, so the nullspace comes first; pin those modes to 0.
    w = np.where(np.abs(w) <= tol, 0.0, w)
    Q.setflags(write=False)
    w.setflags(write=False)
    V.setflags(write=False)
    return PenaltyMatrix(entries=Q, nullspace_dim=null, eigvals=w, eigvecs=V)


def _components(n: int, edges: Iterable[tuple[int, int]]) -> int:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    count = n
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            count -= 1
    return count


def build_graph(num_agents: int, edges: Sequence[Sequence[int]]) -> CommGraph:
    """Build a validated graph from 1-based edge pairs.

    Duplicate edges (in either orientation) collapse to one with a
    :class:`DuplicateEdge` warning.
    """
    if int(num_agents) != num_agents or num_agents < 1:
        raise GraphError(f"num_agents must be a positive integer, got {num_agents}")
    N = int(num_agents)
    seen: set[tuple[int, int]] = set()
    for e in edges:
        if len(e) != 2:
            raise GraphError(f"edge must be a pair, got {e!r}")
        i, j = int(e[0]), int(e[1])
        if not (1 <= i <= N and 1 <= j <= N):
            raise GraphError(f"edge ({i}, {j}) has endpoint outside [1, {N}]")
        if i == j:
            raise SelfLoop(f"self-loop at agent {i}")
        key = (min(i, j) - 1, max(i, j) - 1)
        if key in seen:
            warnings.warn(f"duplicate edge ({i}, {j}) collapsed", DuplicateEdge, stacklevel=2)
            continue
        seen.add(key)
    ncomp = _components(N, seen)
    if ncomp > 1:
        raise Disconnected(f"graph has {ncomp} connected components")
    nbrs = [[] for _ in range(N)]
    for i, j in seen:
        nbrs[i].append(j)
        nbrs[j].append(i)
    return CommGraph(
        num_agents=N,
        edges=frozenset(seen),
        neighbor_lists=tuple(tuple(sorted(nb)) for nb in nbrs),
    )


def named_graph(name: str, num_agents: int) -> CommGraph:
    """Standard topologies: ``path``, ``ring``, ``complete``, ``star``."""
    N = int(num_agents)
    if name == "path":
        edges = [(i, i + 1) for i in range(1, N)]
    elif name == "ring":
        edges = [(i, i + 1) for i in range(1, N)]
        if N > 2:
            edges.append((N, 1))
    elif name == "complete":
        edges = [(i, j) for i in range(1, N + 1) for j in range(i + 1, N + 1)]
    elif name == "star":
        edges = [(1, j) for j in range(2, N + 1)]
    else:
        raise GraphError(f"unknown topology {name!r}")
    return build_graph(N, edges)


def laplacian(g: CommGraph) -> PenaltyMatrix:
    """Graph Laplacian ``L = D - A``."""
    N = g.num_agents
    L = np.zeros((N, N))
    for i, j in g.edges:
        L[i, j] = L[j, i] = -1.0
    L[np.diag_indices(N)] = g.degrees
    return penalty_matrix(L)


def lift_penalty(L: PenaltyMatrix, d: int) -> PenaltyMatrix:
    """Kronecker lift ``L (x) I_d``; its nullspace is the consensus subspace."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return penalty_matrix(np.kron(L.entries, np.eye(d)))


def agent_blocks(x: np.ndarray, N: int, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != N * d:
        raise ValueError(f"state has length {x.shape[-1]}, expected N*d = {N * d}")
    return x.reshape(x.shape[:-1] + (N, d))


def consensus_error(x: np.ndarray, N: int, d: int) -> float:
    """``max_n ||x_n - mean(x)||`` over agent blocks."""
    X = agent_blocks(x, N, d)
    dev = X - X.mean(axis=-2, keepdims=True)
    return float(np.max(np.linalg.norm(dev, axis=-1)))
