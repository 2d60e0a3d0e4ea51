import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgflow.graph import (
    Disconnected, DuplicateEdge, GraphError, SelfLoop, build_graph, consensus_error, laplacian,
    lift_penalty, named_graph, penalty_matrix,
)

TOPOLOGIES = ["path", "ring", "complete", "star"]


def test_singleton_graph():
    g = build_graph(1, [])
    assert g.num_agents == 1
    assert laplacian(g).entries.tolist() == [[0.0]]


def test_four_cycle_degrees():
    g = build_graph(4, [(1, 2), (2, 3), (3, 4), (4, 1)])
    assert g.degrees.tolist() == [2, 2, 2, 2]


def test_disconnected_rejected():
    with pytest.raises(Disconnected):
        build_graph(4, [(1, 2), (3, 4)])


def test_self_loop_rejected():
    with pytest.raises(SelfLoop):
        build_graph(3, [(1, 2), (2, 2), (2, 3)])


def test_endpoint_out_of_range():
    with pytest.raises(GraphError):
        build_graph(3, [(1, 4)])


def test_duplicate_edge_collapses_with_warning():
    with pytest.warns(DuplicateEdge):
        g = build_graph(3, [(1, 2), (2, 1), (2, 3)])
    assert len(g.edges) == 2


def test_neighbor_lists_symmetric():
    g = named_graph("ring", 6)
    for n, nbrs in enumerate(g.neighbor_lists):
        assert list(nbrs) == sorted(nbrs)
        for m in nbrs:
            assert n in g.neighbor_lists[m]


def test_path2_laplacian():
    L = laplacian(named_graph("path", 2))
    assert np.array_equal(L.entries, [[1.0, -1.0], [-1.0, 1.0]])


def test_four_cycle_spectrum():
    L = laplacian(named_graph("ring", 4))
    assert np.allclose(np.diag(L.entries), 2.0)
    closed = np.sort(2 - 2 * np.cos(2 * np.pi * np.arange(4) / 4))
    assert np.allclose(np.sort(L.eigvals), closed, atol=1e-10)
    assert np.allclose(np.sort(L.eigvals), [0, 2, 2, 4], atol=1e-10)


def test_complete3_spectrum():
    L = laplacian(named_graph("complete", 3))
    assert np.allclose(np.sort(np.linalg.eigvalsh(L.entries)), [0, 3, 3], atol=1e-10)


def test_lift_identity_for_d1():
    L = laplacian(named_graph("path", 2))
    assert np.array_equal(lift_penalty(L, 1).entries, L.entries)


def test_lift_blocks_d2():
    L = laplacian(named_graph("path", 2))
    Q = lift_penalty(L, 2).entries
    I = np.eye(2)
    assert np.array_equal(Q, np.block([[I, -I], [-I, I]]))


def test_lift_ring_nullspace_dim():
    Q = lift_penalty(laplacian(named_graph("ring", 4)), 3)
    assert Q.dim == 12
    assert Q.nullspace_dim == 3
    assert int(np.sum(np.abs(np.linalg.eigvalsh(Q.entries)) < 1e-10)) == 3


def test_consensus_error_examples():
    assert consensus_error(np.array([5.0, 5, 5]), 3, 1) == 0.0
    assert consensus_error(np.array([0.0, 2.0]), 2, 1) == pytest.approx(1.0)
    x = np.array([1.0, 0, 0, 1, -1, -1])
    assert consensus_error(x, 3, 2) == pytest.approx(np.sqrt(2))


def test_consensus_error_length_mismatch():
    with pytest.raises(ValueError):
        consensus_error(np.zeros(5), 3, 2)


def test_penalty_matrix_rejects_definite():
    with pytest.raises(ValueError):
        penalty_matrix(np.eye(2))


@pytest.mark.parametrize("name", TOPOLOGIES)
@pytest.mark.parametrize("N", [2, 3, 4, 8])
def test_laplacian_invariants(name, N):
    L = laplacian(named_graph(name, N)).entries
    assert np.array_equal(L, L.T)
    assert np.max(np.abs(L.sum(axis=1))) <= 1e-12
    assert np.min(np.linalg.eigvalsh(L)) >= -1e-10
    assert int(np.sum(np.abs(np.linalg.eigvalsh(L)) < 1e-10)) == 1


@settings(max_examples=40, deadline=None)
@given(name=st.sampled_from(TOPOLOGIES), N=st.integers(2, 8), d=st.integers(1, 3),
       v=st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_lift_annihilates_repeated_vectors(name, N, d, v):
    Q = lift_penalty(laplacian(named_graph(name, N)), d)
    x = np.tile(np.asarray(v[:d]), N)
    assert np.max(np.abs(Q.entries @ x)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(perm_seed=st.integers(0, 2 ** 32 - 1), N=st.integers(2, 6), d=st.integers(1, 3))
def test_consensus_error_permutation_invariant(perm_seed, N, d):
    rng = np.random.default_rng(perm_seed)
    x = rng.normal(size=N * d)
    perm = rng.permutation(N)
    xp = x.reshape(N, d)[perm].ravel()
    assert consensus_error(x, N, d) == pytest.approx(consensus_error(xp, N, d), abs=1e-14)


def test_consensus_zero_iff_nullspace():
    rng = np.random.default_rng(0)
    N, d = 4, 2
    Q = lift_penalty(laplacian(named_graph("ring", N)), d)
    for _ in range(100):
        x = rng.normal(size=N * d)
        on = Q.project(x)
        off = x - on
        assert consensus_error(on, N, d) <= 1e-12
        assert np.max(np.abs(Q.entries @ on)) <= 1e-12
        if np.linalg.norm(off) > 1e-8:
            assert consensus_error(on + off, N, d) > 1e-10
            assert np.linalg.norm(Q.entries @ (on + off)) > 1e-10


def test_types_immutable():
    Q = laplacian(named_graph("ring", 4))
    with pytest.raises(ValueError):
        Q.entries[0, 0] = 5.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        named_graph("complete", 5)
