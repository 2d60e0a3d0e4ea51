import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgflow.catalog import ENTRIES, builtin_catalog, catalog_penalty, known_critical_points
from dgflow.objective import (
    AbsAgent, FunctionField, MaxAffine, NotCritical, Polynomial, QuadraticAgent,
    SeparableObjective, UnknownName, classify_critical_point, coercivity_flag, eval_sum,
    min_norm_point, min_norm_subgrad_estimate, restrict, subgrad_select,
)

TOL_FD = 1e-5


def linear(sign):
    return FunctionField(1, lambda x: sign * x[0], lambda x: np.array([sign]))


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f.value(x + e) - f.value(x - e)) / (2 * h)
    return g


def fd_hess(f, x, h=1e-5):
    H = np.zeros((x.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        H[:, i] = (f.subgrad(x + e) - f.subgrad(x - e)) / (2 * h)
    return H


def catalog_fields(rng):
    """Every catalog field with random parameters (N = 3 agents, d = 2)."""
    return {
        "saddle3d": builtin_catalog("saddle3d"),
        "coercivity_counterexample": builtin_catalog("coercivity_counterexample"),
        "eig_discontinuity": builtin_catalog("eig_discontinuity"),
        "abs_median": builtin_catalog("abs_median", 3, 2, c=rng.uniform(-2, 2, (3, 2))),
        "quartic_wells": builtin_catalog("quartic_wells", 3, 2, tilt=rng.uniform(-0.3, 0.3, (3, 2))),
        "quadratic": builtin_catalog("quadratic", 3, 2, c=rng.uniform(-2, 2, (3, 2))),
        "max_affine": builtin_catalog("max_affine", slopes=rng.normal(size=(4, 2)),
                                      intercepts=rng.normal(size=4)),
    }


def smooth_points(f, rng, n=50, box=2.0, clearance=1e-3):
    pts = []
    while len(pts) < n:
        x = rng.uniform(-box, box, f.dim)
        if f.kink_distance(x) >= clearance and np.linalg.norm(x) > 0.3:
            pts.append(x)
    return pts


# ---------------------------------------------------------------------------
# evaluation


def test_eval_sum_quadratics_at_zero():
    obj = builtin_catalog("quadratic", 4, 2)
    assert eval_sum(obj, np.zeros(8)) == 0.0


def test_eval_sum_linear_agents():
    obj = SeparableObjective([linear(1.0), linear(-1.0)])
    assert eval_sum(obj, np.array([3.0, 5.0])) == -2.0


def test_saddle3d_hand_value():
    assert builtin_catalog("saddle3d").value(np.array([1.0, 1.0, 0.0])) == pytest.approx(1.0)
    assert builtin_catalog("saddle3d").value(np.zeros(3)) == 0.0


def test_abs_median_sum_value():
    obj = builtin_catalog("abs_median", 3, 1, c=[0.0, 1.0, 3.0])
    assert obj.sum_field().value(np.array([1.0])) == 3.0


def test_eval_sum_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_sum(builtin_catalog("quadratic", 3, 1), np.zeros(4))


def test_separable_matches_component_sum():
    rng = np.random.default_rng(3)
    obj = builtin_catalog("quartic_wells", 4, 2, tilt=rng.normal(size=(4, 2)))
    for _ in range(20):
        x = rng.normal(size=8)
        blocks = x.reshape(4, 2)
        assert obj.value(x) == pytest.approx(sum(a.value(b) for a, b in zip(obj.agents, blocks)))


def test_separable_hessian_block_diagonal():
    obj = builtin_catalog("quartic_wells", 3, 2)
    H = obj.hessian(np.random.default_rng(0).normal(size=6))
    for i in range(3):
        for j in range(3):
            if i != j:
                assert np.all(H[2 * i:2 * i + 2, 2 * j:2 * j + 2] == 0)


def test_unknown_name():
    with pytest.raises(UnknownName):
        builtin_catalog("no_such_field")


# ---------------------------------------------------------------------------
# subgradient selection


def test_abs_smooth_branch():
    assert subgrad_select(AbsAgent(np.zeros(1)), np.array([2.0])).tolist() == [1.0]


def test_abs_kink_selects_zero():
    assert subgrad_select(AbsAgent(np.zeros(1)), np.array([0.0])).tolist() == [0.0]


def test_max_affine_kink_selects_min_norm():
    f = MaxAffine([[1.0], [2.0]], [0.0, 0.0])
    assert subgrad_select(f, np.array([0.0]))[0] == pytest.approx(1.0)


def test_min_norm_point_oracle():
    # segment from (1, 0) to (0, 1): closest point to the origin is (1/2, 1/2)
    assert np.allclose(min_norm_point(np.array([[1.0, 0], [0, 1]])), [0.5, 0.5])
    # triangle containing the origin
    assert np.allclose(min_norm_point(np.array([[1.0, 0], [-1, 1], [-1, -1]])), 0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), m=st.integers(1, 6), d=st.integers(1, 4))
def test_min_norm_point_is_optimal(seed, m, d):
    P = np.random.default_rng(seed).normal(size=(m, d))
    x = min_norm_point(P)
    # optimality: <p - x, x> >= 0 for every vertex p
    assert np.all(P @ x - x @ x >= -1e-9 * max(1.0, np.max(np.abs(P)) ** 2))


# ---------------------------------------------------------------------------
# min-norm estimate


@pytest.mark.parametrize("radius", [1e-1, 1e-3, 1e-6])
def test_estimate_smooth_quadratic(radius):
    f = QuadraticAgent(np.zeros(1))
    assert min_norm_subgrad_estimate(f, np.zeros(1), radius=radius) <= radius


def test_estimate_abs_at_kink():
    f = AbsAgent(np.zeros(1))
    assert min_norm_subgrad_estimate(f, np.zeros(1), radius=1e-3) <= 1e-3


@pytest.mark.parametrize("x", [-4.0, 0.0, 2.5])
def test_estimate_linear(x):
    assert min_norm_subgrad_estimate(linear(1.0), np.array([x]), radius=0.1) == pytest.approx(1.0)


def test_estimate_rejects_bad_radius():
    with pytest.raises(ValueError):
        min_norm_subgrad_estimate(linear(1.0), np.zeros(1), radius=0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), N=st.sampled_from([3, 5, 7]))
def test_abs_median_estimate_at_and_off_median(seed, N):
    rng = np.random.default_rng(seed)
    c = np.sort(rng.choice(np.arange(-40, 41), size=N, replace=False).astype(float))
    f = builtin_catalog("abs_median", N, 1, c=c).sum_field()
    assert min_norm_subgrad_estimate(f, np.array([np.median(c)]), radius=1e-7) <= 1e-6
    # half-integers are 0.5 away from every center; sign sums there are odd integers
    x = np.median(c) + 0.5
    assert min_norm_subgrad_estimate(f, np.array([x]), radius=1e-7) >= 1.0


# ---------------------------------------------------------------------------
# classification


def test_saddle3d_restricted_origin_is_regular_saddle():
    rf = restrict(builtin_catalog("saddle3d"), catalog_penalty("saddle3d"))
    rep = classify_critical_point(rf, np.zeros(2))
    assert rep.classification == "regular_saddle"
    assert rep.q == 1
    assert np.allclose(np.sort(rep.hessian_spectrum), [-1.0, 1.0])


def test_quadratic_min_classified():
    rep = classify_critical_point(QuadraticAgent(np.zeros(3)), np.zeros(3))
    assert rep.classification == "local_min_candidate" and rep.q == 0


def test_quartic_monomial_degenerate():
    f = Polynomial(1, [((4,), 1.0)])
    assert classify_critical_point(f, np.zeros(1)).classification == "degenerate"


def test_not_critical_raises():
    with pytest.raises(NotCritical):
        classify_critical_point(QuadraticAgent(np.zeros(1)), np.ones(1))


def test_kink_reports_nonsmooth():
    rep = classify_critical_point(AbsAgent(np.zeros(1)), np.zeros(1))
    assert rep.classification == "nonsmooth_point"


def test_regular_saddle_has_mixed_nonzero_spectrum():
    f = Polynomial(3, [((2, 0, 0), 0.5), ((0, 2, 0), -1.0), ((0, 0, 2), 2.0)])
    rep = classify_critical_point(f, np.zeros(3))
    assert rep.classification == "regular_saddle"
    assert np.min(np.abs(rep.hessian_spectrum)) > 1e-8
    assert rep.q == 1


def test_catalog_critical_points_are_critical():
    rf = restrict(builtin_catalog("saddle3d"), catalog_penalty("saddle3d"))
    for cp in known_critical_points("saddle3d"):
        y = np.asarray(cp.location)[:2]
        rep = classify_critical_point(rf, y)
        assert rep.classification == cp.kind and rep.q == cp.q


def test_quartic_wells_critical_points():
    obj = builtin_catalog("quartic_wells", 4, 1)
    kinds = {cp.location: cp.kind for cp in known_critical_points("quartic_wells", obj)}
    assert kinds[(-1.0,)] == kinds[(1.0,)] == "local_min_candidate"
    assert kinds[(0.0,)] == "local_max_candidate"


def test_coercivity_flag():
    assert coercivity_flag(QuadraticAgent(np.zeros(2)))
    assert not coercivity_flag(builtin_catalog("coercivity_counterexample"))


# ---------------------------------------------------------------------------
# oracle suites over the whole catalog


def test_catalog_covers_required_names():
    for name in ["saddle3d", "coercivity_counterexample", "eig_discontinuity", "abs_median",
                 "quartic_wells", "quadratic"]:
        assert name in ENTRIES


@pytest.mark.parametrize("name", sorted(ENTRIES))
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(11)
    f = catalog_fields(rng)[name]
    for x in smooth_points(f, rng):
        g = f.subgrad(x)
        assert np.max(np.abs(g - fd_grad(f, x))) <= TOL_FD * max(1.0, np.max(np.abs(g)))


@pytest.mark.parametrize("name", sorted(ENTRIES))
def test_hessian_matches_finite_differences(name):
    rng = np.random.default_rng(12)
    f = catalog_fields(rng)[name]
    for x in smooth_points(f, rng):
        H = f.hessian(x)
        assert np.allclose(H, H.T, atol=1e-12)
        assert np.max(np.abs(H - fd_hess(f, x))) <= 1e-4 * max(1.0, np.max(np.abs(H)))


def test_eig_discontinuity_axis_swap():
    f = builtin_catalog("eig_discontinuity")
    for r in (0.5, 0.3, 0.2):
        _, V0 = np.linalg.eigh(f.hessian(np.array([r, 0.0])))
        _, Vpi = np.linalg.eigh(f.hessian(np.array([-r, 0.0])))
        # ascending order: the eigenvector of the smaller eigenvalue switches axis
        assert abs(V0[:, 0] @ Vpi[:, 0]) < 1e-8
        assert abs(V0[:, 0] @ Vpi[:, 1]) == pytest.approx(1.0)


def test_polynomial_terms_differentiate():
    f = Polynomial(2, [((2, 1), 3.0), ((0, 3), -1.0), ((1, 0), 2.0)])
    x = np.array([0.7, -1.3])
    assert np.allclose(f.subgrad(x), [6 * x[0] * x[1] + 2, 3 * x[0] ** 2 - 3 * x[1] ** 2])
    assert np.allclose(f.hessian(x), [[6 * x[1], 6 * x[0]], [6 * x[0], -6 * x[1]]])


@settings(max_examples=50, deadline=None)
@given(x=st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_subgrad_bounded_on_bounded_sets(x):
    f = builtin_catalog("abs_median", 2, 1, c=[0.0, 1.0])
    assert np.all(np.abs(f.subgrad(np.asarray(x))) <= 1.0)
