import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from m3dn.errors import AllZero, DegenerateBasis, DimensionMismatch, NegativeEntry, NotNormalized
from m3dn.ot import (
    centered_dual,
    check_metric_axioms,
    entropy,
    exact_ot,
    gibbs_kernel,
    make_histogram,
    ot_subgradient,
    sinkhorn_distance,
    sinkhorn_objective,
    sinkhorn_plan,
    sinkhorn_scalings,
    validate_cost_matrix,
)


def random_cost(rng, L, scale=1.0):
    A = rng.uniform(0, scale, (L, L))
    M = (A + A.T) / 2
    np.fill_diagonal(M, 0.0)
    return M


def random_hist(rng, L, floor=0.0):
    h = rng.uniform(floor, 1.0, L)
    return h / h.sum()


def linprog_ot(r, c, M):
    L = len(r)
    A = []
    for i in range(L):
        row = np.zeros((L, L))
        row[i, :] = 1
        A.append(row.ravel())
    for j in range(L):
        col = np.zeros((L, L))
        col[:, j] = 1
        A.append(col.ravel())
    res = linprog(M.ravel(), A_eq=np.array(A), b_eq=np.concatenate([r, c]), bounds=(0, None), method="highs")
    assert res.status == 0
    return res.fun


class TestHistogram:
    def test_strict_accepts_simplex_point(self):
        np.testing.assert_array_equal(make_histogram([0.25, 0.75]), [0.25, 0.75])

    def test_normalize(self):
        np.testing.assert_allclose(make_histogram([1, 3], mode="normalize"), [0.25, 0.75])

    def test_rejects(self):
        with pytest.raises(NotNormalized):
            make_histogram([0.5, 0.6])
        with pytest.raises(NegativeEntry):
            make_histogram([1.5, -0.5])
        with pytest.raises(AllZero):
            make_histogram([0, 0], mode="normalize")
        with pytest.raises(DimensionMismatch):
            make_histogram([1.0])

    def test_cost_matrix_validation(self):
        with pytest.raises(ValueError):
            validate_cost_matrix([[0, 1], [2, 0]])
        with pytest.raises(ValueError):
            validate_cost_matrix([[1, 1], [1, 0]])
        with pytest.raises(DimensionMismatch):
            validate_cost_matrix(np.zeros((2, 3)))


class TestSinkhorn:
    def test_marginals(self):
        rng = np.random.default_rng(0)
        for L in (2, 5, 9):
            r, c, M = random_hist(rng, L, 0.05), random_hist(rng, L, 0.05), random_cost(rng, L)
            plan, state = sinkhorn_plan(r, c, M, 50.0, max_iter=10000, tol=1e-12)
            np.testing.assert_allclose(plan.entries.sum(axis=1), r, atol=1e-12)
            np.testing.assert_allclose(plan.entries.sum(axis=0), c, atol=1e-10)
            np.testing.assert_allclose(plan.entries, state.u[:, None] * state.kernel_k * state.v[None, :])

    def test_identical_marginals_zero_cost_limit(self):
        r = np.array([0.2, 0.3, 0.5])
        M = 1.0 - np.eye(3)
        # large lambda concentrates mass on the zero-cost diagonal
        assert sinkhorn_distance(r, r, M, 200.0, max_iter=5000) < 1e-6

    def test_zero_cost_gives_independent_coupling(self):
        rng = np.random.default_rng(1)
        r, c = random_hist(rng, 4), random_hist(rng, 4)
        plan, _ = sinkhorn_plan(r, c, np.zeros((4, 4)), 10.0)
        np.testing.assert_allclose(plan.entries, np.outer(r, c), atol=1e-12)

    def test_gibbs_kernel(self):
        M = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(gibbs_kernel(M, 2.0), np.exp(-2 * M - 1))

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        L, n = 5, 7
        M = random_cost(rng, L)
        K = gibbs_kernel(M, 30.0)
        R = np.array([random_hist(rng, L, 0.01) for _ in range(n)])
        C = np.array([random_hist(rng, L, 0.01) for _ in range(n)])
        u, v, _ = sinkhorn_scalings(R, C, K, max_iter=20000, tol=1e-13)
        for k in range(n):
            plan, _ = sinkhorn_plan(R[k], C[k], M, 30.0, max_iter=20000, tol=1e-13)
            np.testing.assert_allclose(u[k][:, None] * K * v[k][None, :], plan.entries, atol=1e-12)

    def test_zero_entries_in_marginals(self):
        r = np.array([0.0, 0.5, 0.5])
        c = np.array([1.0, 0.0, 0.0])
        M = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
        plan, _ = sinkhorn_plan(r, c, M, 20.0)
        np.testing.assert_allclose(plan.cost(M), 1.5, atol=1e-9)

    def test_large_lambda_guard(self):
        rng = np.random.default_rng(3)
        r, c, M = random_hist(rng, 6, 0.01), random_hist(rng, 6, 0.01), random_cost(rng, 6)
        d = sinkhorn_distance(r, c, M, 500.0, max_iter=200000, tol=1e-9)
        assert np.isfinite(d)
        assert abs(d - exact_ot(r, c, M)[1]) < 0.05

    def test_entropy(self):
        assert entropy(np.full((2, 2), 0.25)) == pytest.approx(np.log(4))
        assert entropy(np.diag([0.5, 0.5])) == pytest.approx(np.log(2))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000))
    def test_property_distance_between_exact_and_independent(self, L, seed):
        rng = np.random.default_rng(seed)
        r, c, M = random_hist(rng, L, 0.01), random_hist(rng, L, 0.01), random_cost(rng, L)
        d = sinkhorn_distance(r, c, M, 50.0, max_iter=20000, tol=1e-11)
        assert d >= exact_ot(r, c, M)[1] - 1e-9
        assert d <= r @ M @ c + 1e-9


class TestSubgradient:
    def test_sums_to_zero(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            L = rng.integers(2, 9)
            g = ot_subgradient(random_hist(rng, L, 0.01), random_hist(rng, L, 0.01), random_cost(rng, L), 50.0)
            assert abs(g.sum()) < 1e-12

    def test_centered_dual_rowwise(self):
        u = np.array([[1.0, np.e], [np.e, np.e]])
        np.testing.assert_allclose(centered_dual(u, 2.0), [[-0.25, 0.25], [0.0, 0.0]])

    def test_matches_tangent_difference_of_entropic_objective(self):
        rng = np.random.default_rng(5)
        h = 1e-6
        for _ in range(10):
            L = int(rng.integers(3, 7))
            r, c, M = random_hist(rng, L, 0.05), random_hist(rng, L, 0.05), random_cost(rng, L)
            g = ot_subgradient(r, c, M, 50.0, max_iter=100000, tol=1e-14)
            for i in range(L):
                e = -np.ones(L) / L
                e[i] += 1.0
                fd = (sinkhorn_objective(r + h * e, c, M, 50.0, 100000, 1e-14)
                      - sinkhorn_objective(r - h * e, c, M, 50.0, 100000, 1e-14)) / (2 * h)
                assert fd == pytest.approx(g @ e, rel=1e-5, abs=1e-8)

    def test_rejects_zero_prediction(self):
        with pytest.raises(ValueError):
            ot_subgradient([0.0, 1.0], [0.5, 0.5], 1 - np.eye(2), 10.0)


class TestExactOT:
    def test_matches_linprog(self):
        rng = np.random.default_rng(6)
        for _ in range(60):
            L = int(rng.integers(2, 10))
            r, c, M = random_hist(rng, L), random_hist(rng, L), random_cost(rng, L)
            plan, value = exact_ot(r, c, M)
            assert value == pytest.approx(linprog_ot(r, c, M), abs=1e-10)
            np.testing.assert_allclose(plan.entries.sum(axis=1), r, atol=1e-12)
            np.testing.assert_allclose(plan.entries.sum(axis=0), c, atol=1e-12)
            assert plan.entries.min() >= 0

    def test_degenerate_marginals(self):
        # equal, sparse and point-mass marginals create degenerate bases
        rng = np.random.default_rng(7)
        cases = [
            (np.full(4, 0.25), np.full(4, 0.25)),
            (np.array([0.5, 0.5, 0, 0]), np.array([0, 0, 0.5, 0.5])),
            (np.array([1.0, 0, 0, 0]), np.full(4, 0.25)),
            (np.array([0.5, 0.5, 0.0]), np.array([0.5, 0.0, 0.5])),
        ]
        for r, c in cases:
            M = random_cost(rng, len(r))
            assert exact_ot(r, c, M)[1] == pytest.approx(linprog_ot(r, c, M), abs=1e-10)

    def test_integer_costs_with_ties(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            L = int(rng.integers(3, 7))
            A = rng.integers(0, 3, (L, L)).astype(float)
            M = A + A.T
            np.fill_diagonal(M, 0)
            r = rng.integers(0, 3, L).astype(float) + 0.0
            r[0] += 1
            c = rng.integers(0, 3, L).astype(float)
            c[-1] += 1
            r, c = r / r.sum(), c / c.sum()
            assert exact_ot(r, c, M)[1] == pytest.approx(linprog_ot(r, c, M), abs=1e-10)

    def test_two_label_closed_form(self):
        # L = 2: all mass that must move crosses the single off-diagonal cost
        r, c = np.array([0.7, 0.3]), np.array([0.4, 0.6])
        M = np.array([[0.0, 2.0], [2.0, 0.0]])
        assert exact_ot(r, c, M)[1] == pytest.approx(0.3 * 2.0)

    def test_pivot_budget(self):
        rng = np.random.default_rng(9)
        r, c, M = random_hist(rng, 8), random_hist(rng, 8), random_cost(rng, 8)
        with pytest.raises(DegenerateBasis):
            exact_ot(r, c, M, max_pivots=0)

    def test_rejects_large_L(self):
        with pytest.raises(ValueError):
            exact_ot(np.full(17, 1 / 17), np.full(17, 1 / 17), np.zeros((17, 17)))


class TestMetricAxioms:
    def test_euclidean_distance_matrix_passes(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(6, 3))
        D = np.linalg.norm(X[:, None] - X[None], axis=2)
        rep = check_metric_axioms(D)
        assert rep.ok and rep.triples_checked == 6 ** 3

    def test_squared_mode(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(5, 2))
        D2 = ((X[:, None] - X[None]) ** 2).sum(axis=2)
        assert check_metric_axioms(D2, squared=True).ok

    def test_detects_triangle_violation(self):
        M = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], dtype=float)
        rep = check_metric_axioms(M)
        assert not rep.ok and rep.triangle_violations > 0

    def test_detects_asymmetry_and_diagonal(self):
        M = np.array([[0.1, 1.0], [2.0, 0.0]])
        rep = check_metric_axioms(M)
        assert not rep.symmetry and not rep.zero_diagonal

    def test_sampled(self):
        M = 1 - np.eye(20)
        rep = check_metric_axioms(M, sample_count=500, seed=3)
        assert rep.ok and rep.triples_checked == 500


def test_exact_plan_is_a_vertex():
    rng = np.random.default_rng(12)
    for _ in range(50):
        L = int(rng.integers(2, 10))
        plan, _ = exact_ot(random_hist(rng, L), random_hist(rng, L), random_cost(rng, L))
        assert np.count_nonzero(plan.entries > 1e-15) <= 2 * L - 1
