import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_oracle, random_problem
from koopexo.qp import QpProblem, SolverFault, kkt_residual, solve_box_qp


def test_zero_linear_term():
    sol = solve_box_qp(QpProblem(2 * np.eye(3), np.zeros(3), -np.ones(3), np.ones(3)))
    assert np.array_equal(sol.u, np.zeros(3))


def test_one_dimensional_clip():
    sol = solve_box_qp(QpProblem(np.array([[2.0]]), np.array([-6.0]), -np.ones(1), np.ones(1)))
    assert sol.u[0] == 1.0
    assert sol.residual == 0.0


def test_kkt_residual_conventions():
    H = np.array([[2.0]])
    # at the upper bound with the gradient pointing down (outward) the point is optimal
    assert kkt_residual(H, np.array([-6.0]), np.array([1.0]), -1, 1) == 0.0
    # at the upper bound with the gradient pointing up it is not
    assert kkt_residual(H, np.array([2.0]), np.array([1.0]), -1, 1) == 4.0
    assert kkt_residual(H, np.array([1.0]), np.array([0.0]), -1, 1) == 1.0


@pytest.mark.parametrize("seed", range(6))
def test_matches_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    qp = random_problem(rng, 1 + seed % 3)
    assert np.abs(solve_box_qp(qp).u - grid_oracle(qp)).max() <= 0.01


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 10))
def test_solution_is_feasible_and_kkt(seed, n):
    qp = random_problem(np.random.default_rng(seed), n)
    sol = solve_box_qp(qp, tol=1e-6)
    assert np.all(sol.u >= -1) and np.all(sol.u <= 1)
    assert kkt_residual(qp.H, qp.f, sol.u, qp.lo, qp.hi) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_interior_solution_is_unconstrained_minimiser(seed):
    rng = np.random.default_rng(seed)
    qp = random_problem(rng, 4)
    qp.f = 0.01 * qp.f
    u_star = -np.linalg.solve(qp.H, qp.f)
    if np.abs(u_star).max() < 1:
        assert np.allclose(solve_box_qp(qp, tol=1e-10).u, u_star, atol=1e-8)


def test_warm_start_outside_box_is_projected():
    qp = random_problem(np.random.default_rng(1), 5)
    cold = solve_box_qp(qp).u
    warm = solve_box_qp(qp, u0=np.full(5, 7.0)).u
    assert np.allclose(cold, warm, atol=1e-6)


def test_iteration_cap_raises_with_residual():
    qp = random_problem(np.random.default_rng(2), 8)
    with pytest.raises(SolverFault) as info:
        solve_box_qp(qp, tol=1e-6, max_iter=0)
    assert info.value.residual > 1e-6
    assert info.value.iterations == 0
