import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochplatoon.errors import SlowConvergence
from stochplatoon.lyapunov import fixed_point_stein, solve_stein, solve_stein_kron


def _stable_matrix(seed, n, radius):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    return A * radius / np.abs(np.linalg.eigvals(A)).max()


def test_scalar_geometric_sum():
    X = solve_stein(np.array([[0.6]]), np.array([[1.0]]))
    assert abs(X[0, 0] - 1.0 / (1.0 - 0.36)) < 1e-14


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0.0, 0.95))
def test_doubling_matches_kronecker_and_iteration(seed, n, radius):
    A = _stable_matrix(seed, n, radius)
    G = np.random.default_rng(seed + 1).normal(size=(n, n))
    Q = G @ G.T
    X = solve_stein(A, Q)
    assert np.allclose(X, solve_stein_kron(A, Q), rtol=1e-9, atol=1e-10)
    assert np.allclose(X, fixed_point_stein(A, Q), rtol=1e-9, atol=1e-10)
    assert np.allclose(X, A @ X @ A.T + Q, rtol=1e-10, atol=1e-10)


def test_jordan_block_converges():
    # a nilpotent-plus-diagonal block decays polynomially before geometrically
    A = 0.5 * np.eye(12) + np.eye(12, k=-1)
    Q = np.eye(12)
    X = solve_stein(A, Q)
    assert np.allclose(X, A @ X @ A.T + Q, rtol=1e-9)


def test_unstable_matrix_raises():
    with pytest.raises(SlowConvergence):
        solve_stein(np.array([[1.1]]), np.array([[1.0]]))
