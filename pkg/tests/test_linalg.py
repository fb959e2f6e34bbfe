import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from msblackoil.errors import SolverError
from msblackoil.linalg import check_symmetric, generalized_symmetric_eig, sparse_solve


def _spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def test_identity_solve():
    b = np.arange(5.0)
    assert np.array_equal(sparse_solve(sp.identity(5), b), b)


@pytest.mark.parametrize("method", ["direct", "iterative"])
def test_random_spd_against_dense(method):
    rng = np.random.default_rng(0)
    A = _spd(rng, 50)
    b = rng.normal(size=50)
    x = sparse_solve(sp.csr_matrix(A), b, method=method)
    assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-10, atol=1e-12)


def test_laplacian_analytic():
    n = 200
    h = 1.0 / (n + 1)
    A = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h ** 2
    x = np.linspace(h, 1 - h, n)
    # -u'' = 2 with zero ends has u = x(1 - x); the three-point stencil is exact for quadratics
    u = sparse_solve(A, np.full(n, 2.0))
    assert np.abs(u - x * (1 - x)).max() < 1e-12


def test_solver_errors():
    with pytest.raises(SolverError, match="singular"):
        sparse_solve(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])), np.ones(2))
    with pytest.raises(SolverError, match="square"):
        sparse_solve(sp.csr_matrix(np.ones((2, 3))), np.ones(2))
    with pytest.raises(ValueError):
        sparse_solve(sp.identity(2), np.ones(2), method="magic")


def test_eig_standard_and_diagonal():
    lam, vec = generalized_symmetric_eig(np.diag([3.0, 1.0, 2.0]), np.eye(3))
    assert np.allclose(lam, [1, 2, 3])
    rng = np.random.default_rng(1)
    A = _spd(rng, 6)
    lam, _ = generalized_symmetric_eig(A, np.eye(6))
    assert np.allclose(lam, np.linalg.eigvalsh(A), rtol=1e-12)


def test_eig_cubic_roots():
    rng = np.random.default_rng(2)
    A, S = _spd(rng, 3), _spd(rng, 3)
    # det(A - t S) is a cubic: recover it from four samples and take its roots
    t = np.array([-1.0, 0.0, 1.0, 2.0])
    coef = np.polyfit(t, [np.linalg.det(A - ti * S) for ti in t], 3)
    roots = np.sort(np.roots(coef).real)
    lam, _ = generalized_symmetric_eig(A, S)
    assert np.allclose(lam, roots, rtol=1e-10)


def test_eig_errors_and_regularization():
    with pytest.raises(SolverError):
        generalized_symmetric_eig(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(2))
    singular = np.diag([1.0, 0.0])
    with pytest.raises(SolverError):
        generalized_symmetric_eig(np.eye(2), singular, regularize=False)
    with pytest.warns(RuntimeWarning, match="shift"):
        lam, _ = generalized_symmetric_eig(np.eye(2), singular)
    assert lam[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        generalized_symmetric_eig(np.eye(2), np.eye(3))


def test_check_symmetric():
    assert check_symmetric(sp.identity(3))
    assert not check_symmetric(np.array([[1.0, 1.0], [0.0, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_eig_backward_error(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    A, S = a + a.T, _spd(rng, n)
    lam, X = generalized_symmetric_eig(A, S)
    assert np.all(np.diff(lam) >= 0)
    assert np.abs(X.T @ S @ X - np.eye(n)).max() < 1e-10
    assert np.linalg.norm(A @ X - S @ X * lam, axis=0).max() <= 1e-10 * np.linalg.norm(A, 2)
    lam2, X2 = generalized_symmetric_eig(A, S)
    assert np.array_equal(lam, lam2) and np.array_equal(X, X2)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_solve_backward_error(n, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=0.3, random_state=rng) + n * sp.identity(n)
    b = rng.normal(size=n)
    x = sparse_solve(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
