"""Sparse solves and the small dense generalized symmetric eigenproblem."""
from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError


def check_symmetric(matrix, rtol: float = 1e-12) -> bool:
    if sp.issparse(matrix):
        matrix = sp.csr_matrix(matrix)
        diff = abs(matrix - matrix.T).max()
        scale = abs(matrix).max()
    else:
        matrix = np.asarray(matrix)
        diff = np.abs(matrix - matrix.T).max()
        scale = np.abs(matrix).max()
    return bool(diff <= rtol * max(scale, np.finfo(float).tiny))


def sparse_solve(A, b, method: str = "direct", rtol: float = 1e-10):
    """Solve ``A x = b``; the direct path factorises with SuperLU.

    ``method='iterative'`` uses GMRES with an incomplete-LU preconditioner.
    """
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise SolverError(f"matrix must be square, got {A.shape}")
    if method == "direct":
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        diag_u = np.abs(lu.U.diagonal())
        if diag_u.size and diag_u.min() <= 1e-18 * max(diag_u.max(), 1e-300):
            raise SolverError(f"matrix is singular to working precision "
                              f"(smallest pivot {diag_u.min():.3e}, "
                              f"largest {diag_u.max():.3e}, at position {int(diag_u.argmin())})")
        x = lu.solve(b)
    elif method == "iterative":
        ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, M=M, rtol=rtol * 1e-2, restart=200, maxiter=2000)
        if info != 0:
            raise SolverError(f"GMRES did not converge (info={info})")
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite solution")
    return x


def generalized_symmetric_eig(A, S, regularize: bool = True):
    """Ascending eigenpairs of ``A v = lam S v`` with S-orthonormal vectors.

    If S fails a Cholesky test a diagonal shift of 1e-12 * max|diag S| is
    tried (with a warning) when ``regularize`` is set.
    """
    A = np.asarray(A, dtype=float)
    S = np.asarray(S, dtype=float)
    if A.shape != S.shape or A.shape[0] != A.shape[1]:
        raise ValueError("A and S must be square with equal shape")
    if not check_symmetric(A, 1e-10) or not check_symmetric(S, 1e-10):
        raise SolverError("generalized eigenproblem requires symmetric matrices")
    A = 0.5 * (A + A.T)
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        if not regularize:
            raise SolverError("S is not symmetric positive definite") from None
        shift = 1e-12 * max(np.abs(np.diag(S)).max(), 1e-300)
        warnings.warn(f"S is numerically singular; adding diagonal shift {shift:.3e}",
                      RuntimeWarning, stacklevel=2)
        S = S + shift * np.eye(S.shape[0])
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise SolverError("S is not symmetric positive definite") from None
    vals, vecs = sla.eigh(A, S)
    order = np.argsort(vals, kind="stable")
    return vals[order], vecs[:, order]
