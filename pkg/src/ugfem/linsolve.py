"""Sparse symmetric-indefinite direct solve and dense generalized eigensolve.

Thin wrappers around scipy: a pivoted sparse LU with a post-hoc residual
guarantee stands in for an LDL^T factorization (any algorithm meeting the
residual contract is conformant), and the inf-sup eigenproblems are solved
densely at desk scale.
"""

import numpy as np
from scipy import sparse
from scipy.linalg import cholesky, eigh
from scipy.sparse.linalg import splu

RESIDUAL_TOL = 1e-10


class SingularFactorizationError(RuntimeError):
    """Factorization broke down; ``pivot`` holds the deficient index if known."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SparseSymMatrix:
    """Sparse matrix tagged as symmetric; stores CSR internally."""

    def __init__(self, matrix, symmetric=True):
        self.matrix = sparse.csr_matrix(matrix)
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("matrix must be square")
        self.symmetric = bool(symmetric)
        if self.symmetric:
            self.check_symmetry()

    @property
    def dimension(self):
        return self.matrix.shape[0]

    def check_symmetry(self, tol=1e-12):
        gap = abs(self.matrix - self.matrix.T)
        worst = gap.max() if gap.nnz else 0.0
        scale = abs(self.matrix).max() if self.matrix.nnz else 1.0
        if worst > tol * max(scale, 1.0):
            raise ValueError(f"matrix is not symmetric: max deviation {worst}")
        return worst


def _as_csr(A):
    if isinstance(A, SparseSymMatrix):
        return A.matrix
    return sparse.csr_matrix(A)


def _find_deficient_pivot(A):
    """Best-effort deficient pivot index for diagnostics (small systems)."""
    if A.shape[0] > 2000:
        return None
    from scipy.linalg import ldl

    try:
        _, d, perm = ldl(A.toarray())
    except Exception:
        return None
    diag = np.abs(np.diag(d))
    scale = diag.max() if diag.size else 1.0
    bad = np.flatnonzero(diag <= 1e-14 * max(scale, 1.0))
    return int(perm[bad[0]]) if bad.size else None


def factor_solve(A, b):
    """Solve A x = b by sparse LU; guarantees the residual contract.

    Raises SingularFactorizationError on pivot breakdown or when the
    residual exceeds 1e-10 (||A|| ||x|| + ||b||).
    """
    A = _as_csr(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError("dimension mismatch in factor_solve")
    try:
        lu = splu(A.tocsc())
        x = lu.solve(b)
    except RuntimeError as exc:
        raise SingularFactorizationError(
            f"sparse factorization failed: {exc}", pivot=_find_deficient_pivot(A)
        ) from exc
    if not np.all(np.isfinite(x)):
        raise SingularFactorizationError(
            "factorization produced non-finite solution",
            pivot=_find_deficient_pivot(A),
        )
    norm_a = sparse.linalg.norm(A, np.inf) if A.nnz else 0.0
    resid = np.linalg.norm(A @ x - b)
    bound = RESIDUAL_TOL * (norm_a * np.linalg.norm(x) + np.linalg.norm(b))
    if resid > max(bound, 1e-300):
        raise SingularFactorizationError(
            f"solution residual {resid:.3e} exceeds bound {bound:.3e} "
            "(matrix numerically singular)",
            pivot=_find_deficient_pivot(A),
        )
    return x


def gen_eig_smallest(A, M, n_smallest=1):
    """Smallest eigenpairs of A v = lambda M v with M SPD (dense solve).

    Intended for desk-scale pencils (dimension up to a few thousand).
    Returns (values, vectors) with the ``n_smallest`` smallest eigenvalues
    in ascending order; residuals satisfy ||Av - lambda Mv|| <= 1e-8 scale.
    """
    Ad = _as_csr(A).toarray()
    Md = _as_csr(M).toarray()
    if Ad.shape != Md.shape:
        raise ValueError("pencil dimension mismatch")
    try:
        cholesky(Md)
    except np.linalg.LinAlgError as exc:
        raise ValueError("M must be symmetric positive definite") from exc
    vals, vecs = eigh(Ad, Md)
    n = int(n_smallest)
    return vals[:n], vecs[:, :n]
