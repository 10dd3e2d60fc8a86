"""Sparse storage and direct solves for the saddle-point systems."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a factorisation meets a zero pivot."""

    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


def compress(rows, cols, vals, shape):
    """Triplets to CSR with sorted, deduplicated column indices (duplicates summed)."""
    A = sp.coo_matrix((np.asarray(vals, dtype=float).ravel(),
                       (np.asarray(rows).ravel(), np.asarray(cols).ravel())), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def as_csr(A):
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


def matvec(A, x):
    return A @ np.asarray(x, dtype=float)


def _pivot_row(A):
    """Locate a failing pivot with a dense partially pivoted LU (small systems only)."""
    import scipy.linalg as sla
    n = A.shape[0]
    if n > 4000:
        return None
    P, L, U = sla.lu(A.toarray())
    d = np.abs(np.diag(U))
    bad = np.nonzero(d <= 1e-14 * max(d.max(initial=0.0), 1.0))[0]
    if len(bad) == 0:
        return None
    # row of A that was moved into the failing pivot position
    return int(np.argmax(P[:, bad[0]]))


def _factor(A):
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        row = _pivot_row(A)
        raise SingularMatrixError(f"singular matrix (pivot row {row}): {exc}", row) from exc
    d = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(d)) or d.min(initial=1.0) == 0.0:
        row = _pivot_row(A)
        raise SingularMatrixError(f"singular matrix (pivot row {row})", row)
    return lu


def dense_rows(A, frac=0.05, min_nnz=64, ratio=10.0):
    """Rows with more than max(min_nnz, frac * n, ratio * median) entries."""
    A = as_csr(A)
    nnz = np.diff(A.indptr)
    if len(nnz) == 0:
        return np.zeros(0, dtype=int)
    cut = max(min_nnz, frac * A.shape[0], ratio * np.median(nnz))
    return np.nonzero(nnz > cut)[0]


class Factorization:
    """Sparse LU of A, with dense rows split off as a low-rank correction.

    Each dense row (typically a mean-value constraint) is replaced by its
    largest entry for the sparse factorisation; the Woodbury identity then
    restores the original matrix. This keeps the fill of the saddle-point
    systems close to that of the constraint-free operator.
    """

    def __init__(self, A):
        A = as_csr(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.n = A.shape[0]
        D = dense_rows(A)
        self.lu = None
        if len(D):
            try:
                self._split(A, D)
                return
            except (SingularMatrixError, np.linalg.LinAlgError):
                pass
        self.D = np.zeros(0, dtype=int)
        self.lu = _factor(A)

    def _split(self, A, D):
        S = A.tolil(copy=True)
        for i in D:
            row = A.getrow(i)
            j = row.indices[np.argmax(np.abs(row.data))]
            S.rows[i] = [j]
            S.data[i] = [A[i, j]]
        S = S.tocsr()
        lu = _factor(S)
        W = (A[D] - S[D]).toarray()               # k x n
        E = np.zeros((self.n, len(D)))
        E[D, np.arange(len(D))] = 1.0
        Z = lu.solve(E)                           # S^{-1} E
        cap = np.eye(len(D)) + W @ Z
        if not np.all(np.isfinite(cap)) or abs(np.linalg.det(cap)) < 1e-12 * max(1.0, np.abs(cap).max()):
            raise np.linalg.LinAlgError("singular capacitance matrix")
        self.lu, self.D, self.W, self.Z, self.cap = lu, D, W, Z, cap

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        x = self.lu.solve(b)
        if len(self.D):
            x = x - self.Z @ np.linalg.solve(self.cap, self.W @ x)
            # one refinement sweep against the original matrix
            r = b - self.A @ x
            y = self.lu.solve(r)
            x = x + y - self.Z @ np.linalg.solve(self.cap, self.W @ y)
        return x


def factorize(A):
    """Sparse LU (COLAMD ordering) with dense rows treated by a low-rank update."""
    return Factorization(A)


def lu_solve(A, b):
    """Solve ``A x = b`` by sparse LU with partial pivoting."""
    F = factorize(A)
    x = F.solve(b)
    if not np.all(np.isfinite(x)):
        row = _pivot_row(F.A)
        raise SingularMatrixError(f"singular matrix (pivot row {row})", row)
    return x
