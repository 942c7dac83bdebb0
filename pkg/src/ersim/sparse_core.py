"""Sparse and small dense linear algebra kernels.

Sparse matrices are plain ``scipy.sparse.csr_matrix`` objects kept in a
canonical form (sorted indices, no duplicates, no stored zeros).  Direct
factorization is SuperLU with COLAMD column ordering and threshold partial
pivoting.  Dense matrix functions act on the small reduced matrices that the
Krylov code produces.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, SingularMatrix

SparseRealMatrix = sp.csr_matrix

PIVOT_THRESHOLD = 0.1
SINGULAR_RTOL = 1e-14

_counter = threading.local()


def factorization_count() -> int:
    """Number of ``lu_factor`` calls made so far on the calling thread.

    Integrators difference this around a step to report how many
    factorizations the step really performed.
    """
    return getattr(_counter, "n", 0)


def as_sparse(A, shape: tuple[int, int] | None = None) -> sp.csr_matrix:
    """Return ``A`` as a canonical float64 CSR matrix (copy)."""
    if sp.issparse(A):
        M = sp.csr_matrix(A, dtype=np.float64, copy=True)
    else:
        M = sp.csr_matrix(np.asarray(A, dtype=np.float64))
    if shape is not None and M.shape != shape:
        raise ContractViolation(f"expected shape {shape}, got {M.shape}")
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()
    return M


def from_triplets(rows, cols, vals, shape: tuple[int, int]) -> sp.csr_matrix:
    """Assemble a CSR matrix from (row, col, value) triplets, summing duplicates."""
    M = sp.coo_matrix(
        (np.asarray(vals, dtype=np.float64), (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=shape,
    ).tocsr()
    M.sum_duplicates()
    M.eliminate_zeros()
    M.sort_indices()
    return M


def spmv(A: sp.csr_matrix, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != A.shape[1]:
        raise ContractViolation(f"spmv: matrix has {A.shape[1]} columns, vector has length {x.shape}")
    return np.asarray(A @ x, dtype=np.float64)


def empty_rows(A: sp.csr_matrix) -> np.ndarray:
    """Indices of rows with no stored entries."""
    return np.flatnonzero(np.diff(A.indptr) == 0)


@dataclass(frozen=True, eq=False)
class Factorization:
    """Reusable sparse LU factors, ``Pr @ A @ Pc == lower @ upper``."""

    row_perm: np.ndarray
    col_perm: np.ndarray
    source_nnz: int
    matrix: sp.csr_matrix
    _lu: spla.SuperLU

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def lower(self) -> sp.csr_matrix:
        return sp.csr_matrix(self._lu.L)

    @cached_property
    def upper(self) -> sp.csr_matrix:
        return sp.csr_matrix(self._lu.U)

    @property
    def fill_nnz(self) -> int:
        """Stored entries of L plus U (L's unit diagonal included)."""
        return int(self.lower.nnz + self.upper.nnz)

    def solve(self, b) -> np.ndarray:
        return lu_solve(self, b)


def _locate_singular_pivot(A: sp.csr_matrix) -> tuple[int, float]:
    """Dense fallback used only to report where an exactly singular matrix fails."""
    n = A.shape[0]
    if n > 4000:
        return -1, 0.0
    _, _, U = scipy.linalg.lu(A.toarray())
    d = np.abs(np.diag(U))
    scale = max(float(np.max(np.abs(A.data))) if A.nnz else 0.0, 1e-300)
    bad = np.flatnonzero(d < SINGULAR_RTOL * scale)
    k = int(bad[0]) if bad.size else int(np.argmin(d))
    return k, float(d[k])


def _u_diagonal(lu: spla.SuperLU) -> np.ndarray:
    U = lu.U
    return U.diagonal()


def lu_factor(A: sp.csr_matrix) -> Factorization:
    """Factor a square sparse matrix.

    Raises SingularMatrix when the matrix is structurally or numerically
    singular (a pivot below 1e-14 times the largest entry).  The index on the
    exception refers to an original column of ``A``.
    """
    if not (sp.isspmatrix_csr(A) and A.dtype == np.float64 and A.has_canonical_format):
        A = as_sparse(A)
    n, m = A.shape
    if n != m:
        raise ContractViolation(f"lu_factor needs a square matrix, got {A.shape}")
    if n == 0:
        raise ContractViolation("lu_factor of an empty matrix")
    _counter.n = factorization_count() + 1
    scale = float(np.max(np.abs(A.data))) if A.nnz else 0.0
    if scale == 0.0:
        raise SingularMatrix(0, 0.0)
    try:
        lu = spla.splu(
            A.tocsc(),
            permc_spec="COLAMD",
            diag_pivot_thresh=PIVOT_THRESHOLD,
            options={"SymmetricMode": False},
        )
    except RuntimeError:
        k, piv = _locate_singular_pivot(A)
        raise SingularMatrix(k, piv) from None
    diag = np.abs(_u_diagonal(lu))
    bad = np.flatnonzero(diag < SINGULAR_RTOL * scale)
    if bad.size:
        k = int(bad[0])
        col = int(np.flatnonzero(lu.perm_c == k)[0])
        raise SingularMatrix(col, float(diag[k]))
    return Factorization(
        row_perm=np.array(lu.perm_r),
        col_perm=np.array(lu.perm_c),
        source_nnz=int(A.nnz),
        matrix=A,
        _lu=lu,
    )


def lu_solve(F: Factorization, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != F.n:
        raise ContractViolation(f"lu_solve: factor dimension {F.n}, rhs length {b.shape[0]}")
    return F._lu.solve(b)


def _check_dense(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ContractViolation("matrix has non-finite entries")
    return M


def dense_expm(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant."""
    return scipy.linalg.expm(_check_dense(M))


def dense_phi(k: int, M) -> np.ndarray:
    """phi_k(M) for k in {1, 2}, read off the exponential of an augmented block matrix.

    The block matrix [[M, I, 0], [0, 0, I], [0, 0, 0]] (k+1 blocks) has
    phi_j(M) in its first block row, so no inverse of M is ever formed.
    """
    if k not in (1, 2):
        raise ContractViolation(f"phi order must be 1 or 2, got {k}")
    M = _check_dense(M)
    n = M.shape[0]
    N = (k + 1) * n
    A = np.zeros((N, N))
    A[:n, :n] = M
    for j in range(k):
        A[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = np.eye(n)
    E = scipy.linalg.expm(A)
    return E[:n, k * n:(k + 1) * n]


def write_matrix_market(path: str | Path, A: sp.spmatrix, comment: str = "") -> None:
    """Dump ``A`` in coordinate real general Matrix Market format (1-based)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, field="real", symmetry="general")


def read_matrix_market(path: str | Path) -> sp.csr_matrix:
    return as_sparse(scipy.io.mmread(str(path)))
