"""Factor-once / solve-many kernels.

Every linear system in the package goes through this module.  Symmetric
positive definite matrices (reduced Laplacians, cycle Gram matrices) use
:class:`SpdOperator`; Jacobians and square incidence matrices use
:class:`LuOperator`.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from lossydc.errors import IndefiniteMatrixError, SingularMatrixError

# below this dimension a dense Cholesky beats SuperLU's call overhead
DENSE_LIMIT = 48
SYMMETRY_RTOL = 1e-12
SOLVE_RTOL = 1e-10

# ufunc reductions called directly skip ndarray.max's Python-level wrapper,
# which dominates on the tiny vectors of small networks
_amax = np.maximum.reduce
_fabs = np.abs


def _as_csc(M) -> sp.csc_matrix:
    if sp.issparse(M):
        return sp.csc_matrix(M, dtype=float)
    return sp.csc_matrix(np.asarray(M, dtype=float))


class SpdOperator:
    """Cholesky-type factorization of a sparse SPD matrix.

    Large matrices are factored by SuperLU in symmetric mode with a
    minimum-degree ordering on ``M + M^T`` and no numerical pivoting, so
    the factor is ``P^T L D L^T P``; positive definiteness is read off the
    pivots.  Small matrices use a dense Cholesky factor.
    """

    def __init__(self, M):
        M = _as_csc(M)
        n, n2 = M.shape
        if n != n2:
            raise ValueError(f"matrix must be square, got {M.shape}")
        asym = abs(M - M.T).max() if M.nnz else 0.0
        scale = abs(M).max() if M.nnz else 0.0
        if asym > SYMMETRY_RTOL * max(scale, 1.0):
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
        self.n = n
        self.matrix = M
        self.solve_count = 0
        self.refinements = 0
        if n == 0:
            self._dense = None
            self._lu = None
            self.backend = "empty"
            return
        if n <= DENSE_LIMIT:
            self.backend = "dense"
            self._dense = M.toarray()
            try:
                self._chol, _ = sla.cho_factor(self._dense, lower=True, check_finite=True)
            except np.linalg.LinAlgError as exc:
                raise IndefiniteMatrixError(f"matrix is not positive definite: {exc}") from None
            # calling LAPACK directly avoids cho_solve's wrapper overhead on tiny systems
            (self._potrs,) = sla.get_lapack_funcs(("potrs",), (self._chol,))
            self._lu = None
        else:
            self.backend = "sparse"
            self._dense = None
            try:
                lu = spla.splu(
                    M,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise IndefiniteMatrixError(f"factorization failed: {exc}") from None
            pivots = lu.U.diagonal()
            if not np.array_equal(lu.perm_r, lu.perm_c) or np.any(pivots <= 0.0):
                raise IndefiniteMatrixError("non-positive pivot: matrix is not positive definite")
            self._lu = lu

    @property
    def permutation(self) -> np.ndarray:
        if self._lu is not None:
            return self._lu.perm_c.copy()
        return np.arange(self.n)

    def _raw_solve(self, b: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(b)
        x, info = self._potrs(self._chol, b, lower=1)
        if info != 0:
            raise IndefiniteMatrixError(f"triangular solve failed (info={info})")
        return x

    def _apply(self, x: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense @ x
        return self.matrix @ x

    def solve(self, b) -> np.ndarray:
        if type(b) is not np.ndarray or b.dtype != np.float64:
            b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: operator is {self.n}, rhs is {b.shape[0]}")
        self.solve_count += 1
        if self.n == 0:
            return np.zeros_like(b)
        if self._lu is None:
            # dense path inlined: on small systems the call overhead rivals the arithmetic
            x, info = self._potrs(self._chol, b, lower=1)
            if info != 0:
                raise IndefiniteMatrixError(f"triangular solve failed (info={info})")
            r = b - self._dense @ x
        else:
            x = self._lu.solve(b)
            r = b - self.matrix @ x
        # the limit is at least SOLVE_RTOL, so ||b|| is only needed for larger residuals
        rmax = _amax(_fabs(r))
        if rmax > SOLVE_RTOL and rmax > SOLVE_RTOL * _amax(_fabs(b)):
            # one step of iterative refinement
            self.refinements += 1
            x = x + self._raw_solve(r)
        return x

    def __repr__(self) -> str:
        return f"SpdOperator(n={self.n}, backend={self.backend!r})"


class LuOperator:
    """Sparse LU factorization of a general square matrix."""

    def __init__(self, M):
        M = _as_csc(M)
        if M.shape[0] != M.shape[1]:
            raise ValueError(f"matrix must be square, got {M.shape}")
        self.n = M.shape[0]
        self.solve_count = 0
        if self.n == 0:
            self._lu = None
            return
        try:
            self._lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from None
        pivots = self._lu.U.diagonal()
        if not np.all(np.isfinite(pivots)) or np.any(pivots == 0.0):
            raise SingularMatrixError("matrix is singular")

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: operator is {self.n}, rhs is {b.shape[0]}")
        self.solve_count += 1
        if self.n == 0:
            return np.zeros_like(b)
        return self._lu.solve(b)


def factorize(M) -> SpdOperator:
    """Factor a symmetric positive definite matrix for repeated solves."""
    return SpdOperator(M)


def factorize_lu(M) -> LuOperator:
    return LuOperator(M)


def solve(op: SpdOperator | LuOperator, b) -> np.ndarray:
    return op.solve(b)


def recover_angles(A_r, d, op: SpdOperator | None = None) -> np.ndarray:
    """Least-squares bus angles whose branch differences best match ``d``.

    Solves ``(A_r A_r^T) theta = A_r d``.  ``op`` may carry a prefactored
    ``A_r A_r^T`` to avoid refactoring inside iterations.
    """
    if op is None:
        A_r = sp.csr_matrix(A_r)
        op = factorize(A_r @ A_r.T)
    return op.solve(A_r @ np.asarray(d, dtype=float))
