"""Sparse symmetric storage, Cholesky factorization, solves and GMRF sampling.

Matrices are plain ``scipy.sparse`` objects: COO for assembly, CSC for
factorization. A factorization is split into a symbolic phase (fill-reducing
ordering plus the pattern of ``L``), which depends only on the sparsity
pattern and can be reused across many numeric factorizations, and a numeric
phase run by the kernels in :mod:`hymik._kernels`.

Convention: ``Q[perm][:, perm] = L @ L.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels

__all__ = [
    "SparseError",
    "NotPositiveDefinite",
    "NonSymmetric",
    "DimensionMismatch",
    "SymbolicFactor",
    "CholeskyFactor",
    "analyse",
    "cholesky",
    "solve",
    "log_det",
    "sample_gmrf",
    "as_symmetric_csc",
]

# pivot d_j is rejected when d_j <= PIVOT_TOL * Q_jj
PIVOT_TOL = 16 * np.finfo(float).eps
SYMMETRY_TOL = 1e-12


class SparseError(ValueError):
    pass


class NotPositiveDefinite(SparseError):
    """Raised when a pivot is not safely positive.

    Usually an intrinsic precision matrix was factored without an
    epsilon on its diagonal and without constraints.
    """

    def __init__(self, index: int, pivot_index_original: int | None = None):
        self.index = index
        self.original_index = pivot_index_original
        super().__init__(
            f"matrix is not numerically positive definite (pivot {index}"
            + (f", original row {pivot_index_original})" if pivot_index_original is not None else ")")
        )


class NonSymmetric(SparseError):
    pass


class DimensionMismatch(SparseError):
    pass


def as_symmetric_csc(Q, check: bool = True) -> sp.csc_matrix:
    """Return ``Q`` as CSC with duplicates summed, checking symmetry and finiteness."""
    Q = sp.csc_matrix(Q, dtype=np.float64)
    Q.sum_duplicates()
    Q.sort_indices()
    if Q.shape[0] != Q.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {Q.shape}")
    if check:
        if not np.all(np.isfinite(Q.data)):
            raise SparseError("matrix has non-finite entries")
        scale = abs(Q).max() if Q.nnz else 0.0
        asym = abs(Q - Q.T).max() if Q.nnz else 0.0
        if asym > SYMMETRY_TOL * max(scale, 1e-300):
            raise NonSymmetric(f"max |Q - Q^T| = {asym:.3e}")
    return Q


def _mmd_ordering(pattern: sp.csc_matrix) -> np.ndarray:
    # SuperLU's multiple-minimum-degree on A^T + A, run on a diagonally
    # dominant matrix with the same pattern so that no pivoting happens
    n = pattern.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    P = pattern.copy().tocsc()
    P.data = -np.ones_like(P.data)
    P.setdiag(0)
    P.eliminate_zeros()
    deg = np.asarray(abs(P).sum(axis=1)).ravel()
    P = (P + sp.diags(deg + 1.0)).tocsc()
    lu = spla.splu(P, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options=dict(SymmetricMode=True))
    return np.argsort(lu.perm_c).astype(np.int64)


@dataclass(frozen=True)
class SymbolicFactor:
    """Ordering and pattern of ``L`` for a fixed sparsity pattern."""

    n: int
    perm: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Rp: np.ndarray = field(repr=False)
    Rj: np.ndarray = field(repr=False)
    pattern_key: tuple = field(repr=False)
    # lower triangle of Q[perm][:, perm]: CSC arrays plus source positions in Q.data
    lower_p: np.ndarray = field(repr=False, default=None)
    lower_i: np.ndarray = field(repr=False, default=None)
    lower_src: np.ndarray = field(repr=False, default=None)

    @property
    def nnz(self) -> int:
        return int(self.Lp[-1])

    def matches(self, Q: sp.csc_matrix) -> bool:
        return _pattern_key(Q) == self.pattern_key


def _pattern_key(Q: sp.csc_matrix) -> tuple:
    return (Q.shape[0], Q.nnz, hash(Q.indptr.tobytes()), hash(Q.indices.tobytes()))


def analyse(Q, perm: np.ndarray | None = None) -> SymbolicFactor:
    """Symbolic analysis: fill-reducing ordering plus the pattern of ``L``.

    The result only depends on the sparsity pattern of ``Q``; reuse it for
    every numeric factorization of matrices sharing that pattern.
    """
    Q = as_symmetric_csc(Q, check=False)
    n = Q.shape[0]
    if perm is None:
        perm = _mmd_ordering(Q)
    perm = np.asarray(perm, dtype=np.int64)
    # carry positions (1-based so none is an explicit zero) through the permutation
    idx = sp.csc_matrix((np.arange(1, Q.nnz + 1, dtype=np.float64), Q.indices, Q.indptr),
                        shape=Q.shape)
    Qp = idx[perm][:, perm]
    upper = sp.triu(Qp, format="csc")
    upper.sort_indices()
    Ap = upper.indptr.astype(np.int64)
    Ai = upper.indices.astype(np.int64)
    parent = _kernels.etree(n, Ap, Ai)
    Lp, Li = _kernels.symbolic_pattern(n, Ap, Ai, parent)
    Rp, Rj = _kernels.row_pattern(n, Lp, Li)
    lower = sp.tril(Qp, format="csc")
    lower.sort_indices()
    return SymbolicFactor(n, perm, Lp, Li, Rp, Rj, _pattern_key(Q),
                          lower.indptr.astype(np.int64), lower.indices.astype(np.int64),
                          lower.data.astype(np.int64) - 1)


@dataclass(frozen=True)
class CholeskyFactor:
    """Sparse Cholesky factor with ``Q[perm][:, perm] = L L^T``."""

    symbolic: SymbolicFactor
    Lx: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.symbolic.n

    source_dim = n

    @property
    def perm(self) -> np.ndarray:
        return self.symbolic.perm

    @property
    def L(self) -> sp.csc_matrix:
        s = self.symbolic
        return sp.csc_matrix((self.Lx, s.Li, s.Lp), shape=(s.n, s.n))

    def diagonal(self) -> np.ndarray:
        return self.Lx[self.symbolic.Lp[:-1]]

    def _check_rows(self, b):
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, factor has {self.n}")
        return b

    def solve(self, b) -> np.ndarray:
        """Solve ``Q x = b`` for a vector or an (n, m) block of right-hand sides."""
        b = self._check_rows(b)
        s = self.symbolic
        B = np.ascontiguousarray(b.reshape(self.n, -1)[s.perm])
        _kernels.forward_solve(s.n, s.Lp, s.Li, self.Lx, B)
        _kernels.backward_solve(s.n, s.Lp, s.Li, self.Lx, B)
        out = np.empty_like(B)
        out[s.perm] = B
        return out.reshape(b.shape)

    def solve_Lt(self, z) -> np.ndarray:
        """Return ``P^T L^{-T} z``, the map taking white noise to a GMRF draw."""
        z = self._check_rows(z)
        s = self.symbolic
        B = np.ascontiguousarray(z.reshape(self.n, -1))
        _kernels.backward_solve(s.n, s.Lp, s.Li, self.Lx, B)
        out = np.empty_like(B)
        out[s.perm] = B
        return out.reshape(z.shape)

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(self.diagonal())))

    def inverse_diagonal(self) -> np.ndarray:
        """Diagonal of ``Q^{-1}`` via selected inversion."""
        s = self.symbolic
        S = _kernels.selected_inverse(s.n, s.Lp, s.Li, self.Lx)
        out = np.empty(s.n)
        out[s.perm] = S[s.Lp[:-1]]
        return out


def cholesky(Q, symbolic: SymbolicFactor | None = None, check: bool = True) -> CholeskyFactor:
    """Factor a sparse symmetric positive definite matrix.

    Parameters
    ----------
    Q : sparse matrix
        Symmetric, finite, positive definite. Only the lower triangle of the
        permuted matrix is read once symmetry has been checked.
    symbolic : SymbolicFactor, optional
        Result of :func:`analyse` for the same pattern. Computed if omitted.

    Raises
    ------
    NotPositiveDefinite
        A pivot was <= 0 (relative to the diagonal entry). Positive
        definiteness is never repaired; add epsilon explicitly.
    NonSymmetric
    """
    Q = as_symmetric_csc(Q, check=check)
    if symbolic is None or not symbolic.matches(Q):
        symbolic = analyse(Q, None if symbolic is None else symbolic.perm)
    s = symbolic
    Lx, bad = _kernels.numeric_cholesky(
        s.n, s.lower_p, s.lower_i, Q.data[s.lower_src], s.Lp, s.Li, s.Rp, s.Rj, PIVOT_TOL,
    )
    if bad >= 0:
        raise NotPositiveDefinite(int(bad), int(s.perm[bad]))
    return CholeskyFactor(s, Lx)


def solve(F: CholeskyFactor, b) -> np.ndarray:
    return F.solve(b)


def log_det(F: CholeskyFactor) -> float:
    return F.log_det()


def sample_gmrf(F: CholeskyFactor, mean=None, rng_seed: int | np.random.Generator = 0,
                n_samples: int = 1) -> np.ndarray:
    """Draw ``n_samples`` from N(mean, Q^{-1}); returns shape (n_samples, n).

    Uses numpy's PCG64 generator seeded with ``rng_seed``, so a given seed
    reproduces bit-identical draws.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = F.n
    if mean is None:
        mean = np.zeros(n)
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (n,):
        raise DimensionMismatch(f"mean has length {mean.shape}, factor has {n}")
    z = rng.standard_normal((n, n_samples))
    x = F.solve_Lt(z)
    return (x + mean[:, None]).T
