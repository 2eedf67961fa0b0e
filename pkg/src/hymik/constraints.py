"""Linear constraint systems for space-time interactions.

Builds the GC and SC constraint sets on the interaction vector ``delta``
(time-major: index ``t * n_S + s``), reduces them to full rank, splits
them into an orthonormal block absorbed by a projection and a remainder
handled by conditioning by kriging, and implements the kriging correction
itself.

Every row of the interaction constraint sets is a Kronecker product
``u (x) v`` of a temporal vector ``u`` in {e_t, 1, d} and a spatial vector
``v`` in {e_s, 1}. ``ConstraintSet`` keeps that structure in ``blocks`` so
reductions and splits can operate on the small factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .sparse import CholeskyFactor, DimensionMismatch

__all__ = [
    "ConstraintError",
    "RankCheckFailed",
    "PolicyInfeasible",
    "NotOrthonormal",
    "SingularGram",
    "ConstraintSet",
    "HymikSplit",
    "KrigingCorrection",
    "sum_to_zero",
    "linear_trend",
    "main_effect_constraints",
    "build_gc_constraints",
    "build_sc_constraints",
    "reduce_to_full_rank",
    "split_constraints",
    "build_projection",
    "assemble_joint_precision",
    "krige_correct",
    "constrained_variance_diag",
    "constraint_rank",
]

ORTHO_DROP_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8


class ConstraintError(ValueError):
    pass


class RankCheckFailed(ConstraintError):
    pass


class PolicyInfeasible(ConstraintError):
    pass


class NotOrthonormal(ConstraintError):
    pass


class SingularGram(ConstraintError):
    """The kriging Gram matrix A Q^{-1} A^T is not invertible.

    Usually redundant constraints were left in the kriging block.
    """


# block name -> (temporal factor kind, spatial factor kind, which index is free)
_BLOCK_KINDS = {
    "time_sums": ("unit", "ones"),    # e_t (x) 1_S, one row per t
    "space_sums": ("ones", "unit"),   # 1_T (x) e_s, one row per s
    "trend": ("trend", "unit"),       # d (x) e_s,   one row per s
}


@dataclass(frozen=True)
class ConstraintSet:
    """Constraints ``A x = 0`` with a sparse ``A`` (rows are functionals).

    ``blocks`` lists ``(name, kept_indices)`` for Kronecker-structured
    interaction sets; it is empty for custom sets.
    """

    A: sp.csr_matrix
    label: str = "custom"
    full_rank: bool = False
    n_T: int | None = None
    n_S: int | None = None
    blocks: tuple = ()

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def dense(self) -> np.ndarray:
        return self.A.toarray()


def sum_to_zero(n: int) -> sp.csr_matrix:
    return sp.csr_matrix(np.ones((1, n)))


def linear_trend(n: int) -> sp.csr_matrix:
    return sp.csr_matrix(np.arange(1, n + 1, dtype=float)[None, :])


def main_effect_constraints(n: int, trend: bool = False) -> ConstraintSet:
    """Sum-to-zero, optionally with the trend constraint ``d^T x = 0`` (d = 1..n).

    Together with the sum row the trend row is stored centred, which spans the
    same set but keeps the two rows orthogonal; otherwise both load on the
    same weakly identified level direction and the kriging Gram matrix loses
    its small eigenvalues to rounding on long series.
    """
    rows = [sum_to_zero(n)]
    if trend:
        d = np.arange(1, n + 1, dtype=float)
        rows.append(sp.csr_matrix((d - d.mean())[None, :]))
    A = sp.vstack(rows).tocsr()
    return ConstraintSet(A, label="main", full_rank=True)


def _block_matrix(name: str, idx, n_T: int, n_S: int) -> sp.csr_matrix:
    idx = np.asarray(idx, dtype=int)
    tkind, skind = _BLOCK_KINDS[name]
    if name == "time_sums":
        T = sp.identity(n_T, format="csr")[idx]
        return sp.kron(T, np.ones((1, n_S)), format="csr")
    d = np.ones(n_T) if tkind == "ones" else np.arange(1, n_T + 1, dtype=float)
    S = sp.identity(n_S, format="csr")[idx]
    return sp.kron(d[None, :], S, format="csr")


def _assemble(blocks, n_T, n_S) -> sp.csr_matrix:
    mats = [_block_matrix(name, idx, n_T, n_S) for name, idx in blocks if len(idx)]
    return sp.vstack(mats, format="csr")


def build_gc_constraints(n_T: int, n_S: int) -> ConstraintSet:
    """Identifiability constraints: per-time sums and per-region sums of delta."""
    if n_T < 2 or n_S < 2:
        raise ConstraintError("GC constraints need n_T >= 2 and n_S >= 2")
    blocks = (("time_sums", tuple(range(n_T))), ("space_sums", tuple(range(n_S))))
    return ConstraintSet(_assemble(blocks, n_T, n_S), "GC", False, n_T, n_S, blocks)


def build_sc_constraints(n_T: int, n_S: int) -> ConstraintSet:
    """GC constraints plus per-region linear-trend constraints (proper prior under RW2)."""
    if n_T < 3 or n_S < 2:
        raise ConstraintError("SC constraints need n_T >= 3 and n_S >= 2")
    blocks = (("time_sums", tuple(range(n_T))), ("space_sums", tuple(range(n_S))),
              ("trend", tuple(range(n_S))))
    return ConstraintSet(_assemble(blocks, n_T, n_S), "SC", False, n_T, n_S, blocks)


def constraint_rank(A, rtol: float = 1e-10) -> int:
    """Numerical rank of ``A`` from the eigenvalues of ``A A^T``."""
    A = sp.csr_matrix(A)
    G = (A @ A.T).toarray()
    ev = np.linalg.eigvalsh(G)
    if ev.size == 0 or ev[-1] <= 0:
        return 0
    return int(np.sum(ev > rtol * ev[-1]))


def reduce_to_full_rank(c: ConstraintSet) -> ConstraintSet:
    """Drop redundant rows so that the set has full row rank.

    GC: the last per-time sum goes. SC: additionally the last trend row,
    only if the system is still rank deficient after the first deletion.
    """
    if c.full_rank:
        return c
    if not c.blocks:
        raise RankCheckFailed("custom constraint sets must be reduced by the caller")
    blocks = [list(b) for b in c.blocks]

    def rebuild():
        bl = tuple((name, tuple(idx)) for name, idx in blocks)
        return bl, _assemble(bl, c.n_T, c.n_S)

    blocks[0][1] = list(blocks[0][1])[:-1]
    bl, A = rebuild()
    rank = constraint_rank(A)
    if rank < A.shape[0]:
        names = [b[0] for b in blocks]
        if "trend" in names:
            i = names.index("trend")
            blocks[i][1] = list(blocks[i][1])[:-1]
            bl, A = rebuild()
            rank = constraint_rank(A)
    if rank < A.shape[0]:
        raise RankCheckFailed(f"rank {rank} < {A.shape[0]} rows after reduction")
    return ConstraintSet(A, c.label, True, c.n_T, c.n_S, bl)


def _orthonormal_rows(V: np.ndarray, against: np.ndarray | None = None,
                      tol: float = ORTHO_DROP_TOL) -> np.ndarray:
    """Gram-Schmidt on the rows of ``V`` after projecting out ``against``.

    ``against`` must have orthonormal rows. Rows whose residual norm falls
    below ``tol`` times their original norm are dropped. Computed with
    Householder QR, re-run after each dropped row so later rows are never
    orthogonalized against a spurious direction.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    norms = np.linalg.norm(V, axis=1)
    R = V.copy()
    if against is not None:
        B = np.atleast_2d(against)
        for _ in range(2):
            R -= (R @ B.T) @ B
    keep = np.arange(V.shape[0])
    while keep.size:
        Q, Rr = np.linalg.qr(R[keep].T)
        resid = np.abs(np.diag(Rr))
        bad = np.flatnonzero(resid <= tol * np.maximum(norms[keep], 1e-300))
        if bad.size == 0:
            signs = np.sign(np.diag(Rr))
            return (Q * signs).T
        keep = np.delete(keep, bad[0])
    return np.zeros((0, V.shape[1]))


def _centered_trend(n_T: int) -> np.ndarray:
    d = np.arange(1, n_T + 1, dtype=float)
    d -= d.mean()
    return d / np.linalg.norm(d)


def _helmert_rows(n: int) -> np.ndarray:
    """Orthonormal basis of the complement of 1_n (Helmert contrasts)."""
    H = np.zeros((n - 1, n))
    for k in range(1, n):
        H[k - 1, :k] = 1.0
        H[k - 1, k] = -k
        H[k - 1] /= np.sqrt(k * (k + 1))
    return H


def _sum_complement(kept, n, e):
    # any n-1 unit vectors span the complement of 1_n once 1_n is projected out
    if len(kept) >= n - 1:
        return _helmert_rows(n)
    return _orthonormal_rows(np.eye(n)[kept], against=e[None, :])


@dataclass(frozen=True)
class HymikSplit:
    """Orthonormal block ``A1`` (absorbed via ``Z``) and kriging block ``A2``."""

    A1: sp.csr_matrix
    A2: sp.csr_matrix
    Z: sp.csr_matrix
    policy: str

    @property
    def k1(self) -> int:
        return self.A1.shape[0]

    @property
    def k2(self) -> int:
        return self.A2.shape[0]


def _resolve_policy(policy: str, n_T: int, n_S: int) -> str:
    aliases = {"spatial": "spatial_first", "temporal": "temporal_first"}
    policy = aliases.get(policy, policy)
    if policy == "auto":
        return "spatial_first" if n_S >= n_T else "temporal_first"
    if policy not in ("spatial_first", "temporal_first"):
        raise PolicyInfeasible(f"unknown split policy {policy!r}")
    return policy


def split_constraints(c: ConstraintSet, n_T: int | None = None, n_S: int | None = None,
                      policy: str = "auto") -> HymikSplit:
    """Partition a full-rank GC/SC set into the projection and kriging blocks.

    ``spatial_first`` absorbs ``e_T (x) I_S`` (plus ``d~ (x) I_S`` for SC, d~
    the centred trend scaled to unit norm); the per-time sums go to kriging.
    ``temporal_first`` absorbs ``I_T (x) e_S``; per-region sums (and, for SC,
    the whole trend block) go to kriging. ``auto`` takes ``spatial_first``
    when ``n_S >= n_T``.

    Kriging rows are orthogonalized against ``A1`` and among themselves;
    rows made redundant by the absorption are dropped.
    """
    if not c.full_rank:
        raise ConstraintError("split_constraints needs a full-rank set; call reduce_to_full_rank")
    n_T = c.n_T if n_T is None else n_T
    n_S = c.n_S if n_S is None else n_S
    if c.label not in ("GC", "SC") or not c.blocks:
        raise PolicyInfeasible(f"no Kronecker split known for {c.label!r} constraints")
    if (n_T, n_S) != (c.n_T, c.n_S):
        raise DimensionMismatch(f"constraint set is for {(c.n_T, c.n_S)}, got {(n_T, n_S)}")
    policy = _resolve_policy(policy, n_T, n_S)
    blocks = dict(c.blocks)
    sc = c.label == "SC"
    eT = np.ones(n_T) / np.sqrt(n_T)
    eS = np.ones(n_S) / np.sqrt(n_S)

    if policy == "spatial_first":
        T1 = np.vstack([eT, _centered_trend(n_T)]) if sc else eT[None, :]
        A1 = sp.kron(T1, sp.identity(n_S), format="csr")
        # per-time sums e_t (x) 1_S, residual after removing T1 directions
        kept = np.asarray(blocks["time_sums"], dtype=int)
        M = _orthonormal_rows(np.eye(n_T)[kept], against=T1)
        A2 = sp.kron(M, eS[None, :], format="csr")
    else:
        A1 = sp.kron(sp.identity(n_T), eS[None, :], format="csr")
        Tpart = np.vstack([eT, _centered_trend(n_T)]) if sc else eT[None, :]
        # span of 1_T (x) e_s (and d (x) e_s) minus A1 directions is
        # span{eT, d~} (x) 1_S-complement
        kept_s = np.asarray(blocks["space_sums"], dtype=int)
        W = _sum_complement(kept_s, n_S, eS)
        if sc:
            kept_d = np.asarray(blocks["trend"], dtype=int)
            Wd = _sum_complement(kept_d, n_S, eS)
            A2 = sp.vstack([sp.kron(eT[None, :], W), sp.kron(Tpart[1:2], Wd)], format="csr")
        else:
            A2 = sp.kron(eT[None, :], W, format="csr")
    A1.eliminate_zeros()
    A2.eliminate_zeros()
    Z = build_projection(A1)
    return HymikSplit(A1, A2, Z, policy)


def _check_orthonormal(A1: sp.csr_matrix, tol: float = ORTHONORMAL_TOL):
    G = (A1 @ A1.T).tocoo()
    D = G - sp.identity(A1.shape[0])
    err = abs(D).max() if D.nnz else 0.0
    if err > tol:
        raise NotOrthonormal(f"max |A1 A1^T - I| = {err:.3e}")


def build_projection(A1) -> sp.csr_matrix:
    """``Z = I - A1^T A1`` for orthonormal rows ``A1``; idempotent and symmetric."""
    A1 = sp.csr_matrix(A1)
    _check_orthonormal(A1)
    n = A1.shape[1]
    Z = (sp.identity(n, format="csr") - A1.T @ A1).tocsr()
    Z.sum_duplicates()
    return Z


def assemble_joint_precision(Z, Q_eps, kappa: float) -> sp.csc_matrix:
    """Precision of ``(x, x*)`` with ``x | x* ~ N(Z x*, I/kappa)`` and ``x* ~ N(0, Q_eps^{-1})``."""
    Z = sp.csr_matrix(Z)
    Q_eps = sp.csr_matrix(Q_eps)
    if Z.shape != Q_eps.shape or Z.shape[0] != Z.shape[1]:
        raise DimensionMismatch(f"Z is {Z.shape}, Q_eps is {Q_eps.shape}")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    n = Z.shape[0]
    kI = kappa * sp.identity(n, format="csr")
    return sp.bmat([[kI, -kappa * Z], [-kappa * Z, kappa * Z + Q_eps]], format="csc")


REFINE_PASSES = 4
REFINE_RTOL = 1e-12


class KrigingCorrection:
    """Conditioning-by-kriging machinery for ``A x = 0`` under precision ``Q``.

    Holds ``W = Q^{-1} A^T`` and the Cholesky factor of the Gram matrix
    ``G = A W``; the correction, the marginal-variance downdate and the
    Gram log-determinant all reuse them.
    """

    def __init__(self, F: CholeskyFactor, A, gram_rtol: float = 1e-12, pseudo: bool = False):
        A = sp.csr_matrix(A)
        if A.shape[1] != F.n:
            raise DimensionMismatch(f"constraints act on {A.shape[1]} variables, factor has {F.n}")
        self.A = A
        self.k = A.shape[0]
        self.pseudo = pseudo
        if self.k == 0:
            self.W = np.zeros((F.n, 0))
            self.chol = np.zeros((0, 0))
            self.rank = 0
            return
        self.W = F.solve(np.ascontiguousarray(A.T.toarray()))
        G = np.asarray(A @ self.W)
        G = 0.5 * (G + G.T)
        if pseudo:
            # overdetermined but consistent rows: G^+ acts on range(A) = range(G)
            lam, U = la.eigh(G)
            keep = lam > 1e-10 * lam[-1]
            self._lam, self._U = lam[keep], U[:, keep]
            self.rank = int(keep.sum())
            return
        self.rank = self.k
        # equilibrate so the pivot test ignores row scaling of A
        s = np.sqrt(np.diag(G))
        if not np.all(s > 0):
            raise SingularGram("Gram matrix has a non-positive diagonal entry")
        try:
            Ls = la.cholesky(G / np.outer(s, s), lower=True)
        except la.LinAlgError as err:
            raise SingularGram(str(err)) from None
        if np.diag(Ls).min() ** 2 <= gram_rtol:
            raise SingularGram("Gram matrix is numerically singular; "
                               "redundant constraints left in the kriging block?")
        self.chol = s[:, None] * Ls

    def gram_solve(self, v):
        if self.pseudo:
            return self._U @ ((self._U.T @ v) / (self._lam if np.ndim(v) == 1 else self._lam[:, None]))
        return la.cho_solve((self.chol, True), v)

    def log_det_gram(self) -> float:
        """``log|A Q^{-1} A^T|`` (pseudo-determinant for overdetermined sets)."""
        if self.k == 0:
            return 0.0
        if self.pseudo:
            return float(np.sum(np.log(self._lam)))
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def correct(self, x):
        """Map ``x`` (vector or (n, m) block) onto ``{A x = 0}``."""
        if self.k == 0:
            return np.array(x, dtype=float, copy=True)
        x = np.asarray(x, dtype=float)
        # W carries huge entries along weakly identified directions; a couple
        # of refinement passes remove the cancellation error of the first one
        for _ in range(REFINE_PASSES):
            r = self.A @ x
            x = x - self.W @ self.gram_solve(r)
            if np.max(np.abs(self.A @ x)) <= REFINE_RTOL * (1.0 + np.max(np.abs(x))):
                break
        return x

    def variance_reduction(self) -> np.ndarray:
        """Diagonal of ``W G^{-1} W^T``, the variance removed by conditioning."""
        if self.k == 0:
            return np.zeros(self.W.shape[0])
        if self.pseudo:
            V = (self.W @ self._U) / np.sqrt(self._lam)
            return np.einsum("ij,ij->i", V, V)
        V = la.solve_triangular(self.chol, self.W.T, lower=True)
        return np.einsum("ij,ij->j", V, V)


def krige_correct(x_star, A2, F: CholeskyFactor) -> np.ndarray:
    """``x = x* - Q^{-1} A^T (A Q^{-1} A^T)^{-1} A x*`` with ``Q`` factored by ``F``."""
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape[0] != F.n:
        raise DimensionMismatch(f"x* has length {x_star.shape[0]}, factor has {F.n}")
    return KrigingCorrection(F, A2).correct(x_star)


def constrained_variance_diag(F: CholeskyFactor, A, kc: KrigingCorrection | None = None) -> np.ndarray:
    """Marginal variances of N(., Q^{-1}) conditioned on ``A x = 0``."""
    kc = KrigingCorrection(F, A) if kc is None else kc
    return F.inverse_diagonal() - kc.variance_reduction()

