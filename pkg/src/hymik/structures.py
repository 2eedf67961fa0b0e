"""Structure matrices for random walks, ICAR fields and their Kronecker interaction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse import csgraph

from .constraints import ConstraintSet, KrigingCorrection, constraint_rank
from .sparse import cholesky

__all__ = [
    "StructureError",
    "TooShort",
    "Disconnected",
    "AlreadyScaled",
    "UnderConstrained",
    "TooLargeForExactCorrection",
    "Graph",
    "StructureMatrix",
    "build_rw_structure",
    "build_icar_structure",
    "build_interaction_structure",
    "scale_structure",
    "generalized_log_det",
    "count_null_eigenvalues",
]

# eigenvalues below ZERO_EIG_RTOL * max eigenvalue count as zero
ZERO_EIG_RTOL = 1e-8
DENSE_LIMIT = 2000
EXACT_CORRECTION_LIMIT = 6000


class StructureError(ValueError):
    pass


class TooShort(StructureError):
    pass


class Disconnected(StructureError):
    def __init__(self, n_components: int):
        self.n_components = n_components
        super().__init__(f"graph has {n_components} connected components, expected 1")


class AlreadyScaled(StructureError):
    pass


class UnderConstrained(StructureError):
    pass


class TooLargeForExactCorrection(StructureError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected neighbourhood graph with 0-based node ids."""

    n_nodes: int
    neighbors: tuple

    def __post_init__(self):
        if len(self.neighbors) != self.n_nodes:
            raise StructureError("need one neighbour list per node")
        nb = tuple(np.unique(np.asarray(v, dtype=np.int64)) for v in self.neighbors)
        object.__setattr__(self, "neighbors", nb)
        for s, v in enumerate(nb):
            if v.size and (v[0] < 0 or v[-1] >= self.n_nodes):
                raise StructureError(f"node {s} has a neighbour outside [0, {self.n_nodes})")
            if np.any(v == s):
                raise StructureError(f"node {s} lists itself as a neighbour")
        W = self.adjacency()
        if (W != W.T).nnz:
            i, j = (W != W.T).nonzero()
            raise StructureError(f"asymmetric adjacency: {i[0]} -> {j[0]} without the reverse")

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Graph":
        nb = [[] for _ in range(n_nodes)]
        for a, b in edges:
            nb[a].append(b)
            nb[b].append(a)
        return cls(n_nodes, tuple(nb))

    @classmethod
    def from_adjacency(cls, W) -> "Graph":
        W = sp.csr_matrix(W)
        return cls(W.shape[0], tuple(W.indices[W.indptr[i]:W.indptr[i + 1]]
                                     for i in range(W.shape[0])))

    @classmethod
    def path(cls, n: int) -> "Graph":
        return cls.from_edges(n, [(i, i + 1) for i in range(n - 1)])

    @classmethod
    def cycle(cls, n: int) -> "Graph":
        return cls.from_edges(n, [(i, (i + 1) % n) for i in range(n)])

    @classmethod
    def lattice(cls, n_rows: int, n_cols: int) -> "Graph":
        """Rook-adjacency grid; node id ``r * n_cols + c``."""
        edges = []
        for r in range(n_rows):
            for c in range(n_cols):
                i = r * n_cols + c
                if c + 1 < n_cols:
                    edges.append((i, i + 1))
                if r + 1 < n_rows:
                    edges.append((i, i + n_cols))
        return cls.from_edges(n_rows * n_cols, edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(v) for v in self.neighbors], dtype=np.int64)

    def adjacency(self) -> sp.csr_matrix:
        rows = np.repeat(np.arange(self.n_nodes), [len(v) for v in self.neighbors])
        cols = np.concatenate(self.neighbors) if self.n_nodes else np.zeros(0, dtype=int)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_nodes,) * 2)

    def n_components(self) -> int:
        return int(csgraph.connected_components(self.adjacency(), directed=False)[0])


@dataclass(frozen=True)
class StructureMatrix:
    """Symmetric PSD structure matrix ``R`` with ``Q = tau * R``.

    ``scale_factor`` is the cumulative divisor relative to the raw
    construction (1 when unscaled). Interaction matrices keep their Kronecker ``factors`` so that
    spectra and null spaces can be computed on the small pieces.
    """

    matrix: sp.csc_matrix
    rank_deficiency: int
    kind: str
    scaled: bool = False
    scale_factor: float = 1.0
    factors: tuple = field(default=(), repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def eigenvalues(self) -> np.ndarray:
        """Ascending eigenvalues (dense for single blocks, outer product for Kronecker)."""
        if self.factors:
            a, b = (f.eigenvalues() for f in self.factors)
            return np.sort(np.outer(a, b).ravel()) / self._kron_extra()
        if self.n > 4 * DENSE_LIMIT:
            raise TooLargeForExactCorrection(f"dense spectrum of a {self.n}x{self.n} matrix")
        return la.eigvalsh(self.matrix.toarray())

    def _kron_extra(self) -> float:
        # matrix = kron(fa, fb) / extra once the interaction itself is rescaled
        fa, fb = self.factors
        return self.scale_factor / (fa.scale_factor * fb.scale_factor)

    def pinv_diagonal(self) -> np.ndarray:
        """Diagonal of the Moore-Penrose inverse of ``R``."""
        if self.factors:
            fa, fb = self.factors
            return np.outer(fa.pinv_diagonal(), fb.pinv_diagonal()).ravel() * self._kron_extra()
        if self.n > 4 * DENSE_LIMIT:
            raise TooLargeForExactCorrection(f"dense spectrum of a {self.n}x{self.n} matrix")
        lam, V = la.eigh(self.matrix.toarray())
        k = self.rank_deficiency
        return (V[:, k:] ** 2) @ (1.0 / lam[k:])

    def null_space_annihilates(self, A, rtol: float = 1e-9) -> bool:
        """True when every row of ``A`` lies in the null space of ``R``."""
        A = sp.csr_matrix(A)
        RA = self.matrix @ A.T
        scale = abs(self.matrix).max() * max(abs(A).max(), 1e-300)
        return (abs(RA).max() if RA.nnz else 0.0) <= rtol * scale


def build_rw_structure(n: int, order: int = 1) -> StructureMatrix:
    """Random walk structure ``D^T D`` with ``D`` the order-th difference matrix."""
    if order not in (1, 2):
        raise StructureError("random walk order must be 1 or 2")
    if n <= order:
        raise TooShort(f"RW({order}) needs at least {order + 1} time points, got {n}")
    coef = [-1.0, 1.0] if order == 1 else [1.0, -2.0, 1.0]
    D = sp.diags(coef, list(range(order + 1)), shape=(n - order, n))
    R = (D.T @ D).tocsc()
    return StructureMatrix(R, order, f"RW{order}")


def build_icar_structure(g: Graph) -> StructureMatrix:
    """ICAR structure: neighbour counts on the diagonal, -1 for neighbours."""
    nc = g.n_components()
    if nc != 1:
        raise Disconnected(nc)
    W = g.adjacency()
    R = (sp.diags(g.degrees.astype(float)) - W).tocsc()
    return StructureMatrix(R, 1, "ICAR")


def build_interaction_structure(R_alpha: StructureMatrix, R_gamma: StructureMatrix) -> StructureMatrix:
    """Type IV interaction ``R_alpha (x) R_gamma`` in time-major order."""
    R = sp.kron(R_alpha.matrix, R_gamma.matrix, format="csc")
    ka, kg = R_alpha.rank_deficiency, R_gamma.rank_deficiency
    k = ka * R_gamma.n + kg * R_alpha.n - ka * kg
    # never marked scaled: the product of scaled factors is not itself scaled
    # unless both factor constraint sets span their null spaces
    return StructureMatrix(R, k, "Interaction", False,
                           R_alpha.scale_factor * R_gamma.scale_factor,
                           factors=(R_alpha, R_gamma))


def count_null_eigenvalues(R, rtol: float = ZERO_EIG_RTOL) -> int:
    ev = la.eigvalsh(R.toarray() if sp.issparse(R) else np.asarray(R))
    return int(np.sum(ev < rtol * ev[-1]))


def _complement_basis(A: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal basis (columns) of ``{x : A x = 0}``."""
    if A.shape[0] == 0:
        return np.eye(n)
    return la.null_space(A)


def _constrained_variances(R: StructureMatrix, A) -> np.ndarray:
    A = sp.csr_matrix(A)
    if R.null_space_annihilates(A):
        # rows inside null(R): the constrained covariance is R^+ iff they span it
        if constraint_rank(A) < R.rank_deficiency:
            raise UnderConstrained("constraints leave part of the null space free")
        return R.pinv_diagonal()
    if R.n <= DENSE_LIMIT:
        V = _complement_basis(A.toarray(), R.n)
        M = V.T @ R.matrix.toarray() @ V
        M = 0.5 * (M + M.T)
        ev = la.eigvalsh(M)
        if ev.size and ev[0] <= ZERO_EIG_RTOL * ev[-1]:
            raise UnderConstrained("constraints leave part of the null space free")
        C = la.cho_factor(M, lower=True)
        return np.einsum("ij,ji->i", V, la.cho_solve(C, V.T))
    # large: epsilon-regularized factor plus kriging on the constraints
    eps = 1e-8 * float(np.exp(np.mean(np.log(R.matrix.diagonal()))))
    F = cholesky(R.matrix + eps * sp.identity(R.n, format="csc"))
    kc = KrigingCorrection(F, A)
    var = F.inverse_diagonal() - kc.variance_reduction()
    if np.max(var) > 1e3 * np.median(var):
        raise UnderConstrained("constraints leave part of the null space free")
    return var


def scale_structure(R: StructureMatrix, constraints: ConstraintSet | sp.spmatrix) -> StructureMatrix:
    """Rescale ``R`` so the constrained marginal variances have geometric mean 1.

    Returns ``R / c`` with ``c = exp(mean_i log(1 / Sigma_ii))``, ``Sigma`` the
    covariance of the field under ``constraints``; coordinates the constraints
    pin to zero are excluded from the mean.
    """
    if R.scaled:
        raise AlreadyScaled(f"{R.kind} structure is already scaled")
    A = constraints.A if isinstance(constraints, ConstraintSet) else constraints
    var = _constrained_variances(R, A)
    # coordinates pinned by the constraints carry no variance and are left out
    var = var[var > 1e-12 * var.max()]
    c = float(np.exp(-np.mean(np.log(var))))
    return replace(R, matrix=(R.matrix / c).tocsc(), scaled=True,
                   scale_factor=R.scale_factor * c)


def generalized_log_det(R: StructureMatrix, A=None) -> float:
    """``log |R|_+`` on the orthogonal complement of the constraint rows.

    When every constraint row lies in the null space of ``R`` this is the sum
    of the logs of the non-null eigenvalues (computed on Kronecker factors for
    interactions). Otherwise ``V^T R V`` is formed densely for an orthonormal
    basis ``V`` of ``{A x = 0}`` and its non-null eigenvalues are used.
    """
    if A is None or R.null_space_annihilates(A):
        ev = R.eigenvalues()
        ev = ev[R.rank_deficiency:]
        return float(np.sum(np.log(ev)))
    A = sp.csr_matrix(A)
    if R.n - A.shape[0] > EXACT_CORRECTION_LIMIT:
        raise TooLargeForExactCorrection(
            f"complement dimension {R.n - A.shape[0]} exceeds {EXACT_CORRECTION_LIMIT}")
    V = _complement_basis(A.toarray(), R.n)
    M = V.T @ (R.matrix @ V)
    ev = la.eigvalsh(0.5 * (M + M.T))
    ev = ev[ev > ZERO_EIG_RTOL * ev[-1]]
    return float(np.sum(np.log(ev)))
