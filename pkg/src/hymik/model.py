"""Latent Gaussian models: the space-time Type IV model and a generic variant.

The engine in :mod:`hymik.inference` only talks to the small interface of
:class:`LatentGaussianModel`: a design map from latent variables to cells, a
prior precision with its log-normalizer for a hyperparameter vector ``theta``
(log scale), linear constraints enforced by kriging, and a hyperprior.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import constraints as cons
from .constraints import (ConstraintSet, PolicyInfeasible, KrigingCorrection,
                          main_effect_constraints)
from .likelihoods import FAMILIES, UnsupportedFamily
from .sparse import DimensionMismatch, analyse, cholesky
from .structures import (Graph, StructureMatrix, build_icar_structure,
                         build_interaction_structure, build_rw_structure, scale_structure)

__all__ = [
    "FIXED_EFFECT_PRECISION",
    "EPS_REL",
    "KAPPA_REL",
    "KAPPA_MAX_COND",
    "Hyperparameters",
    "PriorState",
    "LatentGaussianModel",
    "GenericLatentModel",
    "SpaceTimeModel",
    "build_latent_model",
    "prior_precision",
    "log_gamma_prior",
    "scaling_constraints",
]

FIXED_EFFECT_PRECISION = 1e-3
EPS_REL = 1e-6
KAPPA_REL = 1e8
KAPPA_MAX_COND = 1e14
GAMMA_SHAPE = 1.0
GAMMA_RATE = 5e-5


def _gm(v) -> float:
    return float(np.exp(np.mean(np.log(v))))


def log_gamma_prior(theta, shape: float = GAMMA_SHAPE, rate: float = GAMMA_RATE) -> float:
    """Density of ``theta = log tau`` when ``tau ~ Gamma(shape, rate)``."""
    theta = np.asarray(theta, dtype=float)
    from scipy.special import gammaln
    return float(np.sum(shape * np.log(rate) - gammaln(shape) + shape * theta
                        - rate * np.exp(theta)))


@dataclass(frozen=True)
class Hyperparameters:
    tau_alpha: float = 1.0
    tau_gamma: float = 1.0
    tau_delta: float = 1.0
    dispersion: float | None = None

    def __post_init__(self):
        for name in ("tau_alpha", "tau_gamma", "tau_delta"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        if self.dispersion is not None and not (np.isfinite(self.dispersion) and self.dispersion > 0):
            raise ValueError(f"dispersion must be positive, got {self.dispersion}")

    def to_theta(self, family: str = "poisson") -> np.ndarray:
        th = [self.tau_alpha, self.tau_gamma, self.tau_delta]
        if family == "negbinom":
            th.append(1.0 if self.dispersion is None else self.dispersion)
        return np.log(np.asarray(th, dtype=float))

    @classmethod
    def from_theta(cls, theta) -> "Hyperparameters":
        v = np.exp(np.asarray(theta, dtype=float))
        return cls(*v[:3], dispersion=float(v[3]) if v.size > 3 else None)


@dataclass
class PriorState:
    """Prior precision at one ``theta`` plus its log-normalizer.

    ``log_norm`` is ``1/2 log|Q| + 1/2 log|A Q^{-1} A^T|`` for the engine's
    constraints (up to the shared ``log|A A^T|`` and 2*pi terms), with the
    structure-matrix determinants left out. ``logdet_shift`` is added to the
    log-determinant of every posterior factor built from ``Q``.
    """

    theta: np.ndarray
    Q: sp.csc_matrix
    log_norm: float
    logdet_shift: float = 0.0


class LatentGaussianModel:
    """Interface used by the inference engine.

    Subclasses set ``n_latent``, ``design`` (cells x latent, CSR), ``A``
    (kriging constraints, CSR, may have zero rows), ``family``,
    ``hyper_names`` and ``n_T``/``n_S`` (cells = n_T * n_S), and implement
    :meth:`prior`.
    """

    n_latent: int
    design: sp.csr_matrix
    A: sp.csr_matrix
    family: str
    hyper_names: tuple
    n_T: int
    n_S: int
    pseudo_gram: bool = False

    def __init__(self):
        self._sym_lock = threading.Lock()
        self._symbolic = None

    @property
    def n_cells(self) -> int:
        return self.design.shape[0]

    @property
    def n_theta(self) -> int:
        return len(self.hyper_names)

    @property
    def report_dim(self) -> int:
        return self.n_latent

    @property
    def report_constraints(self) -> sp.csr_matrix:
        return self.A[:, : self.report_dim]

    def prior(self, theta) -> PriorState:
        raise NotImplementedError

    def log_hyperprior(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        lp = log_gamma_prior(theta[:3] if self.family == "negbinom" else theta)
        return lp  # flat on log(phi)

    def dispersion(self, theta) -> float | None:
        if self.family != "negbinom":
            return None
        return float(np.exp(theta[-1]))

    def default_theta(self) -> np.ndarray:
        return np.zeros(self.n_theta)

    def structure_log_det(self) -> float:
        """Sum of ``log|R_b|_+`` over intrinsic blocks (0 when none)."""
        return 0.0

    def posterior_precision(self, state: PriorState, c_cell) -> sp.csc_matrix:
        D = self.design
        return (state.Q + (D.T @ sp.diags(c_cell) @ D)).tocsc()

    def symbolic(self, Q):
        with self._sym_lock:
            if self._symbolic is None or not self._symbolic.matches(Q):
                self._symbolic = analyse(Q) if self._symbolic is None else analyse(Q, self._symbolic.perm)
            return self._symbolic


class GenericLatentModel(LatentGaussianModel):
    """Latent Gaussian model with a user-supplied proper prior precision.

    Parameters
    ----------
    design : (n_cells, n_latent) matrix
    precision_fn : callable
        ``theta -> Q`` (sparse or dense, symmetric positive definite).
    hyper_names : sequence of str
    constraints : (k, n_latent) matrix, optional
        Enforced on the prior and the posterior by kriging.
    log_hyperprior : callable, optional
        ``theta -> float``; the log-gamma default otherwise.
    """

    def __init__(self, design, precision_fn, hyper_names, family="gaussian",
                 constraints=None, log_hyperprior=None, theta0=None):
        super().__init__()
        if family not in FAMILIES:
            raise UnsupportedFamily(family)
        self.design = sp.csr_matrix(design, dtype=float)
        self.n_latent = self.design.shape[1]
        self.n_T, self.n_S = self.design.shape[0], 1
        self.family = family
        self.hyper_names = tuple(hyper_names)
        self._precision_fn = precision_fn
        self._hp = log_hyperprior
        self._theta0 = None if theta0 is None else np.asarray(theta0, dtype=float)
        self.A = (sp.csr_matrix((0, self.n_latent)) if constraints is None
                  else sp.csr_matrix(constraints, dtype=float))
        if self.A.shape[1] != self.n_latent:
            raise DimensionMismatch("constraint matrix width differs from latent dimension")

    def prior(self, theta) -> PriorState:
        theta = np.asarray(theta, dtype=float)
        Q = sp.csc_matrix(self._precision_fn(theta), dtype=float)
        F = cholesky(Q)
        log_norm = 0.5 * F.log_det()
        if self.A.shape[0]:
            log_norm += 0.5 * KrigingCorrection(F, self.A).log_det_gram()
        return PriorState(theta, Q, log_norm)

    def log_hyperprior(self, theta) -> float:
        return super().log_hyperprior(theta) if self._hp is None else float(self._hp(theta))

    def default_theta(self) -> np.ndarray:
        return np.zeros(self.n_theta) if self._theta0 is None else self._theta0.copy()


def scaling_constraints(R: StructureMatrix, n_T: int | None = None, n_S: int | None = None) -> ConstraintSet:
    """Constraints spanning the null space of a RW/ICAR/Type IV structure."""
    if R.kind == "RW1":
        return main_effect_constraints(R.n)
    if R.kind == "RW2":
        return main_effect_constraints(R.n, trend=True)
    if R.kind == "ICAR":
        return main_effect_constraints(R.n)
    ra = R.factors[0]
    build = cons.build_sc_constraints if ra.kind == "RW2" else cons.build_gc_constraints
    return cons.reduce_to_full_rank(build(ra.n, R.factors[1].n))


def _embed(M, offset: int, n: int) -> sp.coo_matrix:
    M = sp.coo_matrix(M)
    return sp.coo_matrix((M.data, (M.row + offset, M.col + offset)), shape=(n, n))


class _PatternMap:
    """Fixed CSC pattern with positions of other matrices' entries inside it."""

    def __init__(self, mats, n):
        P = sp.csc_matrix((n, n))
        for M in mats:
            P = P + abs(sp.csc_matrix(M))
        P = sp.csc_matrix(P)
        P.sum_duplicates()
        P.sort_indices()
        self.n = n
        self.indptr = P.indptr.copy()
        self.indices = P.indices.copy()
        cols = np.repeat(np.arange(n), np.diff(P.indptr))
        self.keys = cols.astype(np.int64) * n + P.indices
        self.nnz = self.keys.size

    def positions(self, rows, cols) -> np.ndarray:
        keys = np.asarray(cols, dtype=np.int64) * self.n + np.asarray(rows, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        if np.any(self.keys[np.minimum(pos, self.nnz - 1)] != keys):
            raise ValueError("entry outside the fixed pattern")
        return pos

    def align(self, M) -> np.ndarray:
        M = sp.coo_matrix(M)
        out = np.zeros(self.nnz)
        np.add.at(out, self.positions(M.row, M.col), M.data)
        return out

    def matrix(self, data) -> sp.csc_matrix:
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


@dataclass
class _Block:
    name: str
    start: int
    size: int
    R: StructureMatrix
    eps: float
    A: sp.csr_matrix            # constraints on this block (local coordinates)
    in_null: bool
    nonnull_eigs: np.ndarray | None
    n_null: int
    log_det_AAt: float
    k: int                      # rank of A


class SpaceTimeModel(LatentGaussianModel):
    """Type IV space-time model ``eta = mu + U beta + alpha_t + gamma_s + delta_ts``.

    Latent order ``[mu, beta, alpha, gamma, delta]``; under ``hymik`` the
    interaction is carried as the pair ``(x, x*)`` and ``eta`` reads ``x``.
    Build with :func:`build_latent_model`.
    """

    def __init__(self, *, graph: Graph, n_T: int, order: int, covariates, family: str,
                 constraints: str, method: str, split: str, scale: bool, trend: bool | None,
                 raw_constraints: bool):
        super().__init__()
        if family not in FAMILIES:
            raise UnsupportedFamily(f"family {family!r} not in {FAMILIES}")
        if constraints not in ("gc", "sc"):
            raise ValueError(f"constraints must be 'gc' or 'sc', got {constraints!r}")
        if method not in ("kriging", "hymik"):
            raise ValueError(f"method must be 'kriging' or 'hymik', got {method!r}")
        self.graph = graph
        self.n_T, self.n_S = n_T, graph.n_nodes
        self.order, self.family = order, family
        self.constraint_label, self.method = constraints, method
        self.scaled = scale
        self.trend = (order == 2 and constraints == "sc") if trend is None else bool(trend)
        self.raw_constraints = raw_constraints
        self.pseudo_gram = bool(raw_constraints)
        N = n_T * self.n_S
        self.n_interaction = N
        U = np.zeros((N, 0)) if covariates is None else np.asarray(covariates, dtype=float)
        if U.ndim != 2 or U.shape[0] != N:
            raise DimensionMismatch(f"covariates must have {N} rows (one per cell), got {U.shape}")
        self.U = U
        p = U.shape[1]
        self.n_fixed = 1 + p

        Ra = build_rw_structure(n_T, order)
        Rg = build_icar_structure(graph)
        Rd = build_interaction_structure(Ra, Rg)
        build = cons.build_sc_constraints if constraints == "sc" else cons.build_gc_constraints
        cset_raw = build(n_T, self.n_S)
        cset = cons.reduce_to_full_rank(cset_raw)
        Aa = main_effect_constraints(n_T, self.trend)
        Ag = main_effect_constraints(self.n_S)
        if scale:
            Ra = scale_structure(Ra, scaling_constraints(Ra))
            Rg = scale_structure(Rg, scaling_constraints(Rg))
            Rd = scale_structure(Rd, scaling_constraints(Rd))
        self.R_alpha, self.R_gamma, self.R_delta = Ra, Rg, Rd
        self.delta_constraints = cset
        self.delta_constraints_raw = cset_raw

        off_a = self.n_fixed
        off_g = off_a + n_T
        off_d = off_g + self.n_S
        self.slices = {"mu": slice(0, 1), "beta": slice(1, 1 + p),
                       "alpha": slice(off_a, off_g), "gamma": slice(off_g, off_d),
                       "delta": slice(off_d, off_d + N)}
        self.split = None
        if method == "hymik":
            self.split = cons.split_constraints(cset, n_T, self.n_S, split)
            self.slices["delta_star"] = slice(off_d + N, off_d + 2 * N)
            self.n_latent = off_d + 2 * N
            A_delta_engine = self.split.A2
        else:
            self.n_latent = off_d + N
            A_delta_engine = cset_raw.A if raw_constraints else cset.A
        self.hyper_names = ("tau_alpha", "tau_gamma", "tau_delta") + (
            ("phi",) if family == "negbinom" else ())

        self._blocks = [self._make_block("alpha", off_a, Ra, Aa.A),
                        self._make_block("gamma", off_g, Rg, Ag.A),
                        self._make_block("delta", off_d if method == "kriging" else off_d + N,
                                         Rd, A_delta_engine)]
        if method == "hymik":
            if not Rd.null_space_annihilates(self.split.A1):
                raise PolicyInfeasible(
                    "absorbed constraint rows are not in the null space of the interaction "
                    "structure (e.g. SC with a first-order random walk); use kriging")
            if not self._blocks[2].in_null:
                raise PolicyInfeasible("kriging block rows are not in the interaction null space")

        # kriging constraints on the full latent vector
        n = self.n_latent
        rows = []
        d_col = off_d  # A2 acts on x (hymik) or delta (kriging)
        for A_loc, off in ((Aa.A, off_a), (Ag.A, off_g), (A_delta_engine, d_col)):
            A_loc = sp.coo_matrix(A_loc)
            rows.append(sp.csr_matrix((A_loc.data, (A_loc.row, A_loc.col + off)),
                                      shape=(A_loc.shape[0], n)))
        self.A = sp.vstack(rows, format="csr")
        self.A_report = sp.vstack(
            [rows[0][:, :off_d + N], rows[1][:, :off_d + N],
             sp.hstack([sp.csr_matrix((cset.n_rows, off_d)), cset.A])], format="csr")

        # design: [1, U, e_t, e_s, e_(t,s)]
        cells = np.arange(N)
        t, s = np.divmod(cells, self.n_S)
        r = [cells, cells, cells]
        c = [np.zeros(N, dtype=int), off_a + t, off_g + s]
        v = [np.ones(N), np.ones(N), np.ones(N)]
        r.append(cells)
        c.append(off_d + cells)
        v.append(np.ones(N))
        if p:
            r.append(np.repeat(cells, p))
            c.append(np.tile(1 + np.arange(p), N))
            v.append(U.ravel())
        self.design = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                                    shape=(N, n))
        self._build_pattern()

    # -- construction helpers -------------------------------------------------
    def _make_block(self, name, start, R: StructureMatrix, A) -> _Block:
        A = sp.csr_matrix(A)
        eps = EPS_REL * _gm(R.matrix.diagonal())
        in_null = R.null_space_annihilates(A) if A.shape[0] else True
        eigs = None
        if in_null:
            eigs = R.eigenvalues()[R.rank_deficiency:]
        # pseudo-determinant so that overdetermined (raw) sets are covered too
        ev = np.linalg.eigvalsh((A @ A.T).toarray()) if A.shape[0] else np.zeros(0)
        ev = ev[ev > 1e-10 * ev[-1]] if ev.size else ev
        return _Block(name, start, R.n, R, eps, A, in_null, eigs, R.rank_deficiency,
                      float(np.sum(np.log(ev))), int(ev.size))

    def _build_pattern(self):
        n = self.n_latent
        N = self.n_interaction
        b_a, b_g, b_d = self._blocks
        pieces = {"fixed": _embed(sp.identity(self.n_fixed), 0, n)}
        for b in self._blocks:
            pieces[b.name] = _embed(b.R.matrix, b.start, n)
            pieces["eps_" + b.name] = _embed(sp.identity(b.size), b.start, n)
        if self.method == "hymik":
            Z = self.split.Z
            I = sp.identity(N, format="csr")
            x0 = self.slices["delta"].start
            # deflated joint block: the Z on the x* diagonal becomes I
            J = sp.bmat([[I, -Z], [-Z, I]], format="coo")
            pieces["kappa"] = _embed(J, x0, n)
        D = self.design
        Dp = D.copy()
        Dp.data = np.ones_like(Dp.data)
        self._pattern = _PatternMap(list(pieces.values()) + [Dp.T @ Dp], n)
        self._piece_data = {k: self._pattern.align(M) for k, M in pieces.items()}
        # likelihood contributions: for each cell the outer product of its design row
        Dc = D.tocsr()
        Dc.sort_indices()
        lens = np.diff(Dc.indptr)
        cell_of = np.repeat(np.arange(Dc.shape[0]), lens ** 2)
        rr, cc, vv = [], [], []
        for i in range(Dc.shape[0]):
            idx = Dc.indices[Dc.indptr[i]:Dc.indptr[i + 1]]
            val = Dc.data[Dc.indptr[i]:Dc.indptr[i + 1]]
            rr.append(np.repeat(idx, idx.size))
            cc.append(np.tile(idx, idx.size))
            vv.append(np.outer(val, val).ravel())
        rr, cc, vv = map(np.concatenate, (rr, cc, vv))
        self._lik_pos = self._pattern.positions(rr, cc)
        self._lik_cell = cell_of
        self._lik_val = vv

    # -- engine interface -----------------------------------------------------
    @property
    def report_dim(self) -> int:
        return self.slices["delta"].stop

    @property
    def report_constraints(self) -> sp.csr_matrix:
        return self.A_report

    def taus(self, theta):
        th = np.asarray(theta, dtype=float)
        return {"alpha": float(np.exp(th[0])), "gamma": float(np.exp(th[1])),
                "delta": float(np.exp(th[2]))}

    def kappa(self, tau_delta: float) -> float:
        b = self._blocks[2]
        # capped so that kappa / eps stays within double-precision reach
        return min(KAPPA_REL * _gm(tau_delta * b.R.matrix.diagonal() + b.eps), KAPPA_MAX_COND * b.eps)

    def _block_log_norm(self, b: _Block, tau: float) -> float:
        k = b.k
        if b.in_null:
            lam = b.nonnull_eigs
            return 0.5 * (np.sum(np.log(tau * lam + b.eps)) - np.sum(np.log(lam))
                          + (b.n_null - k) * np.log(b.eps) + b.log_det_AAt)
        return 0.5 * ((b.size - k) * np.log(tau) + b.log_det_AAt)

    def prior_data(self, theta, kappa: float | None = None) -> np.ndarray:
        tau = self.taus(theta)
        pd = self._piece_data
        data = FIXED_EFFECT_PRECISION * pd["fixed"]
        for b in self._blocks:
            data = data + tau[b.name] * pd[b.name] + b.eps * pd["eps_" + b.name]
        if self.method == "hymik":
            data = data + (self.kappa(tau["delta"]) if kappa is None else kappa) * pd["kappa"]
        return data

    def prior(self, theta) -> PriorState:
        theta = np.asarray(theta, dtype=float)
        tau = self.taus(theta)
        Q = self._pattern.matrix(self.prior_data(theta))
        log_norm = 0.5 * self.n_fixed * np.log(FIXED_EFFECT_PRECISION)
        log_norm += self._block_log_norm(self._blocks[0], tau["alpha"])
        log_norm += self._block_log_norm(self._blocks[1], tau["gamma"])
        shift = 0.0
        b = self._blocks[2]
        if self.method == "kriging":
            log_norm += self._block_log_norm(b, tau["delta"])
        else:
            kappa = self.kappa(tau["delta"])
            lam = b.nonnull_eigs
            N = self.n_interaction
            k2 = b.k
            e = b.eps
            log_q_eps = np.sum(np.log(tau["delta"] * lam + e)) + b.n_null * np.log(e)
            log_norm += 0.5 * (N * np.log(kappa) + log_q_eps - np.sum(np.log(lam))
                               + k2 * np.log(1.0 / e + 1.0 / kappa) + b.log_det_AAt)
            k1 = self.split.k1
            shift = k1 * (np.log(e) - np.log(kappa + e))
        return PriorState(theta, Q, float(log_norm), float(shift))

    def posterior_precision(self, state: PriorState, c_cell) -> sp.csc_matrix:
        data = state.Q.data + np.bincount(self._lik_pos, weights=c_cell[self._lik_cell] * self._lik_val,
                                          minlength=self._pattern.nnz)
        return self._pattern.matrix(data)

    def default_theta(self) -> np.ndarray:
        th = np.zeros(self.n_theta)
        if self.family == "negbinom":
            th[-1] = np.log(10.0)
        return th

    def structure_log_det(self) -> float:
        from .structures import generalized_log_det
        A_d = self.delta_constraints.A
        return (generalized_log_det(self.R_alpha, self._blocks[0].A)
                + generalized_log_det(self.R_gamma, self._blocks[1].A)
                + generalized_log_det(self.R_delta, A_d))

    def block_names(self):
        return [("mu", self.slices["mu"]), ("beta", self.slices["beta"]),
                ("alpha", self.slices["alpha"]), ("gamma", self.slices["gamma"]),
                ("delta", self.slices["delta"])]


def build_latent_model(graph: Graph, n_T: int, temporal_order: int = 2, covariates=None,
                       family: str = "poisson", constraints: str = "sc", method: str = "kriging",
                       split: str = "auto", scale: bool = False, trend: bool | None = None,
                       raw_constraints: bool = False) -> SpaceTimeModel:
    """Assemble the space-time model.

    ``trend`` adds ``d^T alpha = 0``; by default it is on for a second-order
    walk with SC constraints. ``scale`` rescales every structure matrix to
    unit geometric-mean constrained variance. ``raw_constraints`` feeds the
    overdetermined interaction set to kriging (pseudo-inverse Gram) instead of
    the reduced one; only meaningful with ``method='kriging'``.
    """
    if raw_constraints and method != "kriging":
        raise ValueError("raw constraints only apply to the kriging method")
    return SpaceTimeModel(graph=graph, n_T=n_T, order=temporal_order, covariates=covariates,
                          family=family, constraints=constraints.lower(), method=method,
                          split=split, scale=scale, trend=trend, raw_constraints=raw_constraints)


def prior_precision(model: SpaceTimeModel, h: Hyperparameters) -> sp.csc_matrix:
    """Block-diagonal prior precision; for HyMiK the interaction block is the joint (x, x*) precision."""
    theta = h.to_theta(model.family)
    if model.method == "kriging":
        return model.prior(theta).Q
    data = model.prior_data(theta, kappa=0.0)
    Q = model._pattern.matrix(data).tolil()
    x = model.slices["delta"]
    xs = model.slices["delta_star"]
    b = model._blocks[2]
    Q_eps = (h.tau_delta * b.R.matrix + b.eps * sp.identity(b.size)).tocsr()
    J = cons.assemble_joint_precision(model.split.Z, Q_eps, model.kappa(h.tau_delta))
    Q = Q.tocsr()
    out = sp.lil_matrix(Q.shape)
    out[: x.start, : x.start] = Q[: x.start, : x.start]
    out[x.start: xs.stop, x.start: xs.stop] = J
    return out.tocsc()
