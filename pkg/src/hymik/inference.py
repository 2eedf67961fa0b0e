"""Gaussian approximations, hyperparameter exploration and posterior summaries.

Everything here is written against :class:`hymik.model.LatentGaussianModel`,
so the same engine fits the space-time model under either constraint
mechanism and small generic models used as test oracles.
"""

from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .constraints import KrigingCorrection
from .likelihoods import ObservationSet, loglik_terms
from .model import Hyperparameters, LatentGaussianModel, PriorState
from .sparse import NotPositiveDefinite, cholesky
from .structures import TooLargeForExactCorrection

__all__ = [
    "InferenceError",
    "NotConverged",
    "FactorizationFailed",
    "OptimizerStalled",
    "GaussianApprox",
    "ThetaEval",
    "GridPoint",
    "HyperGrid",
    "MarginalLikelihood",
    "PosteriorReport",
    "gaussian_approximation",
    "log_posterior_theta",
    "evaluate_theta",
    "explore_hyperparameters",
    "latent_marginals",
    "corrected_marginal_likelihood",
    "fit",
    "ccd_design",
]

NEWTON_TOL = 1e-6
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 10
GRID_STEP = 0.75
LOG_WEIGHT_CUTOFF = 6.0
CURVATURE_STEP = 0.05
GRADIENT_STEP = 1e-3
MAX_THETA_EVALS = 200
CCD_F0 = 1.1
SAMPLING_THRESHOLD = 20_000


class InferenceError(RuntimeError):
    pass


class NotConverged(InferenceError):
    pass


class FactorizationFailed(InferenceError):
    pass


class OptimizerStalled(InferenceError):
    pass


class _Clock:
    """Per-phase wall-clock accumulator plus deterministic work counters."""

    def __init__(self):
        self.seconds = Counter()
        self.counts = Counter()

    def add(self, other: "_Clock"):
        self.seconds.update(other.seconds)
        self.counts.update(other.counts)


@dataclass
class GaussianApprox:
    """Gaussian approximation of ``p(x | theta, y)`` at the constrained mode."""

    theta: np.ndarray
    mode: np.ndarray
    precision: object
    factor: object
    kriging: KrigingCorrection
    prior: PriorState
    iterations: int
    converged: bool
    log_lik: float
    objective_trace: list = field(default_factory=list, repr=False)
    clock: _Clock = field(default_factory=_Clock, repr=False)

    def marginal_variances(self, dim: int | None = None, n_samples: int = 0,
                           rng_seed=0) -> np.ndarray:
        """Constrained marginal variances of the first ``dim`` latent entries.

        Exact (selected inversion minus the kriging downdate) unless
        ``n_samples > 0``, in which case a Monte Carlo estimate from
        constrained draws is returned.
        """
        dim = self.factor.n if dim is None else dim
        if n_samples > 0:
            rng = np.random.default_rng(rng_seed)
            z = rng.standard_normal((self.factor.n, n_samples))
            draws = self.kriging.correct(self.factor.solve_Lt(z))
            return np.var(draws[:dim], axis=1, ddof=1)
        t0 = time.perf_counter()
        v = self.factor.inverse_diagonal()[:dim]
        self.clock.seconds["selected_inversion"] += time.perf_counter() - t0
        return v - self.kriging.variance_reduction()[:dim]


def _cell_terms(model: LatentGaussianModel, obs: ObservationSet, x, phi):
    eta_cell = model.design @ x
    g, b, c = loglik_terms(obs, eta_cell[obs.cell], phi)
    m = model.n_cells
    return (float(np.sum(g)), np.bincount(obs.cell, weights=b, minlength=m),
            np.bincount(obs.cell, weights=c, minlength=m), eta_cell)


def _objective(model, obs, state, x, phi):
    return _cell_terms(model, obs, x, phi)[0] - 0.5 * float(x @ (state.Q @ x))


def _build(model, obs, state, x, phi, clock):
    """Expansion at ``x``: factor, kriging machinery, and the corrected Newton target."""
    _, b_cell, c_cell, _ = _cell_terms(model, obs, x, phi)
    Qt = model.posterior_precision(state, c_cell)
    t0 = time.perf_counter()
    try:
        F = cholesky(Qt, model.symbolic(Qt), check=False)
    except NotPositiveDefinite as err:
        raise FactorizationFailed(str(err)) from err
    t1 = time.perf_counter()
    kc = KrigingCorrection(F, model.A, pseudo=model.pseudo_gram)
    t2 = time.perf_counter()
    x_new = kc.correct(F.solve(model.design.T @ b_cell))
    clock.seconds["factorization"] += t1 - t0
    clock.seconds["kriging"] += t2 - t1
    clock.counts["factorizations"] += 1
    clock.counts["kriging_solves"] += kc.k
    return Qt, F, kc, x_new


def _theta_of(model, h):
    if isinstance(h, Hyperparameters):
        return h.to_theta(model.family)
    return np.asarray(h, dtype=float)


def gaussian_approximation(model: LatentGaussianModel, h, obs: ObservationSet, x0=None,
                           tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                           strict: bool = False) -> GaussianApprox:
    """Newton-Raphson for the constrained mode of ``p(x | theta, y)``.

    Each iteration expands the log-likelihood to second order at the current
    point, solves with the sparse factor of ``Q_prior + A^T diag(c) A`` and
    maps the solution onto the constraint surface by kriging. Steps that lower
    the log-posterior are halved (at most 10 times). Stops once the linear
    predictor moves by less than ``tol``; the returned factor is rebuilt at
    the final mode.

    ``h`` is a :class:`Hyperparameters` or a log-scale vector. With
    ``strict=True`` a non-converged run raises :class:`NotConverged`.
    """
    theta = _theta_of(model, h)
    clock = _Clock()
    state = model.prior(theta)
    phi = model.dispersion(theta)
    x = np.zeros(model.n_latent) if x0 is None else np.asarray(x0, dtype=float).copy()
    if model.A.shape[0] and x0 is not None:
        x = x - model.A.T @ np.linalg.lstsq((model.A @ model.A.T).toarray(), model.A @ x,
                                            rcond=None)[0]
    f = _objective(model, obs, state, x, phi)
    trace = [f]
    converged = False
    it = 0
    Qt = F = kc = None
    while it < max_iter:
        it += 1
        Qt, F, kc, x_new = _build(model, obs, state, x, phi, clock)
        f_new = _objective(model, obs, state, x_new, phi)
        halvings = 0
        while f_new < f - 1e-12 * abs(f) and halvings < MAX_HALVINGS:
            x_new = 0.5 * (x + x_new)
            f_new = _objective(model, obs, state, x_new, phi)
            halvings += 1
        step = float(np.max(np.abs(model.design @ (x_new - x)))) if x.size else 0.0
        if f_new >= f - 1e-12 * abs(f):
            x, f = x_new, f_new
            trace.append(f)
        if step < tol or obs.family == "gaussian":
            converged = step < tol or obs.family == "gaussian"
            break
    clock.counts["newton_iterations"] += it
    if obs.family != "gaussian":
        Qt, F, kc, _ = _build(model, obs, state, x, phi, clock)
    log_lik = _cell_terms(model, obs, x, phi)[0]
    if not converged and strict:
        raise NotConverged(f"Newton iteration did not converge in {max_iter} steps")
    return GaussianApprox(theta, x, Qt, F, kc, state, it, converged, log_lik, trace, clock)


@dataclass
class ThetaEval:
    theta: np.ndarray
    log_post: float
    approx: GaussianApprox


def evaluate_theta(model: LatentGaussianModel, theta, obs: ObservationSet, x0=None) -> ThetaEval:
    """Laplace approximation of ``log p(theta | y)`` up to a constant, plus the approximation used."""
    theta = np.asarray(theta, dtype=float)
    ga = gaussian_approximation(model, theta, obs, x0=x0)
    x, st = ga.mode, ga.prior
    quad = 0.5 * float(x @ (st.Q @ x))
    # mean of the approximation built at x (differs from x by the last, tiny, step)
    _, b_cell, _, _ = _cell_terms(model, obs, x, model.dispersion(theta))
    m = ga.kriging.correct(ga.factor.solve(model.design.T @ b_cell))
    r = x - m
    log_g = 0.5 * (ga.factor.log_det() + st.logdet_shift + ga.kriging.log_det_gram()) \
        - 0.5 * float(r @ (ga.precision @ r))
    lp = model.log_hyperprior(theta) + st.log_norm - quad + ga.log_lik - log_g
    return ThetaEval(theta, float(lp), ga)


def log_posterior_theta(model: LatentGaussianModel, h, obs: ObservationSet) -> float:
    """``log pi(theta) + log p(x*|theta) + log p(y|x*) - log p_G(x*|theta, y)`` at the mode x*.

    Structure-matrix normalizers are left out (see
    :func:`corrected_marginal_likelihood`); the ``2 pi`` terms cancel.
    """
    return evaluate_theta(model, _theta_of(model, h), obs).log_post


# -- hyperparameter exploration -------------------------------------------------

@dataclass
class GridPoint:
    theta: np.ndarray
    z: np.ndarray
    log_post: float
    log_delta: float
    log_weight: float = 0.0   # normalized: sum_k exp(log_weight_k) = 1 (Delta included)
    means: np.ndarray | None = field(default=None, repr=False)
    variances: np.ndarray | None = field(default=None, repr=False)
    converged: bool = True

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))

    @property
    def density_weight(self) -> float:
        """``w_k`` with ``sum_k w_k * Delta_k = 1``."""
        return float(np.exp(self.log_weight - self.log_delta))


@dataclass
class HyperGrid:
    points: list
    mode_theta: np.ndarray
    curvature: np.ndarray
    log_evidence: float
    names: tuple
    n_obs: int
    strategy: str
    n_evals: int = 0
    negative_variances: int = 0
    sampled_variances: int = 0

    def weights(self) -> np.ndarray:
        """``w_k * Delta_k`` for every point (sums to one)."""
        return np.exp([p.log_weight for p in self.points])


def ccd_design(d: int, f0: float = CCD_F0):
    """Central composite design on the sphere of radius ``f0 * sqrt(d)``.

    Returns ``(Z, log_delta)``: points in standardized coordinates and log
    integration weights that integrate ``exp(-|z|^2 / 2)`` and its second
    moments exactly.
    """
    r = f0 * np.sqrt(d)
    axial = np.vstack([r * np.eye(d), -r * np.eye(d)])
    corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T[::-1] * f0
    Z = np.vstack([np.zeros((1, d)), axial, corners])
    m = Z.shape[0] - 1
    log_c = 0.5 * d * np.log(2 * np.pi)
    log_d0 = log_c + np.log(1.0 - 1.0 / f0 ** 2) if f0 > 1 else -np.inf
    log_d1 = log_c - 2 * np.log(f0) - np.log(m) + 0.5 * r * r
    return Z, np.array([log_d0] + [log_d1] * m)


def _fd_hessian(f, x0, f0, h):
    d = x0.size
    H = np.zeros((d, d))
    fp = np.zeros(d)
    fm = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fp[i], fm[i] = f(x0 + e), f(x0 - e)
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h ** 2
    for i in range(d):
        for j in range(i + 1, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h
            ej[j] = h
            v = (f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


def _standardizer(H):
    """``theta = mode + S z`` with ``S = V diag(lam^-1/2)``; returns (S, log|det S|)."""
    H = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(H)
    floor = max(1e-6, 1e-6 * np.max(np.abs(lam)))
    lam = np.where(lam > floor, lam, np.maximum(np.abs(lam), floor))
    S = V / np.sqrt(lam)
    return S, float(-0.5 * np.sum(np.log(lam)))


class _Evaluator:
    """Counts and memoizes evaluations; warm-starts Newton from the latest mode.

    Failures at extreme ``theta`` (overflowing linear predictor, lost positive
    definiteness) count as ``-inf`` so the search backs off.
    """

    def __init__(self, model, obs, max_evals, clock):
        self.model, self.obs = model, obs
        self.max_evals = max_evals
        self.cache = {}
        self.n = 0
        self.x_warm = None
        self.clock = clock

    def __call__(self, theta):
        key = tuple(np.round(np.asarray(theta, dtype=float), 12))
        if key in self.cache:
            return self.cache[key]
        if self.n >= self.max_evals:
            raise OptimizerStalled(f"hyperparameter search exceeded {self.max_evals} evaluations")
        self.n += 1
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                ev = evaluate_theta(self.model, np.array(key), self.obs, x0=self.x_warm)
        except (InferenceError, ValueError, FloatingPointError):
            self.cache[key] = -np.inf
            return -np.inf
        self.clock.add(ev.approx.clock)
        if np.isfinite(ev.log_post):
            self.x_warm = ev.approx.mode
        self.cache[key] = ev.log_post
        return ev.log_post


def _find_mode(model, obs, theta0, max_evals, tol, clock, max_step=2.0):
    """Quasi-Newton ascent with central-difference gradients.

    The Hessian model starts from the finite-difference diagonal (free with
    central differences) and is refined by BFGS updates. Steps are capped at
    ``max_step`` (log units) and halved until the log-posterior increases.
    Stops when an accepted step improves the log-posterior by less than ``tol``.
    """
    ev = _Evaluator(model, obs, max_evals, clock)
    h = GRADIENT_STEP
    d = theta0.size

    def grad_curv(th, f0):
        g = np.zeros(d)
        c = np.zeros(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = h
            fp, fm = ev(th + e), ev(th - e)
            g[i] = (fp - fm) / (2 * h)
            c[i] = -(fp - 2 * f0 + fm) / h ** 2
        return g, c

    th = np.asarray(theta0, dtype=float)
    f = ev(th)
    if not np.isfinite(f):
        raise InferenceError(f"log-posterior is not finite at the starting point {th}")
    g, c = grad_curv(th, f)
    B = np.diag(np.maximum(np.abs(c), 1e-2))  # negative Hessian model
    for _ in range(100):
        step = np.linalg.solve(B, g)
        norm = np.max(np.abs(step))
        if norm > max_step:
            step *= max_step / norm
        t = 1.0
        while True:
            th_new = th + t * step
            f_new = ev(th_new)
            if f_new > f or t < 1e-3:
                break
            t *= 0.5
        if not f_new > f:
            break
        g_new, c_new = grad_curv(th_new, f_new)
        s_vec, y_vec = th_new - th, g - g_new
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            Bs = B @ s_vec
            B = B - np.outer(Bs, Bs) / (s_vec @ Bs) + np.outer(y_vec, y_vec) / (s_vec @ y_vec)
        else:
            B = np.diag(np.maximum(np.abs(c_new), 1e-2))
        improvement = f_new - f
        th, f, g = th_new, f_new, g_new
        if improvement < tol:
            break
    return th, f, ev


def explore_hyperparameters(model: LatentGaussianModel, obs: ObservationSet, init=None,
                            strategy: str = "auto", dz: float = GRID_STEP,
                            cutoff: float = LOG_WEIGHT_CUTOFF, max_evals: int = MAX_THETA_EVALS,
                            threads: int = 1, tol: float = 1e-4, keep_marginals: bool = True,
                            sampling_threshold: int = SAMPLING_THRESHOLD, n_samples: int = 1000,
                            seed: int = 0, clock: _Clock | None = None) -> HyperGrid:
    """Locate the mode of ``p(theta | y)`` and lay integration points around it.

    The mode is found by a quasi-Newton ascent on the log scale with
    central-difference gradients; curvature at the mode comes from finite differences with step
    0.05. ``strategy`` is ``grid`` (regular lattice with step ``dz`` in
    standardized coordinates, points more than ``cutoff`` below the mode
    dropped), ``ccd`` (central composite design) or ``auto`` (grid up to two
    hyperparameters, CCD beyond). Grid points are evaluated in parallel on
    ``threads`` threads, warm-started from the mode's solution. Above
    ``sampling_threshold`` latent variables, marginal variances are estimated
    from ``n_samples`` constrained draws seeded by ``seed`` and the point index.
    """
    clock = _Clock() if clock is None else clock
    d = model.n_theta
    theta0 = model.default_theta() if init is None else _theta_of(model, init)
    t0 = time.perf_counter()
    if d == 0:
        mode, lp_mode, ev = theta0, None, _Evaluator(model, obs, max_evals, clock)
        lp_mode = ev(theta0)
    else:
        mode, lp_mode, ev = _find_mode(model, obs, theta0, max_evals, tol, clock)
    H = _fd_hessian(lambda th: -ev(th), mode, -lp_mode, CURVATURE_STEP) if d else np.zeros((0, 0))
    clock.seconds["mode_search"] += time.perf_counter() - t0
    S, log_det_S = _standardizer(H) if d else (np.zeros((0, 0)), 0.0)
    if strategy == "auto":
        strategy = "grid" if d <= 2 else "ccd"

    x_mode = ev.x_warm
    evaluated = {}

    def lp_at(z):
        key = tuple(np.round(z, 10))
        if key not in evaluated:
            evaluated[key] = ev(mode + S @ np.asarray(z))
        return evaluated[key]

    if d == 0:
        Zs, log_deltas = np.zeros((1, 0)), np.zeros(1)
    elif strategy == "ccd":
        Zs, log_deltas = ccd_design(d)
    elif strategy == "grid":
        lo, hi = np.zeros(d, dtype=int), np.zeros(d, dtype=int)
        for i in range(d):
            for sign, store in ((1, hi), (-1, lo)):
                k = 0
                while k < 30:
                    z = np.zeros(d)
                    z[i] = sign * (k + 1) * dz
                    if lp_mode - lp_at(z) > cutoff:
                        break
                    k += 1
                store[i] = sign * k
        axes = [np.arange(lo[i], hi[i] + 1) * dz for i in range(d)]
        Zs = np.array(np.meshgrid(*axes, indexing="ij")).reshape(d, -1).T
        # skip lattice points that a Gaussian surface already puts far below the cutoff
        Zs = Zs[0.5 * np.sum(Zs ** 2, axis=1) <= cutoff + 3.0]
        log_deltas = np.full(len(Zs), d * np.log(dz))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    thetas = [mode + S @ z for z in Zs]
    report_dim = model.report_dim
    sampled = model.n_latent > sampling_threshold

    def run(item):
        k, theta = item
        e = evaluate_theta(model, theta, obs, x0=x_mode)
        out = [e.log_post, e.approx.converged, e.approx.clock, None, None]
        if keep_marginals:
            ga = e.approx
            out[3] = ga.mode[:report_dim].copy()
            out[4] = ga.marginal_variances(report_dim, n_samples=n_samples if sampled else 0,
                                           rng_seed=(seed, k))
        return out

    t0 = time.perf_counter()
    if threads > 1 and len(thetas) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, enumerate(thetas)))
    else:
        results = [run(item) for item in enumerate(thetas)]
    clock.seconds["grid"] += time.perf_counter() - t0

    points = []
    neg_var = 0
    for z, th, ld, (lp, conv, ck, mu, var) in zip(Zs, thetas, log_deltas, results):
        clock.add(ck)
        if lp_mode - lp > cutoff and np.any(z != 0):
            continue
        if var is not None:
            neg_var += int(np.sum(var < 0))
            var = np.maximum(var, 0.0)
        points.append(GridPoint(np.asarray(th), np.asarray(z), lp, ld + log_det_S,
                                means=mu, variances=var, converged=conv))
    clock.counts["theta_evaluations"] += ev.n + len(thetas)
    lw = np.array([p.log_post + p.log_delta for p in points])
    log_ev = float(np.logaddexp.reduce(lw))
    for p, w in zip(points, lw):
        p.log_weight = float(w - log_ev)
    grid = HyperGrid(points, np.asarray(mode), H, log_ev, tuple(model.hyper_names),
                     obs.n_obs, strategy, ev.n + len(thetas), neg_var)
    grid.sampled_variances = n_samples if (sampled and keep_marginals) else 0
    return grid


def latent_marginals(grid: HyperGrid, approximations=None):
    """Mixture means and standard deviations over the grid.

    ``approximations`` optionally supplies ``(means, variances)`` per grid
    point; otherwise those stored on the points are used.
    """
    w = grid.weights()
    if approximations is None:
        approximations = [(p.means, p.variances) for p in grid.points]
    means = sum(wk * m for wk, (m, _) in zip(w, approximations))
    second = sum(wk * (v + m * m) for wk, (m, v) in zip(w, approximations))
    var = second - means * means
    # mixture variance is non-negative in exact arithmetic; clamp rounding
    var = np.maximum(var, 0.0)
    return means, np.sqrt(var)


@dataclass(frozen=True)
class MarginalLikelihood:
    value: float          # average log marginal likelihood per observation
    corrected: bool
    log_evidence: float   # total, corrected when ``corrected``


def corrected_marginal_likelihood(grid: HyperGrid, model: LatentGaussianModel) -> MarginalLikelihood:
    """Add ``1/2 log|R_b|_+`` for every intrinsic block and average over observations."""
    try:
        corr = 0.5 * model.structure_log_det()
        ok = True
    except TooLargeForExactCorrection:
        corr, ok = 0.0, False
    total = grid.log_evidence + corr
    return MarginalLikelihood(total / grid.n_obs, ok, total)


# -- top level ------------------------------------------------------------------

@dataclass
class PosteriorReport:
    hyper: list                 # [{name, mean, sd, mode}]
    latent_means: np.ndarray
    latent_sds: np.ndarray
    avg_marginal_loglik: float
    corrected: bool
    method: str
    constraints: str
    counters: dict
    seconds: dict
    converged: bool
    constraint_residual: float
    warnings: list = field(default_factory=list)
    blocks: list = field(default_factory=list)

    def block(self, name: str):
        for n, sl in self.blocks:
            if n == name:
                return self.latent_means[sl], self.latent_sds[sl]
        raise KeyError(name)


def _hyper_summary(grid: HyperGrid, family: str):
    w = grid.weights()
    out = []
    T = np.array([p.theta for p in grid.points])
    for i, name in enumerate(grid.names):
        v = np.exp(T[:, i])
        mean = float(w @ v)
        sd = float(np.sqrt(max(w @ (v * v) - mean * mean, 0.0)))
        out.append({"name": name, "mean": mean, "sd": sd, "mode": float(np.exp(grid.mode_theta[i]))})
        if name == "phi":
            iv = 1.0 / v
            m2 = float(w @ iv)
            out.append({"name": "1/phi", "mean": m2,
                        "sd": float(np.sqrt(max(w @ (iv * iv) - m2 * m2, 0.0))),
                        "mode": float(np.exp(-grid.mode_theta[i]))})
    return out


def fit(model: LatentGaussianModel, obs: ObservationSet, init=None, threads: int = 1,
        strategy: str = "auto", **kw) -> PosteriorReport:
    """Full fit: hyperparameter exploration, latent mixture, corrected evidence."""
    if obs.n_T * obs.n_S != model.n_cells:
        raise ValueError(f"observations cover {obs.n_T * obs.n_S} cells, model has {model.n_cells}")
    if obs.family != model.family:
        raise ValueError(f"observation family {obs.family!r} differs from model family {model.family!r}")
    clock = _Clock()
    t0 = time.perf_counter()
    grid = explore_hyperparameters(model, obs, init=init, strategy=strategy, threads=threads,
                                   clock=clock, **kw)
    means, sds = latent_marginals(grid)
    ml = corrected_marginal_likelihood(grid, model)
    clock.seconds["total"] = time.perf_counter() - t0
    warnings = []
    if grid.negative_variances:
        warnings.append(f"{grid.negative_variances} negative variances clamped to zero")
    ns = grid.sampled_variances
    if ns:
        warnings.append(f"latent variances estimated from {ns} draws per grid point "
                        f"(relative sd of each estimate about {np.sqrt(2.0 / (ns - 1)):.3g})")
    if not ml.corrected:
        warnings.append("marginal likelihood not corrected: structure too large")
    conv = all(p.converged for p in grid.points)
    if not conv:
        warnings.append("Newton iteration did not converge at some grid points")
    A = sp.csr_matrix(model.report_constraints)
    resid = 0.0
    if A.shape[0]:
        # rows scaled to unit norm: the violation should not depend on how a row is written
        norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
        resid = float(np.max(np.abs(A @ means) / norms))
    blocks = model.block_names() if hasattr(model, "block_names") else [("x", slice(0, means.size))]
    counters = dict(clock.counts)
    counters["grid_points"] = len(grid.points)
    return PosteriorReport(
        hyper=_hyper_summary(grid, model.family), latent_means=means, latent_sds=sds,
        avg_marginal_loglik=ml.value, corrected=ml.corrected,
        method=getattr(model, "method", "generic"),
        constraints=getattr(model, "constraint_label", "custom"),
        counters=counters, seconds=dict(clock.seconds), converged=conv,
        constraint_residual=resid, warnings=warnings, blocks=blocks)
