import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaln

from conftest import conditional_cov, constrained_gls, dense_null_basis, gaussian_logpdf
from hymik.inference import (GridPoint, HyperGrid, ccd_design, corrected_marginal_likelihood,
                             evaluate_theta, explore_hyperparameters, fit, gaussian_approximation,
                             latent_marginals)
from hymik.likelihoods import ObservationSet
from hymik.model import GenericLatentModel, Hyperparameters, build_latent_model
from hymik.structures import Graph

H = Hyperparameters(2.0, 3.0, 0.7)


def _toy_gaussian(rng, n=6, m=9, prec=2.5):
    D = rng.standard_normal((m, n))
    B = rng.standard_normal((n, n))
    R = B @ B.T / n + np.eye(n)
    A = np.vstack([np.ones(n), np.arange(n) - 2.5])
    y = rng.standard_normal(m)
    model = GenericLatentModel(D, lambda th: np.exp(th[0]) * R, ["tau"], family="gaussian",
                               constraints=A, log_hyperprior=lambda th: 0.0)
    obs = ObservationSet(y, prec, np.arange(m), m, 1, family="gaussian")
    return model, obs, D, R, A, y, prec


def test_gaussian_mode_is_constrained_gls(rng):
    model, obs, D, R, A, y, prec = _toy_gaussian(rng)
    ga = gaussian_approximation(model, [0.4], obs)
    Qpost = np.exp(0.4) * R + prec * D.T @ D
    ref = constrained_gls(Qpost, prec * D.T @ y, A)
    assert np.allclose(ga.mode, ref, atol=1e-10)
    assert np.max(np.abs(A @ ga.mode)) < 1e-10
    # constrained posterior variances
    V = conditional_cov(np.linalg.inv(Qpost), A)
    assert np.allclose(ga.marginal_variances(), np.diag(V), atol=1e-10)


@pytest.mark.parametrize("t", [-1.0, 0.0, 0.7, 2.0])
def test_gaussian_evidence_matches_dense_marginal(rng, t):
    model, obs, D, R, A, y, prec = _toy_gaussian(rng)
    S = np.linalg.inv(np.exp(t) * R)
    Sc = conditional_cov(S, A)
    ref = gaussian_logpdf(y, D @ Sc @ D.T + np.eye(y.size) / prec)
    assert evaluate_theta(model, [t], obs).log_post == pytest.approx(ref, abs=1e-9)


def _dense_projected_newton(Q, D, y, E, A, iters=100):
    V = dense_null_basis(A, Q.shape[0])
    z = np.zeros(V.shape[1])
    for _ in range(iters):
        x = V @ z
        mu = E * np.exp(D @ x)
        g = V.T @ (D.T @ (y - mu) - Q @ x)
        Hm = V.T @ (D.T @ (mu[:, None] * D) + Q) @ V
        dz = np.linalg.solve(Hm, g)
        z += dz
        if np.max(np.abs(dz)) < 1e-13:
            break
    return V @ z


@pytest.mark.parametrize("method", ["kriging", "hymik"])
def test_poisson_mode_against_dense_newton(rng, method):
    g = Graph.path(3)
    m = build_latent_model(g, 2, 1, constraints="gc", method=method) if method == "kriging" \
        else build_latent_model(g, 4, 2, constraints="gc", method=method)
    n = m.n_cells
    E = rng.uniform(5, 50, n)
    y = rng.poisson(E * np.exp(0.3 * rng.standard_normal(n))).astype(float)
    obs = ObservationSet(y, E, np.arange(n), m.n_T, m.n_S)
    ga = gaussian_approximation(m, H, obs, strict=True)
    D = m.design.toarray()
    ref = _dense_projected_newton(ga.prior.Q.toarray(), D, y, E, m.A.toarray())
    assert np.allclose(ga.mode, ref, atol=1e-5)
    assert np.max(np.abs(m.report_constraints @ ga.mode[: m.report_dim])) < 1e-7


def test_laplace_evidence_against_quadrature():
    Q0 = np.array([[2.0, 0.6], [0.6, 1.0]])
    D = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([150.0, 90.0, 400.0])
    E = np.array([100.0, 60.0, 150.0])
    model = GenericLatentModel(D, lambda th: np.exp(th[0]) * Q0, ["tau"], family="poisson",
                               log_hyperprior=lambda th: 0.0)
    obs = ObservationSet(y, E, np.arange(3), 3, 1)
    for t in (0.0, 1.0):
        Q = np.exp(t) * Q0
        x0 = gaussian_approximation(model, [t], obs).mode

        def log_joint(x):
            mu = E * np.exp(D @ x)
            return (np.sum(y * np.log(mu) - mu - gammaln(y + 1)) - 0.5 * x @ Q @ x
                    + 0.5 * np.linalg.slogdet(Q)[1] - np.log(2 * np.pi))

        c = log_joint(x0)
        v, _ = integrate.dblquad(lambda b, a: np.exp(log_joint(np.array([a, b])) - c),
                                 x0[0] - 0.5, x0[0] + 0.5, x0[1] - 0.5, x0[1] + 0.5,
                                 epsabs=1e-13, epsrel=1e-11)
        assert evaluate_theta(model, [t], obs).log_post == pytest.approx(c + np.log(v), abs=1e-3)


def test_observation_order_does_not_matter(rng):
    m = build_latent_model(Graph.cycle(4), 5, 2, constraints="sc", method="hymik")
    n = m.n_cells
    E = rng.uniform(5, 30, n)
    y = rng.poisson(E).astype(float)
    obs = ObservationSet(y, E, np.arange(n), 5, 4)
    perm = rng.permutation(n)
    a = evaluate_theta(m, H.to_theta(), obs)
    b = evaluate_theta(m, H.to_theta(), obs.permuted(perm))
    assert a.log_post == pytest.approx(b.log_post, abs=1e-9)
    assert np.allclose(a.approx.mode, b.approx.mode, atol=1e-9)


def test_methods_agree_gaussian(rng):
    g = Graph.path(4)
    ms = {me: build_latent_model(g, 6, 2, family="gaussian", constraints="gc", method=me)
          for me in ("kriging", "hymik")}
    y = rng.standard_normal(24)
    obs = ObservationSet(y, 4.0, np.arange(24), 6, 4, family="gaussian")
    r = {me: gaussian_approximation(m, H, obs) for me, m in ms.items()}
    d = ms["kriging"].report_dim
    assert ms["hymik"].report_dim == d
    assert np.allclose(r["kriging"].mode[:d], r["hymik"].mode[:d], atol=1e-5)
    assert np.allclose(r["kriging"].marginal_variances(d), r["hymik"].marginal_variances(d), atol=1e-5)
    lk = evaluate_theta(ms["kriging"], H.to_theta(), obs).log_post
    lh = evaluate_theta(ms["hymik"], H.to_theta(), obs).log_post
    assert lk == pytest.approx(lh, abs=1e-5)


def test_methods_agree_poisson_fit(rng):
    g = Graph.path(5)
    m_k = build_latent_model(g, 20, 2, constraints="gc", method="kriging")
    m_h = build_latent_model(g, 20, 2, constraints="gc", method="hymik")
    n = m_k.n_cells
    E = rng.uniform(20, 80, n)
    t = np.arange(n) // 5
    y = rng.poisson(E * np.exp(-0.2 + 0.3 * np.sin(t / 3) + 0.2 * rng.standard_normal(n))).astype(float)
    obs = ObservationSet(y, E, np.arange(n), 20, 5)
    a, b = fit(m_k, obs), fit(m_h, obs)
    assert np.corrcoef(a.latent_means, b.latent_means)[0, 1] > 0.999
    assert a.constraint_residual < 1e-7 and b.constraint_residual < 1e-7


def _toy_grid():
    pts = [GridPoint(np.array([t]), np.array([z]), lp, np.log(0.5))
           for t, z, lp in ((0.0, -1.0, -3.0), (0.5, 0.0, -1.0), (1.0, 1.0, -2.0))]
    lw = np.array([p.log_post + p.log_delta for p in pts])
    ev = np.logaddexp.reduce(lw)
    for p, w in zip(pts, lw):
        p.log_weight = w - ev
    return HyperGrid(pts, np.array([0.5]), np.eye(1), ev, ("tau",), 10, "grid")


def test_grid_weights_normalized():
    grid = _toy_grid()
    w = grid.weights()
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    e = np.exp([-3.0, -1.0, -2.0])
    assert np.allclose(w, e / e.sum())
    assert sum(p.density_weight * p.delta for p in grid.points) == pytest.approx(1.0)


def test_mixture_moments():
    grid = _toy_grid()
    w = grid.weights()
    approx = [(np.array([0.0, 1.0]), np.array([1.0, 0.5])),
              (np.array([1.0, 1.0]), np.array([1.0, 0.5])),
              (np.array([2.0, 1.0]), np.array([1.0, 0.5]))]
    mean, sd = latent_marginals(grid, approx)
    mu = w @ np.array([0.0, 1.0, 2.0])
    var = 1.0 + w @ (np.array([0.0, 1.0, 2.0]) - mu) ** 2
    assert mean[0] == pytest.approx(mu) and sd[0] == pytest.approx(np.sqrt(var))
    # identical components: mixture equals the component
    assert mean[1] == pytest.approx(1.0) and sd[1] == pytest.approx(np.sqrt(0.5))


def test_corrected_marginal_likelihood():
    grid = _toy_grid()
    m = build_latent_model(Graph.path(4), 3, 1, constraints="gc", method="kriging")
    ml = corrected_marginal_likelihood(grid, m)
    assert ml.corrected
    assert ml.log_evidence == pytest.approx(grid.log_evidence + 0.5 * m.structure_log_det())
    assert ml.value == pytest.approx(ml.log_evidence / 10)


def test_ccd_integrates_gaussian_moments():
    for d in (2, 3, 4):
        Z, ld = ccd_design(d)
        w = np.exp(ld - 0.5 * np.sum(Z ** 2, axis=1))
        assert w.sum() == pytest.approx((2 * np.pi) ** (d / 2), rel=1e-12)
        M = (Z * w[:, None]).T @ Z
        assert np.allclose(M, (2 * np.pi) ** (d / 2) * np.eye(d), atol=1e-10)


def test_explore_one_dimensional_gaussian_posterior(rng):
    model, obs, *_ = _toy_gaussian(rng, n=6, m=40)
    grid = explore_hyperparameters(model, obs, strategy="grid")
    assert grid.weights().sum() == pytest.approx(1.0)
    # the mode of the explored density is a stationary point
    f = lambda t: evaluate_theta(model, [t], obs).log_post
    t0 = grid.mode_theta[0]
    assert abs(f(t0 + 1e-3) - f(t0 - 1e-3)) / 2e-3 < 1e-2
    assert any(np.all(p.z == 0) for p in grid.points)


def test_fit_rejects_mismatched_observations():
    m = build_latent_model(Graph.path(3), 4, 1, constraints="gc", method="kriging")
    obs = ObservationSet(np.ones(6), 1.0, np.arange(6), 2, 3)
    with pytest.raises(ValueError):
        fit(m, obs)
