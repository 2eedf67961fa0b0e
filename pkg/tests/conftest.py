"""Dense reference computations shared by the test modules.

Everything here uses plain numpy/scipy dense linear algebra so that it is
independent of the sparse code under test.
"""

import numpy as np
import pytest
import scipy.linalg as la


def dense_null_basis(A, n):
    """Orthonormal basis (n x m) of {x : A x = 0}."""
    if A is None or np.asarray(A).size == 0:
        return np.eye(n)
    return la.null_space(np.atleast_2d(np.asarray(A, dtype=float)))


def conditional_mean(x_star, Sigma, A):
    """x* - Sigma A^T (A Sigma A^T)^{-1} A x*."""
    A = np.atleast_2d(A)
    return x_star - Sigma @ A.T @ np.linalg.solve(A @ Sigma @ A.T, A @ x_star)


def conditional_cov(Sigma, A):
    A = np.atleast_2d(A)
    return Sigma - Sigma @ A.T @ np.linalg.solve(A @ Sigma @ A.T, A @ Sigma)


def constrained_gls(Q, b, A):
    """argmin 1/2 x'Qx - b'x subject to A x = 0, by the null-space method."""
    V = dense_null_basis(A, Q.shape[0])
    return V @ np.linalg.solve(V.T @ Q @ V, V.T @ b)


def gaussian_logpdf(y, cov):
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, y)
    return -0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * y.size * np.log(2 * np.pi)


def random_spd(n, rng, cond=50.0):
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0, np.log(cond), n))
    return (U * lam) @ U.T


def pseudo_logdet(M, rtol=1e-8):
    ev = np.linalg.eigvalsh(M)
    return float(np.sum(np.log(ev[ev > rtol * ev.max()])))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        status, label, sec = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {label}  ({sec:.1f} s)")
