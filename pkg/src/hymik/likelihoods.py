"""Log-likelihood terms and second-order expansion coefficients.

For each observation, ``loglik_terms`` returns the value ``g(eta)``, and the
coefficients ``b`` and ``c`` of the quadratic ``b * eta - c * eta**2 / 2``
that matches ``g`` to second order at the current ``eta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "LikelihoodError",
    "NonFiniteEta",
    "InvalidDispersion",
    "UnsupportedFamily",
    "ObservationSet",
    "FAMILIES",
    "loglik_terms",
]

FAMILIES = ("poisson", "negbinom", "gaussian")
C_FLOOR = 1e-12


class LikelihoodError(ValueError):
    pass


class NonFiniteEta(LikelihoodError):
    pass


class InvalidDispersion(LikelihoodError):
    pass


class UnsupportedFamily(LikelihoodError):
    pass


@dataclass(frozen=True)
class ObservationSet:
    """Observed responses, one entry per observation.

    ``cell`` maps each observation to its linear-predictor index
    ``t * n_S + s``; several observations may share a cell. ``E`` is the
    per-observation exposure (mean is ``E * exp(eta)``). For the internal
    ``gaussian`` family ``E`` holds the known noise precision and the
    response mean is ``eta`` itself.
    """

    y: np.ndarray
    E: np.ndarray
    cell: np.ndarray
    n_T: int
    n_S: int
    family: str = "poisson"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        E = np.broadcast_to(np.asarray(self.E, dtype=float), y.shape).copy()
        cell = np.asarray(self.cell, dtype=np.int64).ravel()
        if self.family not in FAMILIES:
            raise UnsupportedFamily(f"family {self.family!r} not in {FAMILIES}")
        if cell.shape != y.shape:
            raise LikelihoodError("cell index and response lengths differ")
        if cell.size and (cell.min() < 0 or cell.max() >= self.n_T * self.n_S):
            raise LikelihoodError("cell index out of range")
        if not np.all(np.isfinite(y)):
            raise LikelihoodError("non-finite response")
        if self.family != "gaussian":
            if np.any(y < 0):
                raise LikelihoodError("counts must be non-negative")
            if np.any(y != np.round(y)):
                raise LikelihoodError("counts must be integers")
        if not np.all(E > 0):
            raise LikelihoodError("exposures must be positive")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "cell", cell)

    @classmethod
    def from_grid(cls, y, E=1.0, family: str = "poisson") -> "ObservationSet":
        """One observation per cell from an (n_T, n_S) array; ``E`` broadcasts per region."""
        y = np.asarray(y, dtype=float)
        n_T, n_S = y.shape
        E = np.broadcast_to(np.asarray(E, dtype=float), (n_T, n_S))
        return cls(y.ravel(), E.ravel(), np.arange(n_T * n_S), n_T, n_S, family)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def n_cells(self) -> int:
        return self.n_T * self.n_S

    def permuted(self, order) -> "ObservationSet":
        order = np.asarray(order)
        return ObservationSet(self.y[order], self.E[order], self.cell[order],
                              self.n_T, self.n_S, self.family)


def _terms(family, y, E, eta, phi):
    if family == "poisson":
        mu = E * np.exp(eta)
        g = y * (np.log(E) + eta) - mu - gammaln(y + 1.0)
        return g, y - mu, mu
    if family == "negbinom":
        mu = E * np.exp(eta)
        log_mu = np.log(E) + eta
        log_mp = np.logaddexp(log_mu, np.log(phi))
        g = (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0)
             + phi * np.log(phi) + y * log_mu - (y + phi) * log_mp)
        ratio = np.exp(log_mu - log_mp)  # mu / (mu + phi)
        return g, y - (y + phi) * ratio, (y + phi) * ratio * (1.0 - ratio)
    # gaussian with known precision E
    r = y - eta
    g = 0.5 * (np.log(E) - np.log(2 * np.pi)) - 0.5 * E * r * r
    return g, E * r, E.copy()


def loglik_terms(obs: ObservationSet, eta, phi: float | None = None):
    """Per-observation ``(g, b, c)`` at ``eta`` (one value per observation).

    ``c`` is the negative second derivative (floored at 1e-12) and
    ``b = g'(eta) + c * eta``. ``g`` includes all normalizing constants.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != obs.y.shape:
        raise LikelihoodError(f"eta has shape {eta.shape}, expected {obs.y.shape}")
    if not np.all(np.isfinite(eta)):
        raise NonFiniteEta("linear predictor has non-finite entries")
    if obs.family == "negbinom":
        if phi is None or not np.isfinite(phi) or phi <= 0:
            raise InvalidDispersion(f"negative binomial size must be positive, got {phi}")
    g, d1, c = _terms(obs.family, obs.y, obs.E, eta, phi)
    c = np.maximum(c, C_FLOOR)
    return g, d1 + c * eta, c
