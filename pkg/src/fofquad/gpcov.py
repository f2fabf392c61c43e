"""Gaussian-process error covariance and its derivatives in ``nu``.

Per subject, ``Sigma = K + nu3 * I`` with the squared-exponential kernel
``k(t, t') = nu1 * exp(-nu2 / 2 * (t - t')**2)``.  ``nu3`` is the noise
variance by default; ``noise="sd"`` switches to ``Sigma = K + nu3**2 * I``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import IllConditionedError

NOISE_FORMS = ("variance", "sd")


@dataclass(frozen=True)
class NuParams:
    nu1: float
    nu2: float
    nu3: float

    def __post_init__(self):
        if not (self.nu1 > 0 and self.nu2 > 0 and self.nu3 > 0):
            raise ValueError(f"nu parameters must be strictly positive, got {self.as_array()}")

    def as_array(self):
        return np.array([self.nu1, self.nu2, self.nu3], dtype=float)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(x) for x in a))


def kernel(t, t_prime, nu) -> float:
    nu = np.asarray(nu, dtype=float)
    return nu[0] * np.exp(-0.5 * nu[1] * (t - t_prime) ** 2)


def _lag2(times):
    t = np.asarray(times, dtype=float)
    return (t[:, None] - t[None, :]) ** 2


@dataclass(frozen=True, eq=False)
class CovBundle:
    """One subject's covariance, its Cholesky factor, and derivatives.

    ``d1[j]`` is ``dSigma/dnu_j``; ``d2[(j, k)]`` holds the nonzero second
    derivatives (all others vanish).
    """

    Sigma: np.ndarray
    chol: np.ndarray
    d1: tuple = field(default=())
    d2: dict = field(default_factory=dict)

    def solve(self, b):
        return linalg.cho_solve((self.chol, True), b)

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    def inv(self):
        return self.solve(np.eye(self.Sigma.shape[0]))


def _noise_term(nu3, noise):
    if noise == "variance":
        return nu3
    if noise == "sd":
        return nu3**2
    raise ValueError(f"noise must be one of {NOISE_FORMS}")


def cov_matrix(times, nu, noise: str = "variance", derivatives: bool = False) -> CovBundle:
    """Build ``Sigma_i`` for one subject and factorize it.

    A jitter of ``1e-10 * mean(diag)`` is tried once if the first Cholesky fails.
    """
    nu = np.asarray(nu, dtype=float)
    d2 = _lag2(times)
    E = np.exp(-0.5 * nu[1] * d2)
    n = E.shape[0]
    Sigma = nu[0] * E + _noise_term(nu[2], noise) * np.eye(n)
    try:
        L = linalg.cholesky(Sigma, lower=True)
    except linalg.LinAlgError:
        jitter = 1e-10 * np.mean(np.diag(Sigma))
        try:
            L = linalg.cholesky(Sigma + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            min_eig = float(np.linalg.eigvalsh(Sigma).min())
            raise IllConditionedError(
                f"covariance is not positive definite (min eigenvalue {min_eig:.3g})", min_eig
            ) from None
    if not derivatives:
        return CovBundle(Sigma, L)
    d1, dd = cov_derivatives(times, nu, noise)
    return CovBundle(Sigma, L, d1, dd)


def cov_derivatives(times, nu, noise: str = "variance"):
    """First derivatives ``(dS/dnu1, dS/dnu2, dS/dnu3)`` and the nonzero second derivatives.

    The second derivative in ``nu2`` is ``nu1/4 * lag**4 * exp(...)``, obtained by
    differentiating ``dS/dnu2`` directly.
    """
    nu = np.asarray(nu, dtype=float)
    d2 = _lag2(times)
    E = np.exp(-0.5 * nu[1] * d2)
    n = E.shape[0]
    I = np.eye(n)
    first = (E, -0.5 * nu[0] * d2 * E, I if noise == "variance" else 2.0 * nu[2] * I)
    second = {
        (0, 1): -0.5 * d2 * E,
        (1, 1): 0.25 * nu[0] * d2**2 * E,
    }
    if noise == "sd":
        second[(2, 2)] = 2.0 * I
    return first, second


def second_derivative(bundle_d2, j, k, n):
    key = (min(j, k), max(j, k))
    return bundle_d2.get(key, np.zeros((n, n)))
