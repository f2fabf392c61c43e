"""Reduced parametric form of the functional quadratic model.

The coefficient matrix ``Theta`` is ``M_y x P`` with columns
``[alpha | B^T | Gamma_(3)]`` so that a subject's mean response at times
``t`` is ``Psi(t) @ Theta @ z``.  ``vec`` stacks columns (Fortran order).

Kronecker products put the left factor's index slowest, and the mode-3
unfolding puts the first tensor index fastest, so
``Gamma_(3)[l, k * M_x + h] == gamma[h, k, l]`` lines up with
``kron(phi(s), phi(r))``.
"""

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .errors import DimensionError

MAX_ORDER = 3


def vec(A):
    return np.asarray(A).reshape(-1, order="F")


def unvec(v, shape):
    return np.asarray(v).reshape(shape, order="F")


def n_params(M_x: int, order: int = 2) -> int:
    """``P = 1 + M_x + ... + M_x**order``."""
    return sum(M_x**j for j in range(order + 1))


def block_slices(M_x: int, order: int = 2):
    """Column ranges of ``Theta`` for the intercept and each interaction order."""
    out, start = [], 0
    for j in range(order + 1):
        out.append(slice(start, start + M_x**j))
        start += M_x**j
    return out


@dataclass(frozen=True, eq=False)
class QuadraticModelSpec:
    """Dimensions and penalty of a functional polynomial model.

    Parameters
    ----------
    M_x, M_y : int
        Predictor and response basis sizes.
    Omega_x, Omega_y : ndarray
        PSD roughness penalties of sizes ``M_x`` and ``M_y``.
    lam : float
        Regularization weight, ``>= 0``.
    order : int
        Highest interaction order (1 = functional linear model).
    """

    M_x: int
    M_y: int
    Omega_x: np.ndarray
    Omega_y: np.ndarray
    lam: float = 0.0
    order: int = 2

    def __post_init__(self):
        if not 1 <= self.order <= MAX_ORDER:
            raise ValueError(f"order must be in 1..{MAX_ORDER}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        Ox = np.atleast_2d(np.asarray(self.Omega_x, dtype=float))
        Oy = np.atleast_2d(np.asarray(self.Omega_y, dtype=float))
        if Ox.shape != (self.M_x, self.M_x) or Oy.shape != (self.M_y, self.M_y):
            raise DimensionError("penalty shapes do not match (M_x, M_y)")
        object.__setattr__(self, "Omega_x", Ox)
        object.__setattr__(self, "Omega_y", Oy)

    @property
    def P(self) -> int:
        return n_params(self.M_x, self.order)

    @property
    def n_coef(self) -> int:
        return self.P * self.M_y

    def with_lam(self, lam):
        return QuadraticModelSpec(self.M_x, self.M_y, self.Omega_x, self.Omega_y, lam, self.order)


def matricize_mode3(G) -> np.ndarray:
    """Mode-3 unfolding of an ``M_x x M_x x M_y`` tensor to ``M_y x M_x**2``."""
    G = np.asarray(G)
    if G.ndim != 3:
        raise DimensionError("expected a 3-way array")
    return G.transpose(2, 1, 0).reshape(G.shape[2], G.shape[1] * G.shape[0])


def tensorize_mode3(Gm, M_x: int) -> np.ndarray:
    """Inverse of :func:`matricize_mode3`."""
    Gm = np.asarray(Gm)
    if Gm.ndim != 2 or Gm.shape[1] != M_x * M_x:
        raise DimensionError(f"expected M_y x {M_x * M_x}, got {Gm.shape}")
    return Gm.reshape(Gm.shape[0], M_x, M_x).transpose(2, 1, 0)


def kron_power(v, p: int) -> np.ndarray:
    if p == 0:
        return np.ones(1)
    return reduce(np.kron, [v] * p)


def build_covariate(w, Phi, order: int = 2) -> np.ndarray:
    """Covariate vector ``z = (1, w^T Phi, (w x w)^T (Phi x Phi), ...)``."""
    w = np.asarray(w, dtype=float)
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    if Phi.shape != (w.size, w.size):
        raise DimensionError(f"Phi must be {w.size} x {w.size}, got {Phi.shape}")
    u = Phi.T @ w
    return np.concatenate([kron_power(u, j) for j in range(order + 1)])


def build_covariates(W, Phi, order: int = 2) -> np.ndarray:
    """Row-stacked covariates, ``(n, P)``, for a coefficient matrix ``W`` of shape ``(n, M_x)``."""
    return np.vstack([build_covariate(w, Phi, order) for w in np.atleast_2d(W)])


def build_design_block(z, Psi) -> np.ndarray:
    """``X_i = z_i^T kron Psi_i`` so that ``X_i @ vec(Theta) == Psi_i @ Theta @ z_i``."""
    z = np.asarray(z, dtype=float).ravel()
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    return np.kron(z[None, :], Psi)


def covariate_penalty(Omega_x, order: int = 2) -> np.ndarray:
    """``blockdiag{0, Omega_x, Omega_x x I + I x Omega_x, ...}``.

    Each order-``j`` block sums one ``Omega_x`` per Kronecker slot.
    """
    Omega_x = np.atleast_2d(np.asarray(Omega_x, dtype=float))
    M_x = Omega_x.shape[0]
    I = np.eye(M_x)
    P = n_params(M_x, order)
    out = np.zeros((P, P))
    for j, sl in enumerate(block_slices(M_x, order)):
        if j == 0:
            continue
        block = np.zeros((M_x**j, M_x**j))
        for slot in range(j):
            factors = [I] * j
            factors[slot] = Omega_x
            block += reduce(np.kron, factors)
        out[sl, sl] = block
    return out


def _check_psd(A, name):
    A = np.asarray(A, dtype=float)
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError(f"{name} is not symmetric")
    lo = np.linalg.eigvalsh(A).min() if A.size else 0.0
    if lo < -1e-10 * max(1.0, np.abs(A).max()):
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {lo:.3g})")


def penalty_matrix(Omega_x, Omega_y, order: int = 2) -> np.ndarray:
    """``Omega = Omega_x* x I_{M_y} + I_P x Omega_y`` acting on ``vec(Theta)``."""
    _check_psd(Omega_x, "Omega_x")
    _check_psd(Omega_y, "Omega_y")
    Ox_star = covariate_penalty(Omega_x, order)
    Oy = np.atleast_2d(np.asarray(Omega_y, dtype=float))
    return np.kron(Ox_star, np.eye(Oy.shape[0])) + np.kron(np.eye(Ox_star.shape[0]), Oy)


def build_penalty(spec: QuadraticModelSpec) -> np.ndarray:
    return penalty_matrix(spec.Omega_x, spec.Omega_y, spec.order)


def split_theta(Theta, M_x: int):
    """Views ``(alpha, B, Gamma_(3))`` of a quadratic ``M_y x P`` coefficient matrix.

    ``B`` is returned ``M_x x M_y`` (the transpose of its block in ``Theta``).
    """
    Theta = np.asarray(Theta)
    sl = block_slices(M_x, 2)
    if Theta.shape[1] < sl[2].stop:
        raise DimensionError("Theta has no quadratic block")
    return Theta[:, 0], Theta[:, sl[1]].T, Theta[:, sl[2]]


def assemble_theta(alpha, B, Gamma3) -> np.ndarray:
    return np.column_stack([np.asarray(alpha)[:, None], np.asarray(B).T, np.asarray(Gamma3)])


def symmetrize_gamma(Gamma3, M_x: int) -> np.ndarray:
    """Replace ``gamma[h, k, l]`` by its average with ``gamma[k, h, l]``."""
    G = tensorize_mode3(Gamma3, M_x)
    return matricize_mode3(0.5 * (G + G.transpose(1, 0, 2)))


def eval_surfaces(Theta, predictor_basis, response_basis, grid_s, grid_t, grid_r=None, symmetric=False):
    """Evaluate ``alpha(t)``, ``beta(s, t)`` and ``gamma(r, s, t)`` on grids.

    Returns a dict with ``alpha`` ``(len(t),)``, ``beta`` ``(len(s), len(t))`` and,
    for quadratic models, ``gamma`` ``(len(r), len(s), len(t))``.
    """
    Theta = np.asarray(Theta, dtype=float)
    M_x = predictor_basis.M
    grid_r = grid_s if grid_r is None else grid_r
    phi_s = predictor_basis.evaluate(grid_s)
    psi_t = response_basis.evaluate(grid_t)
    sl = block_slices(M_x, 2)
    out = {
        "alpha": psi_t @ Theta[:, 0],
        "beta": phi_s @ Theta[:, sl[1]].T @ psi_t.T,
    }
    if Theta.shape[1] >= sl[2].stop:
        Gamma3 = Theta[:, sl[2]]
        if symmetric:
            Gamma3 = symmetrize_gamma(Gamma3, M_x)
        G = tensorize_mode3(Gamma3, M_x)
        phi_r = predictor_basis.evaluate(grid_r)
        out["gamma"] = np.einsum("hkl,ah,bk,cl->abc", G, phi_r, phi_s, psi_t, optimize=True)
    return out
