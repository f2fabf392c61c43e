"""Penalized maximum likelihood for the functional quadratic model.

Given ``nu`` the coefficients have the closed form
``vec(Theta) = (X^T S^-1 X + n lam Omega)^+ X^T S^-1 y``; ``nu`` is then moved
by one damped Newton step on the log scale, and the two updates alternate
until the penalized log-likelihood stops changing.

Subjects observed on identical time grids share one covariance factorization,
and ``X^T S^-1 X`` is accumulated blockwise as ``kron(z z^T, Psi^T S^-1 Psi)``
without forming ``X``.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg

from .basis import BasisSystem, gram_matrix
from .design import (
    QuadraticModelSpec,
    build_covariate,
    build_covariates,
    build_design_block,
    build_penalty,
    unvec,
    vec,
)
from .errors import DimensionError
from .gpcov import cov_matrix, second_derivative

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-10
MAX_HALVINGS = 30
MAX_LOG_STEP = 2.0
# GP amplitude below this fraction of the noise variance leaves nu2 unidentified
BOUNDARY_RATIO = 1e-8


@dataclass(eq=False)
class RegressionData:
    """Covariates and response observations for ``n`` subjects.

    Parameters
    ----------
    Z : ndarray, shape (n, P)
        Covariate vectors ``z_i``.
    times, y : list of ndarray
        Response observation times and values per subject.
    response_basis : BasisSystem
    """

    Z: np.ndarray
    times: List[np.ndarray]
    y: List[np.ndarray]
    response_basis: BasisSystem
    Psi: List[np.ndarray] = field(init=False)
    groups: list = field(init=False)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.times = [np.asarray(t, dtype=float) for t in self.times]
        self.y = [np.asarray(v, dtype=float) for v in self.y]
        if not (len(self.times) == len(self.y) == self.Z.shape[0]):
            raise DimensionError("Z, times and y must describe the same subjects")
        for t, v in zip(self.times, self.y):
            if t.shape != v.shape:
                raise DimensionError("times and y differ in length for a subject")
        self.Psi = [self.response_basis.evaluate(t) for t in self.times]
        # subjects sharing a time grid share Sigma_i
        index = {}
        for i, t in enumerate(self.times):
            index.setdefault(t.tobytes(), []).append(i)
        self.groups = [np.array(ix) for ix in index.values()]

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def N(self) -> int:
        return sum(len(v) for v in self.y)

    @property
    def P(self) -> int:
        return self.Z.shape[1]

    @property
    def M_y(self) -> int:
        return self.response_basis.M

    def y_stacked(self):
        return np.concatenate(self.y)

    def design_matrix(self) -> np.ndarray:
        """Dense stacked ``X``; for checks and small problems only."""
        return np.vstack([build_design_block(z, Psi) for z, Psi in zip(self.Z, self.Psi)])

    def subset(self, idx):
        idx = np.asarray(idx)
        return RegressionData(self.Z[idx], [self.times[i] for i in idx], [self.y[i] for i in idx],
                              self.response_basis)


def prepare_data(W, Phi, response_times, response_values, response_basis, order=2) -> RegressionData:
    Z = build_covariates(W, Phi, order)
    return RegressionData(Z, list(response_times), list(response_values), response_basis)


# --- per-group covariance state -------------------------------------------------


class _GroupState:
    """Covariance factorization shared by the subjects of one time grid."""

    def __init__(self, data, idx, nu, noise, derivatives):
        self.idx = idx
        self.Psi = data.Psi[idx[0]]
        self.cov = cov_matrix(data.times[idx[0]], nu, noise, derivatives=derivatives)
        self.SiPsi = self.cov.solve(self.Psi)


def _group_states(data, nu, noise="variance", derivatives=False):
    return [_GroupState(data, g, nu, noise, derivatives) for g in data.groups]


def _residual_matrix(data, Theta, idx):
    Psi = data.Psi[idx[0]]
    fitted = data.Z[idx] @ Theta.T @ Psi.T
    Y = np.vstack([data.y[i] for i in idx])
    return Y - fitted


def normal_equations(data: RegressionData, states):
    """``(X^T S^-1 X, X^T S^-1 y)``."""
    P, M_y = data.P, data.M_y
    G = np.zeros((P * M_y, P * M_y))
    b = np.zeros(P * M_y)
    for st in states:
        Zg = data.Z[st.idx]
        Yg = np.vstack([data.y[i] for i in st.idx])
        G += np.kron(Zg.T @ Zg, st.Psi.T @ st.SiPsi)
        b += vec(st.SiPsi.T @ Yg.T @ Zg)
    return 0.5 * (G + G.T), b


class SymmetricSystem:
    """Pseudo-inverse of a symmetric PSD matrix ``A`` with diagonal equilibration.

    ``A`` is rescaled to ``D^-1/2 A D^-1/2`` with ``D = diag(A)`` before the
    eigendecomposition, so a penalty many orders of magnitude larger than the
    data term cannot swamp the directions the data determine.  Eigenvalues of
    the scaled matrix below ``rcond * max`` are dropped, and solutions are
    projected onto the complement of the null space, which makes them the
    minimum-norm solutions in the original coordinates.
    """

    def __init__(self, A, rcond=PINV_RCOND):
        A = np.asarray(A, dtype=float)
        d = np.abs(np.diag(A)).copy()
        d[d == 0] = 1.0
        self.s = 1.0 / np.sqrt(d)
        evals, evecs = linalg.eigh(A * self.s[:, None] * self.s[None, :])
        top = np.abs(evals).max() if evals.size else 0.0
        keep = evals > rcond * top
        self.V = evecs[:, keep] * self.s[:, None]  # A^- = V diag(1/e) V^T
        self.e = evals[keep]
        self.rank_deficient = bool(np.sum(keep) < len(evals))
        self.null = None
        if self.rank_deficient:
            self.null, _ = linalg.qr(evecs[:, ~keep] * self.s[:, None], mode="economic")

    def solve(self, b):
        x = self.V @ ((self.V.T @ b) / self.e)
        if self.null is not None:
            x = x - self.null @ (self.null.T @ x)
        return x

    def quad(self, C):
        """``C^T A^- C``; independent of the generalized inverse for ``C`` in range(A)."""
        VC = self.V.T @ C
        return VC.T @ (VC / self.e[:, None])

    def trace_with(self, G):
        """``tr(A^- G)``; independent of the generalized inverse when range(G) is in range(A)."""
        return float(np.sum(np.einsum("ij,ik,kj->j", self.V, G, self.V) / self.e))


def sym_pinv_solve(A, b, rcond=PINV_RCOND):
    """Minimum-norm solution of a symmetric PSD system; returns ``(x, rank_deficient)``."""
    sys_ = SymmetricSystem(A, rcond)
    return sys_.solve(b), sys_.rank_deficient


def sym_pinv(A, rcond=PINV_RCOND):
    evals, evecs = linalg.eigh(A)
    top = np.abs(evals).max() if evals.size else 0.0
    keep = np.abs(evals) > rcond * top
    return (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T, bool(np.sum(keep) < len(evals))


# --- likelihood -----------------------------------------------------------------


def _as_theta(Theta, data):
    Theta = np.asarray(Theta, dtype=float)
    if Theta.ndim == 1:
        Theta = unvec(Theta, (data.M_y, data.P))
    if Theta.shape != (data.M_y, data.P):
        raise DimensionError(f"Theta must be {data.M_y} x {data.P}, got {Theta.shape}")
    return Theta


def _loglik_from_states(data, Theta, states):
    total = 0.0
    for st in states:
        R = _residual_matrix(data, Theta, st.idx)
        A = st.cov.solve(R.T)
        n_g, n_t = R.shape
        total += -0.5 * n_g * (n_t * np.log(2.0 * np.pi) + st.cov.logdet()) - 0.5 * np.sum(R.T * A)
    return float(total)


def log_likelihood(Theta, nu, data: RegressionData, noise="variance") -> float:
    """Gaussian log-likelihood summed over subjects, via Cholesky factors."""
    Theta = _as_theta(Theta, data)
    return _loglik_from_states(data, Theta, _group_states(data, nu, noise))


def penalty_value(Theta, Omega) -> float:
    v = vec(Theta)
    return float(v @ Omega @ v)


def penalized_log_likelihood(Theta, nu, data, lam, Omega, noise="variance") -> float:
    """``loglik - n * lam / 2 * vec(Theta)^T Omega vec(Theta)``."""
    Theta = _as_theta(Theta, data)
    ll = log_likelihood(Theta, nu, data, noise)
    if lam == 0:
        return ll
    return ll - 0.5 * data.n * lam * penalty_value(Theta, Omega)


def update_theta(data, nu, lam, Omega, noise="variance", states=None):
    """Closed-form penalized GLS estimate of ``vec(Theta)`` given ``nu``.

    Returns ``(vec_theta, rank_deficient)``; the minimum-norm solution is used
    whenever the system matrix is singular.
    """
    if states is None:
        states = _group_states(data, nu, noise)
    G, b = normal_equations(data, states)
    A = G + data.n * lam * Omega if lam else G
    return sym_pinv_solve(A, b)


def theta_score(Theta, nu, data, lam, Omega, noise="variance"):
    """``X^T S^-1 (y - X vec Theta) - n lam Omega vec Theta``."""
    Theta = _as_theta(Theta, data)
    states = _group_states(data, nu, noise)
    g = np.zeros(data.P * data.M_y)
    for st in states:
        R = _residual_matrix(data, Theta, st.idx)
        g += vec(st.SiPsi.T @ R.T @ data.Z[st.idx])
    return g - data.n * lam * (Omega @ vec(Theta))


# --- derivatives in nu ----------------------------------------------------------


def nu_derivatives(Theta, nu, data, noise="variance", hessian=True, cross=False):
    """Gradient and Hessian of the log-likelihood in ``nu`` (original scale).

    The penalty does not involve ``nu``, so these are also the derivatives of
    the penalized objective.  With ``cross=True`` also returns the
    ``(P * M_y, 3)`` matrix ``C`` with columns ``X^T S^-1 dS/dnu_j alpha``, the
    negated mixed second derivative in ``(vec Theta, nu)``.
    """
    Theta = _as_theta(Theta, data)
    states = _group_states(data, nu, noise, derivatives=True)
    grad = np.zeros(3)
    H = np.zeros((3, 3))
    C = np.zeros((data.P * data.M_y, 3)) if cross else None
    for st in states:
        R = _residual_matrix(data, Theta, st.idx)
        n_g, n_t = R.shape
        Al = st.cov.solve(R.T)  # columns alpha_i
        Sinv = st.cov.inv()
        D = st.cov.d1
        SD = [Sinv @ Dj for Dj in D]
        DAl = [Dj @ Al for Dj in D]
        for j in range(3):
            grad[j] += 0.5 * np.sum(Al * DAl[j]) - 0.5 * n_g * np.trace(SD[j])
            if cross:
                C[:, j] += vec(st.SiPsi.T @ DAl[j] @ data.Z[st.idx])
        if not hessian:
            continue
        for j in range(3):
            for k in range(j, 3):
                D2 = second_derivative(st.cov.d2, j, k, n_t)
                # alpha^T D_j S^-1 D_k alpha
                quad_S = np.sum(DAl[j] * st.cov.solve(DAl[k]))
                quad_D2 = np.sum(Al * (D2 @ Al))
                tr_part = np.trace(Sinv @ D2) - np.sum(SD[j] * SD[k].T)
                h = 0.5 * quad_D2 - quad_S - 0.5 * n_g * tr_part
                H[j, k] += h
                if k != j:
                    H[k, j] += h
    if cross:
        return grad, H, C
    return grad, H


def nu_gradient(Theta, nu, data, lam=0.0, noise="variance"):
    return nu_derivatives(Theta, nu, data, noise, hessian=False)[0]


def nu_hessian(Theta, nu, data, lam=0.0, noise="variance"):
    return nu_derivatives(Theta, nu, data, noise, hessian=True)[1]


def to_log_scale(nu, grad, H):
    """Chain rule to ``rho = log(nu)``."""
    nu = np.asarray(nu, dtype=float)
    g_rho = nu * grad
    H_rho = nu[:, None] * H * nu[None, :] + np.diag(g_rho)
    return g_rho, H_rho


def newton_step(x, grad, hess, objective, f0=None, max_halvings=MAX_HALVINGS, max_step=None):
    """One damped Newton ascent step.

    Uses ``-H^-1 g`` when ``H`` is negative definite.  Otherwise the
    eigenvalues of ``H`` are replaced by ``-max(|e|, 1e-8 * max|e|)`` so the
    direction still ascends.  The step is halved until the objective does not
    decrease; ``max_step`` caps the largest coordinate of the full step.

    Returns
    -------
    x_new : ndarray
    status : {'ok', 'stationary', 'failed'}
    f_new : float
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad, dtype=float)
    H = np.atleast_2d(np.asarray(hess, dtype=float))
    if f0 is None:
        f0 = objective(x)
    if not np.any(g):
        return x, "stationary", f0
    try:
        c = linalg.cho_factor(-H)
        d = linalg.cho_solve(c, g)
    except linalg.LinAlgError:
        evals, evecs = linalg.eigh(0.5 * (H + H.T))
        mag = np.abs(evals)
        top = mag.max()
        if top == 0:
            d = g
        else:
            mag = np.maximum(mag, 1e-8 * top)
            d = evecs @ ((evecs.T @ g) / mag)
    if max_step is not None:
        big = np.abs(d).max()
        if big > max_step:
            d = d * (max_step / big)
    gain = float(g @ d)
    if gain <= 1e-14 * max(1.0, abs(f0)):
        return x, "stationary", f0
    step = 1.0
    for _ in range(max_halvings + 1):
        x_new = x + step * d
        f_new = objective(x_new)
        if np.isfinite(f_new) and f_new >= f0:
            return x_new, "ok", f_new
        step *= 0.5
    return x, "failed", f0


def newton_nu_step(nu, grad_rho, hess_rho, objective_rho, f0=None, max_log_step=MAX_LOG_STEP):
    """Damped Newton update of ``nu`` in ``rho = log(nu)`` coordinates.

    ``grad_rho`` and ``hess_rho`` are derivatives with respect to ``rho`` and
    ``objective_rho`` evaluates the objective at a given ``rho``.
    Returns ``(nu_new, status, f_new)``.
    """
    nu = np.asarray(nu, dtype=float)
    rho, status, f_new = newton_step(np.log(nu), grad_rho, hess_rho, objective_rho, f0,
                                     max_step=max_log_step)
    if status != "ok":
        return nu.copy(), status, f_new
    return np.exp(rho), status, f_new


# --- fitting --------------------------------------------------------------------


@dataclass(eq=False)
class FittedModel:
    """Estimated model and fit diagnostics.

    ``Theta`` is ``M_y x P``; ``nu`` is on the original scale.
    """

    Theta: np.ndarray
    nu: np.ndarray
    spec: QuadraticModelSpec
    predictor_basis: BasisSystem
    response_basis: BasisSystem
    Phi: np.ndarray
    noise: str = "variance"
    diagnostics: dict = field(default_factory=dict)
    smoothing: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))

    def covariate(self, w):
        return build_covariate(w, self.Phi, self.spec.order)

    def to_dict(self) -> dict:
        from .serialize import model_to_dict

        return model_to_dict(self)

    @classmethod
    def from_dict(cls, d) -> "FittedModel":
        from .serialize import model_from_dict

        return model_from_dict(d)


def initial_nu(data, lam, Omega, noise="variance"):
    """Scale-aware start: OLS residual variance split evenly between GP and noise."""
    states = [_IdentityState(data, g) for g in data.groups]
    G, b = normal_equations(data, states)
    A = G + data.n * lam * Omega if lam else G
    theta, _ = sym_pinv_solve(A, b)
    Theta = unvec(theta, (data.M_y, data.P))
    rss = sum(float(np.sum(_residual_matrix(data, Theta, g) ** 2)) for g in data.groups)
    y_all = data.y_stacked()
    s2 = max(rss / data.N, 1e-10 * max(1.0, float(np.mean(y_all**2))))
    t_all = np.concatenate(data.times)
    span = float(t_all.max() - t_all.min()) or 1.0
    nu3 = 0.5 * s2 if noise == "variance" else np.sqrt(0.5 * s2)
    return np.array([0.5 * s2, 1.0 / span**2, nu3])


def _at_boundary(nu, noise):
    noise_var = nu[2] if noise == "variance" else nu[2] ** 2
    return bool(nu[0] < BOUNDARY_RATIO * noise_var)


class _IdentityState:
    def __init__(self, data, idx):
        self.idx = idx
        self.Psi = data.Psi[idx[0]]
        self.SiPsi = self.Psi


class _Profile:
    """``Theta`` maximizing the penalized likelihood at fixed ``nu``, with its system eigendecomposition."""

    def __init__(self, data, nu, lam, Omega, noise):
        self.nu = np.asarray(nu, dtype=float)
        states = _group_states(data, nu, noise)
        G, b = normal_equations(data, states)
        A = G + data.n * lam * Omega if lam else G
        self.system = SymmetricSystem(A)
        self.rank_deficient = self.system.rank_deficient
        theta = self.system.solve(b)
        self.Theta = unvec(theta, (data.M_y, data.P))
        self.f = _loglik_from_states(data, self.Theta, states)
        if lam:
            self.f -= 0.5 * data.n * lam * penalty_value(self.Theta, Omega)

    def pinv_quad(self, C):
        """``C^T A^+ C``."""
        return self.system.quad(C)


def fit(
    data: RegressionData,
    spec: QuadraticModelSpec,
    predictor_basis: Optional[BasisSystem] = None,
    Phi=None,
    max_outer: int = 200,
    tol: float = 1e-6,
    nu_init=None,
    noise: str = "variance",
    Omega=None,
    fix_nu: bool = False,
) -> FittedModel:
    """Alternate the closed-form ``Theta`` update and damped Newton steps in ``nu``.

    The Newton step works on the profiled objective ``l(Theta(nu), nu)``: its
    gradient is the partial gradient in ``nu`` and its Hessian adds
    ``C^T A^+ C`` for the ``Theta``-``nu`` coupling.  Iteration stops when the
    relative objective change and the relative change of ``nu`` both fall
    below ``tol``, or when no ascent direction is left.  When the GP
    amplitude ``nu1`` has collapsed toward zero, ``nu2`` drifts freely along a
    flat ridge, so only the objective change is checked (``boundary`` in the
    diagnostics).

    Parameters
    ----------
    data : RegressionData
    spec : QuadraticModelSpec
    predictor_basis : BasisSystem, optional
        Stored on the model for prediction from raw curves.
    Phi : ndarray, optional
        Predictor Gram matrix; computed from ``predictor_basis`` when omitted.
    max_outer : int
        Maximum number of outer iterations.
    tol : float
    nu_init : array_like, optional
        Starting ``(nu1, nu2, nu3)``; see :func:`initial_nu` for the default.
    noise : {'variance', 'sd'}
    Omega : ndarray, optional
        Precomputed penalty matrix for ``spec``.
    fix_nu : bool
        Keep ``nu`` at its starting value and only solve for ``Theta``.
    """
    if data.P != spec.P or data.M_y != spec.M_y:
        raise DimensionError("data covariates do not match the model spec")
    if Omega is None:
        Omega = build_penalty(spec)
    lam = spec.lam
    nu = initial_nu(data, lam, Omega, noise) if nu_init is None else np.asarray(nu_init, dtype=float)

    cache = {}

    def profile(nu_):
        key = np.asarray(nu_, dtype=float).tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _Profile(data, nu_, lam, Omega, noise)
        return cache[key]

    def objective(rho):
        try:
            return profile(np.exp(rho)).f
        except np.linalg.LinAlgError:
            return -np.inf

    cur = _Profile(data, nu, lam, Omega, noise)
    trace = [cur.f]
    nu_trace = [cur.nu.tolist()]
    converged = False
    status = "ok"
    it = 0
    if fix_nu:
        converged = True
        max_outer = 0
    for it in range(1, max_outer + 1):
        grad, H, C = nu_derivatives(cur.Theta, cur.nu, data, noise, cross=True)
        H_prof = H + cur.pinv_quad(C)
        g_rho, H_rho = to_log_scale(cur.nu, grad, H_prof)
        nu_new, status, _ = newton_nu_step(cur.nu, g_rho, H_rho, objective, f0=cur.f)
        if status == "failed":
            logger.warning("nu step failed after %d halvings at iteration %d", MAX_HALVINGS, it)
            break
        nxt = cur if status == "stationary" else profile(nu_new)
        rel = abs(nxt.f - cur.f) / max(abs(cur.f), 1.0)
        dnu = np.linalg.norm(nxt.nu - cur.nu) / np.linalg.norm(cur.nu)
        cur = nxt
        trace.append(cur.f)
        nu_trace.append(cur.nu.tolist())
        boundary = _at_boundary(cur.nu, noise)
        if status == "stationary" or (rel < tol and (dnu < tol or boundary)):
            converged = True
            break
    diagnostics = {
        "iterations": it,
        "objective": cur.f,
        "converged": converged,
        "trace": trace,
        "nu_trace": nu_trace,
        "last_step": status,
        "rank_deficient": cur.rank_deficient,
        "boundary": _at_boundary(cur.nu, noise),
    }
    if Phi is None and predictor_basis is not None:
        Phi = gram_matrix(predictor_basis)
    return FittedModel(cur.Theta, cur.nu, spec, predictor_basis, data.response_basis,
                       None if Phi is None else np.asarray(Phi), noise, diagnostics)


def fitted_values(model_or_theta, data: RegressionData):
    """Per-subject fitted means ``Psi_i Theta z_i``."""
    Theta = getattr(model_or_theta, "Theta", model_or_theta)
    Theta = _as_theta(Theta, data)
    return [Psi @ Theta @ z for Psi, z in zip(data.Psi, data.Z)]


def predict(model: FittedModel, w_new, times) -> np.ndarray:
    """Predicted response ``Psi(times) Theta z(w_new)``.

    ``w_new`` may be a coefficient vector or a ``FunctionalCurve``.
    """
    w = getattr(w_new, "coefficients", w_new)
    z = model.covariate(np.asarray(w, dtype=float))
    return model.response_basis.evaluate(times) @ model.Theta @ z
