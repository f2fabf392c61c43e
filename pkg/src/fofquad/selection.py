"""Model evaluation and tuning-parameter selection.

Effective degrees of freedom are the trace of the smoother
``S = X (X^T S^-1 X + n lam Omega)^+ X^T S^-1``, computed as
``tr((G + n lam Omega)^+ G)`` with ``G = X^T S^-1 X`` so ``S`` is never formed.

GIC and GBIC use the curvature matrix ``R`` (negative Hessian of the
penalized log-likelihood over ``(vec Theta, nu)``, divided by ``n``) and the
score outer-product matrix ``Q``.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg

from .basis import bspline_basis, difference_penalty
from .design import QuadraticModelSpec, build_covariates, build_penalty, vec
from .errors import FofquadError, UndefinedCriterionError
from .estimator import (
    PINV_RCOND,
    RegressionData,
    _group_states,
    _loglik_from_states,
    _residual_matrix,
    SymmetricSystem,
    fit,
    normal_equations,
    nu_derivatives,
    sym_pinv,
)

logger = logging.getLogger(__name__)

CRITERIA = ("GCV", "mAIC", "GIC", "GBIC")
N_NU = 3
EIG_RCOND = 1e-10


@dataclass
class CriterionReport:
    df: float
    values: Dict[str, float]
    lam: float
    M_y: int
    converged: bool = True
    loglik: float = float("nan")

    def row(self) -> dict:
        out = {"M_y": self.M_y, "lam": self.lam, "df": self.df}
        out.update({c: self.values.get(c, float("nan")) for c in CRITERIA})
        out["converged"] = self.converged
        return out


class _Evaluation:
    """Quantities shared by all criteria for one fitted model."""

    def __init__(self, model, data: RegressionData, Omega=None):
        self.model = model
        self.data = data
        self.lam = model.spec.lam
        self.Omega = build_penalty(model.spec) if Omega is None else Omega
        self.states = _group_states(data, model.nu, model.noise)
        self.G, _ = normal_equations(data, self.states)
        self.A = self.G + data.n * self.lam * self.Omega if self.lam else self.G
        self.loglik = _loglik_from_states(data, model.Theta, self.states)
        self.rss = sum(float(np.sum(_residual_matrix(data, model.Theta, st.idx) ** 2))
                       for st in self.states)


def hat_trace(G, A, rcond=PINV_RCOND) -> float:
    """``tr(A^+ G)`` using the same truncated, equilibrated inverse as the coefficient solve."""
    return SymmetricSystem(A, rcond).trace_with(G)


def effective_df(model, data: RegressionData, Omega=None) -> float:
    ev = _Evaluation(model, data, Omega)
    return hat_trace(ev.G, ev.A)


def gcv_value(rss, df, N) -> float:
    """``(rss / N) / (1 - (df + 3) / N)^2``; ``N`` counts all observations."""
    if df + N_NU >= N:
        raise UndefinedCriterionError(f"GCV undefined: df + 3 = {df + N_NU:.3f} >= N = {N}")
    return (rss / N) / (1.0 - (df + N_NU) / N) ** 2


def maic_value(loglik, df) -> float:
    return -2.0 * loglik + 2.0 * (df + N_NU)


def gcv(model, data, Omega=None) -> float:
    ev = _Evaluation(model, data, Omega)
    return gcv_value(ev.rss, hat_trace(ev.G, ev.A), data.N)


def maic(model, data, Omega=None) -> float:
    ev = _Evaluation(model, data, Omega)
    return maic_value(ev.loglik, hat_trace(ev.G, ev.A))


def _subject_terms(ev: _Evaluation):
    """Per-subject scores ``X_i^T alpha_i`` and ``d loglik_i / d nu``, and the cross block of R."""
    data, model = ev.data, ev.model
    P, M_y = data.P, data.M_y
    k = P * M_y
    S_theta = np.zeros((data.n, k))
    U_nu = np.zeros((data.n, N_NU))
    cross = np.zeros((k, N_NU))
    for st in _group_states(data, model.nu, model.noise, derivatives=True):
        Zg = data.Z[st.idx]
        R = _residual_matrix(data, model.Theta, st.idx)
        Al = st.cov.solve(R.T)
        Ut = st.Psi.T @ Al
        S_theta[st.idx] = (Zg[:, :, None] * Ut.T[:, None, :]).reshape(len(st.idx), k)
        Sinv = st.cov.inv()
        for j, Dj in enumerate(st.cov.d1):
            DAl = Dj @ Al
            U_nu[st.idx, j] = 0.5 * np.sum(Al * DAl, axis=0) - 0.5 * np.sum(Sinv * Dj)
            cross[:, j] += vec(st.SiPsi.T @ DAl @ Zg)
    return S_theta, U_nu, cross


def curvature_matrices(model, data, Omega=None, q_form="subject"):
    """``(R, Q)`` at the fitted parameters.

    ``q_form='subject'`` sums per-subject score outer products; ``'pooled'``
    uses the outer product of the summed scores.
    """
    ev = model if isinstance(model, _Evaluation) else _Evaluation(model, data, Omega)
    data, model = ev.data, ev.model
    n = data.n
    S_theta, U_nu, cross = _subject_terms(ev)
    _, H_nu = nu_derivatives(model.Theta, model.nu, data, model.noise)
    k = S_theta.shape[1]
    R = np.zeros((k + N_NU, k + N_NU))
    R[:k, :k] = ev.A
    R[:k, k:] = cross
    R[k:, :k] = cross.T
    R[k:, k:] = -H_nu
    R /= n
    pen = ev.lam * (ev.Omega @ vec(model.Theta)) if ev.lam else np.zeros(k)
    rows = np.hstack([S_theta - pen[None, :], U_nu])
    cols = np.hstack([S_theta, U_nu])
    if q_form == "subject":
        Q = rows.T @ cols / n
    elif q_form == "pooled":
        Q = np.outer(rows.sum(axis=0), cols.sum(axis=0)) / n
    else:
        raise ValueError("q_form must be 'subject' or 'pooled'")
    return R, Q


def gic_penalty(R, Q, rcond=EIG_RCOND) -> float:
    """``2 tr(R^-1 Q)``; a pseudo-inverse is used if ``R`` is singular."""
    Rinv, deficient = sym_pinv(0.5 * (R + R.T), rcond)
    if deficient:
        logger.info("R is singular; GIC uses its pseudo-inverse")
    return 2.0 * float(np.sum(Rinv * Q.T))


def _log_pdet(A, rcond=EIG_RCOND):
    evals = linalg.eigvalsh(0.5 * (A + A.T))
    keep = np.abs(evals) > rcond * np.abs(evals).max()
    return float(np.sum(np.log(np.abs(evals[keep])))), int(np.sum(evals > rcond * np.abs(evals).max()))


def gic(model, data, Omega=None, q_form="subject") -> float:
    ev = _Evaluation(model, data, Omega)
    R, Q = curvature_matrices(ev, data, q_form=q_form)
    return -2.0 * ev.loglik + gic_penalty(R, Q)


def gbic_value(ev: _Evaluation, R) -> float:
    lam = ev.lam
    if lam <= 0:
        raise UndefinedCriterionError("GBIC needs lam > 0 (it contains log(lam)); use a positive lam grid")
    n = ev.data.n
    eta = ev.Omega.shape[0]
    log_omega, zeta = _log_pdet(ev.Omega)
    log_R, _ = _log_pdet(R)
    v = vec(ev.model.Theta)
    return (
        -2.0 * ev.loglik
        + n * lam * float(v @ ev.Omega @ v)
        - (eta - zeta) * np.log(lam)
        + zeta * np.log(n)
        + log_R
        - log_omega
        - zeta * np.log(2.0 * np.pi)
    )


def gbic(model, data, Omega=None) -> float:
    ev = _Evaluation(model, data, Omega)
    R, _ = curvature_matrices(ev, data)
    return gbic_value(ev, R)


def evaluate(model, data: RegressionData, Omega=None, q_form="subject") -> CriterionReport:
    """All four criteria for one fit; undefined criteria are reported as NaN."""
    ev = _Evaluation(model, data, Omega)
    df = hat_trace(ev.G, ev.A)
    values = {"mAIC": maic_value(ev.loglik, df)}
    try:
        values["GCV"] = gcv_value(ev.rss, df, data.N)
    except UndefinedCriterionError:
        values["GCV"] = float("nan")
    R, Q = curvature_matrices(ev, data, q_form=q_form)
    values["GIC"] = -2.0 * ev.loglik + gic_penalty(R, Q)
    try:
        values["GBIC"] = gbic_value(ev, R)
    except UndefinedCriterionError:
        values["GBIC"] = float("nan")
    return CriterionReport(df, values, ev.lam, data.M_y, model.converged, ev.loglik)


@dataclass
class SelectionResult:
    best: object
    table: List[CriterionReport]
    best_index: int
    criterion: str
    models: list = field(default_factory=list, repr=False)


def select(
    W,
    Phi,
    response_times,
    response_values,
    domain,
    lam_grid: Sequence[float],
    M_y_grid: Sequence[int],
    criterion: str = "GIC",
    order: int = 2,
    penalty_order: int = 2,
    predictor_basis=None,
    noise: str = "variance",
    q_form: str = "subject",
    keep_models: bool = False,
    **fit_kwargs,
) -> SelectionResult:
    """Fit every ``(M_y, lam)`` grid point and return the criterion minimizer.

    ``nu`` is warm-started along the ``lam`` grid within each ``M_y``.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    lam_grid = list(lam_grid)
    M_y_grid = list(M_y_grid)
    if not lam_grid or not M_y_grid:
        raise ValueError("selection grids must be non-empty")
    W = np.atleast_2d(W)
    M_x = W.shape[1]
    Omega_x = difference_penalty(M_x, penalty_order).matrix
    Z = build_covariates(W, Phi, order)
    nu_start = fit_kwargs.pop("nu_init", None)
    table, models = [], []
    best, best_score, best_index = None, np.inf, -1
    for M_y in M_y_grid:
        rb = bspline_basis(M_y, domain)
        data = RegressionData(Z, list(response_times), list(response_values), rb)
        Omega_y = difference_penalty(M_y, penalty_order).matrix
        base = QuadraticModelSpec(M_x, M_y, Omega_x, Omega_y, 0.0, order)
        Omega = build_penalty(base)
        nu_prev = nu_start
        for lam in lam_grid:
            spec = base.with_lam(lam)
            try:
                model = fit(data, spec, predictor_basis=predictor_basis, Phi=Phi, nu_init=nu_prev,
                            noise=noise, Omega=Omega, **fit_kwargs)
                report = evaluate(model, data, Omega, q_form)
            except (FofquadError, np.linalg.LinAlgError) as exc:
                logger.warning("grid point M_y=%d lam=%g failed: %s", M_y, lam, exc)
                table.append(CriterionReport(float("nan"), {c: float("nan") for c in CRITERIA},
                                             lam, M_y, False))
                models.append(None)
                continue
            nu_prev = model.nu
            table.append(report)
            models.append(model if keep_models else None)
            score = report.values[criterion]
            if np.isfinite(score) and score < best_score:
                best, best_score, best_index = model, score, len(table) - 1
    if best is None:
        raise FofquadError(f"every grid point failed or left {criterion} undefined")
    return SelectionResult(best, table, best_index, criterion, models)
