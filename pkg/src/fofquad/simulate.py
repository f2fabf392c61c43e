"""Monte Carlo study comparing functional and multivariate regressions.

Each replication draws coefficient surfaces from Wishart matrices, predictor
curves from a Toeplitz-covariance normal, and response noise from the
Gaussian-process error model.  Estimators are scored by the average squared
error against the noiseless mean curves.

Random streams are derived from ``(seed, replication)`` so any cell of a study
can be rerun on its own and reproduce bit for bit.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits
from scipy import linalg, stats

from .basis import bspline_basis, difference_penalty, gaussian_rbf_basis, gram_matrix
from .design import QuadraticModelSpec, build_covariates, build_penalty, matricize_mode3
from .estimator import PINV_RCOND, RegressionData, fit
from .selection import CRITERIA, evaluate
from .smoothing import LongitudinalDataset, smooth_dataset

logger = logging.getLogger(__name__)

MLE_MODELS = ("F-INTER", "F-LIN", "INTER", "QUAD", "LIN")
DEFAULT_LAM_GRID = tuple(10.0 ** np.arange(-8, -1))


@dataclass
class SimConfig:
    """Settings for one simulation cell.

    ``nu`` is ``(nu1, nu2, nu3)`` with ``nu3`` the noise variance.  The
    predictor noise sd is ``predictor_noise`` times the sd of the noiseless
    predictor values of the replication.
    """

    n: int = 50
    n_t: int = 21
    M_x: int = 7
    M_y: int = 7
    nu: Tuple[float, float, float] = (0.1, 20.0, 0.3)
    predictor_noise: float = 0.1
    seed: int = 0
    replications: int = 100
    M_x_est: int = 7
    M_y_est: int = 6
    toeplitz_rho: float = 0.5
    wishart_df: int = 10
    domain: Tuple[float, float] = (0.0, 1.0)
    lam_grid: Tuple[float, ...] = DEFAULT_LAM_GRID
    max_outer: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        for name in ("n", "n_t", "M_x", "M_y", "replications", "M_x_est", "M_y_est"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        self.nu = tuple(float(v) for v in self.nu)
        self.domain = tuple(float(v) for v in self.domain)
        self.lam_grid = tuple(float(v) for v in self.lam_grid)
        if min(self.nu) < 0:
            raise ValueError("noise parameters must be nonnegative")


@dataclass
class SimDataset:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    x_true: np.ndarray
    w: np.ndarray
    B: np.ndarray
    Gamma: np.ndarray


def toeplitz_matrix(dim, rho):
    return linalg.toeplitz(rho ** np.arange(dim))


def replication_rng(seed, replication_index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replication_index)]))


def _psd_sqrt(C):
    evals, evecs = linalg.eigh(C)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def generate_dataset(cfg: SimConfig, replication_index: int = 0) -> SimDataset:
    """Draw one replication: true curves, noisy predictor and noisy response."""
    rng = replication_rng(cfg.seed, replication_index)
    lo, hi = cfg.domain
    t = np.linspace(lo, hi, cfg.n_t)
    phi_b = bspline_basis(cfg.M_x, cfg.domain)
    psi_b = bspline_basis(cfg.M_y, cfg.domain)
    Phi = gram_matrix(phi_b)
    scale = toeplitz_matrix(cfg.M_x, cfg.toeplitz_rho)

    def wishart():
        return stats.wishart.rvs(df=cfg.wishart_df, scale=scale, random_state=rng)

    # B takes its columns, in order, from as many M_x-dimensional Wishart draws as needed
    n_draws = -(-cfg.M_y // cfg.M_x)
    B = np.hstack([wishart() for _ in range(n_draws)])[:, : cfg.M_y]
    Gamma = np.stack([wishart() for _ in range(cfg.M_y)], axis=2)
    w = rng.multivariate_normal(np.zeros(cfg.M_x), toeplitz_matrix(cfg.M_x, cfg.toeplitz_rho), size=cfg.n)

    Theta = np.column_stack([np.zeros(cfg.M_y), B.T, matricize_mode3(Gamma)])
    Z = build_covariates(w, Phi, 2)
    g = Z @ Theta.T @ psi_b.evaluate(t).T
    x_true = w @ phi_b.evaluate(t).T

    nu1, nu2, nu3 = cfg.nu
    K = nu1 * np.exp(-0.5 * nu2 * (t[:, None] - t[None, :]) ** 2)
    tau = rng.standard_normal((cfg.n, cfg.n_t)) @ _psd_sqrt(K).T
    e = np.sqrt(nu3) * rng.standard_normal((cfg.n, cfg.n_t))
    y = g + tau + e

    x_sd = cfg.predictor_noise * float(np.std(x_true))
    x = x_true + x_sd * rng.standard_normal(x_true.shape)
    return SimDataset(t, x, y, g, x_true, w, B, Gamma)


def ase(g, y_hat) -> float:
    """Average squared error over subjects and time points."""
    g = np.asarray(g, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if g.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {y_hat.shape}")
    return float(np.mean((g - y_hat) ** 2))


# --- estimators -----------------------------------------------------------------


def multivariate_features(x, kind):
    """Regressors built from raw discrete predictor values, with an intercept column."""
    x = np.atleast_2d(x)
    parts = [np.ones((x.shape[0], 1)), x]
    if kind == "QUAD":
        parts.append(x**2)
    elif kind == "INTER":
        j, k = np.triu_indices(x.shape[1])
        parts.append(x[:, j] * x[:, k])
    elif kind != "LIN":
        raise ValueError(f"unknown multivariate model {kind!r}")
    return np.hstack(parts)


def fit_multivariate(kind, x, y):
    """Least squares per response time with the minimum-norm generalized inverse.

    With a common time grid and shared error covariance this coincides with
    the Gaussian maximum likelihood estimate.
    """
    F = multivariate_features(x, kind)
    coef = np.linalg.pinv(F, rcond=PINV_RCOND) @ y
    return F @ coef


class _FunctionalSetup:
    """Smoothed predictor and response design shared by all functional fits of one replication."""

    def __init__(self, cfg: SimConfig, data: SimDataset, roughness=None):
        self.cfg = cfg
        self.predictor_basis = gaussian_rbf_basis(cfg.M_x_est, cfg.domain)
        xs = LongitudinalDataset.from_arrays(data.t, data.x, cfg.domain, "x")
        self.W, self.roughness = smooth_dataset(xs, self.predictor_basis, roughness)
        self.Phi = gram_matrix(self.predictor_basis)
        self.response_basis = bspline_basis(cfg.M_y_est, cfg.domain)
        self.Omega_x = difference_penalty(cfg.M_x_est, 2).matrix
        self.Omega_y = difference_penalty(cfg.M_y_est, 2).matrix
        self.t = data.t
        self.y = data.y

    def regression_data(self, order):
        Z = build_covariates(self.W, self.Phi, order)
        return RegressionData(Z, [self.t] * len(Z), list(self.y), self.response_basis)

    def spec(self, order, lam=0.0):
        return QuadraticModelSpec(self.cfg.M_x_est, self.cfg.M_y_est, self.Omega_x, self.Omega_y, lam, order)

    def fit(self, order, lam=0.0, nu_init=None, Omega=None):
        rd = self.regression_data(order)
        model = fit(rd, self.spec(order, lam), predictor_basis=self.predictor_basis, Phi=self.Phi,
                    max_outer=self.cfg.max_outer, tol=self.cfg.tol, nu_init=nu_init, Omega=Omega)
        return model, rd

    def predictions(self, model, rd):
        return rd.Z @ model.Theta.T @ self.response_basis.evaluate(self.t).T


def fit_baseline(kind: str, data: SimDataset, cfg: SimConfig, setup=None) -> np.ndarray:
    """Maximum likelihood predictions ``(n, n_t)`` of one of the five competing models."""
    if kind in ("INTER", "QUAD", "LIN"):
        return fit_multivariate(kind, data.x, data.y)
    if kind not in ("F-INTER", "F-LIN"):
        raise ValueError(f"unknown model {kind!r}")
    setup = setup or _FunctionalSetup(cfg, data)
    model, rd = setup.fit(2 if kind == "F-INTER" else 1)
    return setup.predictions(model, rd)


def fit_penalized(data: SimDataset, cfg: SimConfig, criteria=CRITERIA, setup=None):
    """Penalized fits over ``cfg.lam_grid``; returns predictions chosen by each criterion.

    Returns
    -------
    dict
        criterion -> (predictions, selected lam)
    """
    setup = setup or _FunctionalSetup(cfg, data)
    rd = setup.regression_data(2)
    Omega = build_penalty(setup.spec(2))
    nu_prev = None
    scores = {c: [] for c in criteria}
    preds = []
    for lam in cfg.lam_grid:
        model = fit(rd, setup.spec(2, lam), predictor_basis=setup.predictor_basis, Phi=setup.Phi,
                    max_outer=cfg.max_outer, tol=cfg.tol, nu_init=nu_prev, Omega=Omega)
        nu_prev = model.nu
        report = evaluate(model, rd, Omega)
        for c in criteria:
            scores[c].append(report.values[c])
        preds.append(setup.predictions(model, rd))
    out = {}
    for c in criteria:
        s = np.asarray(scores[c], dtype=float)
        s = np.where(np.isfinite(s), s, np.inf)
        k = int(np.argmin(s))
        out[c] = (preds[k], cfg.lam_grid[k])
    return out


ALL_ESTIMATORS = tuple(f"MLE {m}" for m in MLE_MODELS) + tuple(f"PMLE {c}" for c in CRITERIA)


def run_replication(cfg: SimConfig, replication_index: int, estimators=ALL_ESTIMATORS) -> Dict[str, float]:
    """ASE of each requested estimator on one replication."""
    data = generate_dataset(cfg, replication_index)
    setup = None
    out = {}
    needs_functional = any(e in ("MLE F-INTER", "MLE F-LIN") or e.startswith("PMLE") for e in estimators)
    if needs_functional:
        setup = _FunctionalSetup(cfg, data)
    for est in estimators:
        if est.startswith("MLE "):
            out[est] = ase(data.g, fit_baseline(est[4:], data, cfg, setup))
    pmle = [e[5:] for e in estimators if e.startswith("PMLE ")]
    if pmle:
        chosen = fit_penalized(data, cfg, pmle, setup)
        for c in pmle:
            out[f"PMLE {c}"] = ase(data.g, chosen[c][0])
    return out


@dataclass
class SimResultTable:
    """Per-replication ASEs keyed by ``(estimator, n, nu3)``."""

    ases: Dict[Tuple[str, int, float], List[float]] = field(default_factory=dict)
    replications: int = 0
    failures: Dict[Tuple[str, int, float], int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def mean(self, key):
        a = np.asarray(self.ases[key], dtype=float)
        return float(np.nanmean(a)) if np.isfinite(a).any() else float("nan")

    def sd(self, key):
        a = np.asarray(self.ases[key], dtype=float)
        a = a[np.isfinite(a)]
        return float(np.std(a, ddof=1)) if a.size > 1 else float("nan")

    def quartiles(self, key):
        """Quartiles and Tukey whiskers (1.5 IQR, clipped to the data)."""
        a = np.asarray(self.ases[key], dtype=float)
        a = a[np.isfinite(a)]
        q1, q2, q3 = np.percentile(a, [25, 50, 75])
        iqr = q3 - q1
        lo = float(a[a >= q1 - 1.5 * iqr].min())
        hi = float(a[a <= q3 + 1.5 * iqr].max())
        return {"q1": float(q1), "median": float(q2), "q3": float(q3), "whisker_lo": lo, "whisker_hi": hi}


def run_study(
    cfg: SimConfig,
    ns: Sequence[int] = (50, 100, 200),
    nu3s: Sequence[float] = (0.3, 0.6),
    estimators: Sequence[str] = ALL_ESTIMATORS,
    threads: int = 1,
) -> SimResultTable:
    """Replicate every ``(n, nu3)`` cell ``cfg.replications`` times.

    A failing replication is recorded as NaN and counted in ``failures``.
    """
    table = SimResultTable(replications=cfg.replications,
                           metadata={"config": asdict(cfg), "ns": list(ns), "nu3s": list(nu3s)})
    for n in ns:
        for nu3 in nu3s:
            cell = SimConfig(**{**asdict(cfg), "n": n, "nu": (cfg.nu[0], cfg.nu[1], nu3)})

            def one(r, cell=cell):
                try:
                    return run_replication(cell, r, estimators)
                except Exception as exc:  # recorded, not fatal
                    logger.warning("replication %d (n=%d, nu3=%g) failed: %s", r, n, nu3, exc)
                    return None

            if threads > 1:
                # one BLAS thread per worker; nested BLAS pools oversubscribe badly
                with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=threads) as pool:
                    results = list(pool.map(one, range(cfg.replications)))
            else:
                results = [one(r) for r in range(cfg.replications)]
            for est in estimators:
                key = (est, n, nu3)
                vals = [np.nan if res is None else res.get(est, np.nan) for res in results]
                table.ases[key] = vals
                table.failures[key] = int(sum(not np.isfinite(v) for v in vals))
    return table


def write_tables(table: SimResultTable, out_dir, header_lines=()):
    """Write ``table1.csv`` (MLE), ``table2.csv`` (PMLE) and ``boxplots.csv``.

    Means and sds in the two tables are multiplied by 10.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(table.ases)
    for fname, prefix in (("table1.csv", "MLE "), ("table2.csv", "PMLE ")):
        with open(out_dir / fname, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            wr = csv.writer(fh)
            wr.writerow(["estimator", "n", "nu3", "mean_x10", "sd_x10", "replications", "missing"])
            for key in keys:
                est, n, nu3 = key
                if est.startswith(prefix):
                    wr.writerow([est[len(prefix):], n, nu3, _fmt(10 * table.mean(key)),
                                 _fmt(10 * table.sd(key)), len(table.ases[key]), table.failures.get(key, 0)])
    with open(out_dir / "boxplots.csv", "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh)
        wr.writerow(["estimator", "n", "nu3", "q1", "median", "q3", "whisker_lo", "whisker_hi"])
        for key in keys:
            if not np.isfinite(np.asarray(table.ases[key], dtype=float)).any():
                continue
            q = table.quartiles(key)
            wr.writerow([key[0], key[1], key[2]] + [_fmt(q[c]) for c in ("q1", "median", "q3", "whisker_lo", "whisker_hi")])


def _fmt(x):
    return repr(float(x))


def weather_fixture(seed: int = 2005, n: int = 76, n_t: int = 12):
    """Synthetic stand-in shaped like monthly station data: ``n`` subjects by ``n_t`` months.

    Returns ``(months, predictor, response)`` arrays of shapes ``(n_t,)``,
    ``(n, n_t)`` and ``(n, n_t)``; months are ``1..n_t``.
    """
    cfg = SimConfig(n=n, n_t=n_t, M_x=7, M_y=7, nu=(0.05, 20.0, 0.05), seed=seed, replications=1)
    d = generate_dataset(cfg, 0)
    months = np.arange(1, n_t + 1, dtype=float)
    # shift to temperature-like and log-precipitation-like levels
    seasonal = 10.0 - 8.0 * np.cos(2 * np.pi * (months - 1) / n_t)
    predictor = seasonal[None, :] + 3.0 * d.x
    response = 4.5 + 0.2 * d.y
    return months, predictor, response


def write_weather_fixture(out_dir, seed: int = 2005):
    """Write the fixture as ``weather_predictor.csv`` and ``weather_response.csv``."""
    from pathlib import Path

    from .io import write_long_csv

    out_dir = Path(out_dir)
    months, predictor, response = weather_fixture(seed)
    ids = [f"station{k + 1:02d}" for k in range(predictor.shape[0])]
    header = [f"generated by fofquad.simulate.weather_fixture(seed={seed})"]
    times = [months] * len(ids)
    write_long_csv(out_dir / "weather_predictor.csv", ids, times, predictor, header)
    write_long_csv(out_dir / "weather_response.csv", ids, times, response, header)
