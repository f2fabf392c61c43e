"""Turn longitudinal observations into basis coefficient vectors."""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .basis import BasisSystem, difference_penalty
from .errors import DimensionError, DomainError, EmptyDatasetError, RankError

DEFAULT_ROUGHNESS_GRID = np.logspace(-8, 2, 21)


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Per-subject irregular observations ``(times_i, values_i)`` of one variable.

    Parameters
    ----------
    times, values : list of ndarray
        One pair per subject; times strictly increasing, ``n_i >= 2``.
    domain : tuple of float
    name : str
    ids : list of str, optional
        Subject identifiers, in order.
    """

    times: List[np.ndarray]
    values: List[np.ndarray]
    domain: Tuple[float, float]
    name: str = "value"
    ids: Optional[List[str]] = None

    def __post_init__(self):
        if len(self.times) == 0:
            raise EmptyDatasetError(f"dataset {self.name!r} has no subjects")
        if len(self.times) != len(self.values):
            raise DimensionError("times and values must list the same subjects")
        lo, hi = self.domain
        for i, (t, v) in enumerate(zip(self.times, self.values)):
            if len(t) != len(v):
                raise DimensionError(f"subject {i}: {len(t)} times but {len(v)} values")
            if len(t) < 2:
                raise DimensionError(f"subject {i}: need at least 2 observations")
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"subject {i}: times must be strictly increasing")
            if t[0] < lo - 1e-9 or t[-1] > hi + 1e-9:
                raise DomainError(f"subject {i}: times outside [{lo}, {hi}]")
        if self.ids is None:
            object.__setattr__(self, "ids", [str(i) for i in range(len(self.times))])

    @property
    def n(self) -> int:
        return len(self.times)

    @classmethod
    def from_arrays(cls, times, values, domain=None, name="value"):
        """Build from a shared time grid and an ``(n, n_t)`` value array."""
        times = np.asarray(times, dtype=float)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if domain is None:
            domain = (float(times[0]), float(times[-1]))
        return cls([times.copy() for _ in values], [v.copy() for v in values], tuple(domain), name)


@dataclass(frozen=True, eq=False)
class FunctionalCurve:
    coefficients: np.ndarray
    basis: BasisSystem

    def __post_init__(self):
        w = np.asarray(self.coefficients, dtype=float)
        if w.shape != (self.basis.M,):
            raise DimensionError(f"expected {self.basis.M} coefficients, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("curve coefficients must be finite")
        object.__setattr__(self, "coefficients", w)

    def __call__(self, t):
        return self.basis.evaluate(t) @ self.coefficients


def _normal_system(times, basis, roughness, order):
    Bm = basis.evaluate(times)
    A = Bm.T @ Bm
    if roughness > 0:
        A = A + roughness * difference_penalty(basis.M, order).matrix
    return Bm, A


def smooth_curve(
    times: Sequence[float],
    values: Sequence[float],
    basis: BasisSystem,
    roughness: float = 0.0,
    order: int = 2,
) -> FunctionalCurve:
    """Penalized least-squares fit of one subject's observations.

    Solves ``(B^T B + roughness * D^T D) w = B^T values`` with ``B[j, k] = phi_k(t_j)``.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise DimensionError("times and values must have equal length")
    if roughness < 0:
        raise ValueError("roughness must be nonnegative")
    Bm, A = _normal_system(times, basis, roughness, order)
    if roughness == 0 and np.linalg.matrix_rank(Bm) < basis.M:
        raise RankError(
            f"{len(times)} observations do not determine {basis.M} coefficients; "
            "use a positive roughness"
        )
    try:
        w = linalg.solve(A, Bm.T @ values, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise RankError("smoothing normal equations are singular; use a positive roughness") from exc
    return FunctionalCurve(w, basis)


def eval_curve(c: FunctionalCurve, t: float) -> float:
    return float(c.basis.evaluate(np.array([t], dtype=float))[0] @ c.coefficients)


def _smoother(times, basis, roughness, order):
    Bm, A = _normal_system(times, basis, roughness, order)
    # least-squares pseudo-solution keeps the GCV scan defined at tiny roughness
    return Bm, linalg.pinvh(A) @ Bm.T


def smoothing_gcv(data: LongitudinalDataset, basis: BasisSystem, roughness: float, order: int = 2):
    """Pooled GCV score of one roughness value applied to every subject."""
    rss = 0.0
    df = 0.0
    N = 0
    for t, v in zip(data.times, data.values):
        Bm, H = _smoother(t, basis, roughness, order)
        fitted = Bm @ (H @ v)
        rss += float(np.sum((v - fitted) ** 2))
        df += float(np.trace(Bm @ H))
        N += len(t)
    if df >= N:
        return np.inf
    return (rss / N) / (1.0 - df / N) ** 2


def choose_roughness(data, basis, grid=None, order=2) -> float:
    grid = DEFAULT_ROUGHNESS_GRID if grid is None else np.asarray(grid, dtype=float)
    scores = [smoothing_gcv(data, basis, lam, order) for lam in grid]
    return float(grid[int(np.argmin(scores))])


def smooth_dataset(
    data: LongitudinalDataset,
    basis: BasisSystem,
    roughness: Optional[float] = None,
    order: int = 2,
):
    """Smooth every subject; returns the ``(n, M)`` coefficient matrix and the roughness used.

    When ``roughness`` is None it is picked by pooled GCV over a log-spaced grid.
    """
    if roughness is None:
        roughness = choose_roughness(data, basis, order=order)
    W = np.vstack(
        [smooth_curve(t, v, basis, roughness, order).coefficients for t, v in zip(data.times, data.values)]
    )
    return W, roughness
