"""Basis systems over a closed interval: B-splines and Gaussian radial basis functions.

A :class:`BasisSystem` evaluates a vector of ``M`` functions at arbitrary
points, and provides the Gram matrix ``int phi(s) phi(s)^T ds`` and a
difference roughness penalty on the coefficient sequence.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline

from .errors import DimensionError, DomainError

DOMAIN_TOL = 1e-9
_GL_NODES = 4


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """Family of ``M`` basis functions on ``[lo, hi]``.

    Parameters
    ----------
    kind : {'bspline', 'gaussian_rbf'}
    M : int
        Number of basis functions.
    domain : tuple of float
        Closed interval ``(lo, hi)``.
    knots_or_centers : ndarray
        Interior knots (bspline) or kernel centers (gaussian_rbf), ascending.
    degree_or_width : int or float
        Spline degree, or kernel width ``sigma`` in ``exp(-(t-c)^2 / (2 sigma^2))``.
    """

    kind: str
    M: int
    domain: Tuple[float, float]
    knots_or_centers: np.ndarray
    degree_or_width: float
    _knot_vector: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        object.__setattr__(self, "domain", (lo, hi))
        if self.kind not in ("bspline", "gaussian_rbf"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.M < 2:
            raise DimensionError("a basis system needs M >= 2 functions")
        if not lo < hi:
            raise DomainError(f"empty domain [{lo}, {hi}]")
        kc = np.asarray(self.knots_or_centers, dtype=float).copy()
        if kc.size and (np.any(np.diff(kc) < 0) or kc[0] < lo or kc[-1] > hi):
            raise DomainError("knots/centers must be ascending and inside the domain")
        kc.setflags(write=False)
        object.__setattr__(self, "knots_or_centers", kc)
        if self.kind == "bspline":
            degree = int(self.degree_or_width)
            if degree != self.degree_or_width or degree < 0:
                raise ValueError("B-spline degree must be a nonnegative integer")
            if kc.size + degree + 1 != self.M:
                raise DimensionError(
                    f"{kc.size} interior knots + degree {degree} + 1 != M={self.M}"
                )
            object.__setattr__(self, "degree_or_width", degree)
            # uniform extension past the ends (P-spline layout): linear coefficient
            # sequences then give exactly linear curves
            inner = np.r_[lo, kc, hi]
            h_lo, h_hi = inner[1] - inner[0], inner[-1] - inner[-2]
            ext = np.arange(1, degree + 1)
            knots = np.r_[lo - h_lo * ext[::-1], inner, hi + h_hi * ext]
            knots.setflags(write=False)
            object.__setattr__(self, "_knot_vector", knots)
        else:
            if kc.size != self.M:
                raise DimensionError("gaussian_rbf needs exactly M centers")
            if not self.degree_or_width > 0:
                raise ValueError("kernel width must be positive")
            object.__setattr__(self, "degree_or_width", float(self.degree_or_width))

    @property
    def breakpoints(self) -> np.ndarray:
        """Points where the basis may lose smoothness (panel boundaries for quadrature)."""
        lo, hi = self.domain
        if self.kind == "bspline":
            return np.unique(np.r_[lo, self.knots_or_centers, hi])
        return np.array([lo, hi])

    def _check_domain(self, t):
        lo, hi = self.domain
        if np.any(~np.isfinite(t)) or np.any(t < lo - DOMAIN_TOL) or np.any(t > hi + DOMAIN_TOL):
            raise DomainError(f"evaluation points outside the domain [{lo}, {hi}]")
        return np.clip(t, lo, hi)

    def evaluate(self, t) -> np.ndarray:
        """Evaluate all basis functions at the points ``t``; returns ``(len(t), M)``."""
        t = self._check_domain(np.atleast_1d(np.asarray(t, dtype=float)))
        if self.kind == "bspline":
            return BSpline.design_matrix(t, self._knot_vector, self.degree_or_width).toarray()
        d = t[:, None] - self.knots_or_centers[None, :]
        return np.exp(-0.5 * (d / self.degree_or_width) ** 2)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "M": int(self.M),
            "domain": [self.domain[0], self.domain[1]],
            "degree_or_width": self.degree_or_width,
        }

    @classmethod
    def from_dict(cls, config: dict) -> "BasisSystem":
        """Inverse of :meth:`to_dict`; knots and centers are rebuilt equally spaced."""
        unknown = set(config) - {"kind", "M", "domain", "degree_or_width"}
        if unknown:
            raise ValueError(f"unknown basis keys: {sorted(unknown)}")
        kind = config.get("kind", "bspline")
        domain = tuple(config.get("domain", (0.0, 1.0)))
        if kind == "bspline":
            return bspline_basis(config["M"], domain, int(config.get("degree_or_width", 3)))
        return gaussian_rbf_basis(config["M"], domain, config.get("degree_or_width"))


def bspline_basis(M: int, domain: Sequence[float] = (0.0, 1.0), degree: int = 3) -> BasisSystem:
    """B-spline basis with equally spaced interior knots."""
    lo, hi = float(domain[0]), float(domain[1])
    n_interior = M - degree - 1
    if n_interior < 0:
        raise DimensionError(f"M={M} too small for degree {degree}")
    interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return BasisSystem("bspline", M, (lo, hi), interior, degree)


def gaussian_rbf_basis(
    M: int, domain: Sequence[float] = (0.0, 1.0), width: Optional[float] = None
) -> BasisSystem:
    """Gaussian RBF basis with equally spaced centers.

    The default width makes adjacent kernels cross at height 1/2.
    """
    lo, hi = float(domain[0]), float(domain[1])
    centers = np.linspace(lo, hi, M)
    if width is None:
        spacing = centers[1] - centers[0]
        width = spacing / np.sqrt(8.0 * np.log(2.0))
    return BasisSystem("gaussian_rbf", M, (lo, hi), centers, float(width))


def eval_basis(b: BasisSystem, t: float) -> np.ndarray:
    """Length-``M`` vector of basis values at a single point."""
    return b.evaluate(np.array([t], dtype=float))[0]


def quadrature_rule(b: BasisSystem, quadrature_points: Optional[int] = None):
    """Composite Gauss-Legendre nodes and weights over the basis domain.

    Panels never straddle a B-spline knot, so piecewise polynomials up to
    degree 7 per panel integrate exactly.  The default is ``8 M`` points for
    B-splines and ``32 M`` for Gaussian RBFs.
    """
    if quadrature_points is None:
        # RBFs have no knots to align with, so they get a finer default
        quadrature_points = (8 if b.kind == "bspline" else 32) * b.M
    if quadrature_points < 2 * b.M:
        raise ValueError("quadrature_points must be at least 2*M")
    bp = b.breakpoints
    spans = len(bp) - 1
    per_span = max(1, int(np.ceil(quadrature_points / (_GL_NODES * spans))))
    edges = np.concatenate(
        [np.linspace(bp[j], bp[j + 1], per_span + 1)[:-1] for j in range(spans)] + [bp[-1:]]
    )
    x, w = np.polynomial.legendre.leggauss(_GL_NODES)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def gram_matrix(b: BasisSystem, quadrature_points: Optional[int] = None) -> np.ndarray:
    """Gram matrix ``int phi(s) phi(s)^T ds`` by composite quadrature."""
    nodes, weights = quadrature_rule(b, quadrature_points)
    F = b.evaluate(nodes)
    G = (F * weights[:, None]).T @ F
    return 0.5 * (G + G.T)


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    order: int
    matrix: np.ndarray


def difference_matrix(M: int, order: int = 2) -> np.ndarray:
    """The ``(M - order) x M`` finite-difference operator."""
    if M <= order:
        raise DimensionError(f"difference penalty of order {order} needs M > {order}, got {M}")
    return np.diff(np.eye(M), order, axis=0)


def difference_penalty(M: int, order: int = 2) -> PenaltyMatrix:
    """Roughness penalty ``D^T D`` on a length-``M`` coefficient sequence."""
    D = difference_matrix(M, order)
    P = D.T @ D
    P.setflags(write=False)
    return PenaltyMatrix(order, P)
