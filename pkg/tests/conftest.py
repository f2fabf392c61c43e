import numpy as np
import pytest

from fofquad.basis import bspline_basis, difference_penalty, gaussian_rbf_basis, gram_matrix
from fofquad.design import QuadraticModelSpec, build_covariates
from fofquad.estimator import RegressionData


def make_problem(rng, n=6, n_i=5, M_x=3, M_y=3, lam=0.0, order=2, irregular=False, noise_sd=0.3):
    """Small random regression problem with a known Theta."""
    pb = gaussian_rbf_basis(M_x)
    rb = bspline_basis(M_y) if M_y >= 4 else bspline_basis(M_y, degree=M_y - 1)
    Phi = gram_matrix(pb)
    W = rng.normal(size=(n, M_x))
    Z = build_covariates(W, Phi, order)
    P = Z.shape[1]
    Theta = rng.normal(size=(M_y, P))
    times, ys = [], []
    for i in range(n):
        if irregular:
            t = np.sort(rng.uniform(0, 1, size=n_i))
        else:
            t = np.linspace(0, 1, n_i)
        y = rb.evaluate(t) @ Theta @ Z[i] + noise_sd * rng.normal(size=n_i)
        times.append(t)
        ys.append(y)
    data = RegressionData(Z, times, ys, rb)
    spec = QuadraticModelSpec(M_x, M_y, difference_penalty(M_x).matrix if M_x > 2 else np.zeros((M_x, M_x)),
                              difference_penalty(M_y).matrix if M_y > 2 else np.zeros((M_y, M_y)), lam, order)
    return data, spec, Theta, pb, Phi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
