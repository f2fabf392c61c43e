import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_problem
from fofquad.basis import bspline_basis, difference_penalty, gaussian_rbf_basis, gram_matrix
from fofquad.design import (
    QuadraticModelSpec,
    assemble_theta,
    build_covariates,
    build_penalty,
    eval_surfaces,
    split_theta,
    symmetrize_gamma,
    unvec,
    vec,
)
from fofquad.estimator import (
    FittedModel,
    RegressionData,
    fit,
    fitted_values,
    log_likelihood,
    newton_nu_step,
    newton_step,
    nu_derivatives,
    nu_gradient,
    nu_hessian,
    penalized_log_likelihood,
    penalty_value,
    predict,
    theta_score,
    update_theta,
)
from fofquad.errors import DomainError
from fofquad.gpcov import cov_matrix


def dense_loglik(Theta, nu, data):
    total = 0.0
    for t, y, Psi, z in zip(data.times, data.y, data.Psi, data.Z):
        S = cov_matrix(t, nu).Sigma
        r = y - Psi @ Theta @ z
        total += -0.5 * len(y) * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(S)[1] - 0.5 * r @ np.linalg.inv(S) @ r
    return total


def assert_ascent(model, tol=1e-8):
    tr = np.asarray(model.diagnostics["trace"])
    assert np.all(np.diff(tr) >= -tol * np.maximum(1.0, np.abs(tr[:-1])))


NU = np.array([0.5, 8.0, 0.2])


def test_loglik_standard_normal_at_mode():
    rb = bspline_basis(2, degree=1)
    data = RegressionData(np.zeros((1, 1)), [np.array([0.5])], [np.array([0.0])], rb)
    # Sigma = nu1 + nu3 = 1
    assert log_likelihood(np.zeros((2, 1)), (0.5, 1.0, 0.5), data) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)


def test_loglik_duplication_and_dense_oracle(rng):
    data, spec, Theta, *_ = make_problem(rng, irregular=True)
    ll = log_likelihood(Theta, NU, data)
    assert abs(ll - dense_loglik(Theta, NU, data)) < 1e-10
    doubled = RegressionData(np.vstack([data.Z, data.Z]), data.times * 2, data.y * 2, data.response_basis)
    assert log_likelihood(Theta, NU, doubled) == pytest.approx(2 * ll, rel=1e-13)


def test_penalized_loglik_composition(rng):
    data, spec, Theta, *_ = make_problem(rng)
    Om = build_penalty(spec)
    assert penalized_log_likelihood(Theta, NU, data, 0.0, Om) == log_likelihood(Theta, NU, data)
    zero = np.zeros_like(Theta)
    assert penalized_log_likelihood(zero, NU, data, 0.3, Om) == log_likelihood(zero, NU, data)
    lam = 0.05
    ref = log_likelihood(Theta, NU, data) - 0.5 * data.n * lam * (vec(Theta) @ Om @ vec(Theta))
    assert abs(penalized_log_likelihood(Theta, NU, data, lam, Om) - ref) < 1e-12 * max(1, abs(ref))


def test_update_theta_zero_response(rng):
    data, spec, *_ = make_problem(rng)
    data0 = RegressionData(data.Z, data.times, [np.zeros_like(y) for y in data.y], data.response_basis)
    theta, _ = update_theta(data0, NU, 0.0, build_penalty(spec))
    assert np.all(theta == 0)


def test_update_theta_matches_dense_normal_equations(rng):
    data, spec, *_ = make_problem(rng, n=8, M_x=2, M_y=3)
    Om = build_penalty(spec)
    lam = 0.01
    X = data.design_matrix()
    Sinv = np.linalg.inv(__import__("scipy").linalg.block_diag(*[cov_matrix(t, NU).Sigma for t in data.times]))
    A = X.T @ Sinv @ X + data.n * lam * Om
    ref = np.linalg.pinv(A, rcond=1e-12, hermitian=True) @ X.T @ Sinv @ data.y_stacked()
    theta, _ = update_theta(data, NU, lam, Om)
    np.testing.assert_allclose(theta, ref, atol=1e-8 * np.abs(ref).max())


def noiseless_problem(rng, n=50, M_x=4, M_y=4):
    pb, rb = gaussian_rbf_basis(M_x), bspline_basis(M_y)
    Phi = gram_matrix(pb)
    Z = build_covariates(rng.normal(size=(n, M_x)), Phi)
    a, B, G3 = split_theta(rng.normal(size=(M_y, Z.shape[1])), M_x)
    Theta0 = assemble_theta(a, B, symmetrize_gamma(G3, M_x))
    t = np.linspace(0, 1, 10)
    Psi = rb.evaluate(t)
    data = RegressionData(Z, [t] * n, [Psi @ Theta0 @ z for z in Z], rb)
    spec = QuadraticModelSpec(M_x, M_y, difference_penalty(M_x).matrix, difference_penalty(M_y).matrix, 0.0)
    return data, spec, Theta0, pb, Phi


def test_exact_recovery_symmetric_gamma():
    rng = np.random.default_rng(11)
    data, spec, Theta0, *_ = noiseless_problem(rng)
    theta, deficient = update_theta(data, NU, 0.0, build_penalty(spec))
    # antisymmetric Gamma directions lie in null(X), so the system is singular
    assert deficient
    assert np.abs(unvec(theta, Theta0.shape) - Theta0).max() < 1e-6


def test_ridge_limit_shrinks_penalized_components(rng):
    data, spec, *_ = make_problem(rng, M_x=3, M_y=4)
    Om = build_penalty(spec)
    theta, _ = update_theta(data, NU, 1e12, Om)
    evals, evecs = np.linalg.eigh(Om)
    rng_part = evecs[:, evals > 1e-8 * evals.max()].T @ theta
    assert np.abs(rng_part).max() < 1e-4


def test_gradient_zero_residual_reduction(rng):
    data, spec, Theta, *_ = make_problem(rng, noise_sd=0.0)
    g = nu_gradient(Theta, NU, data)
    ref = np.zeros(3)
    for t in data.times:
        b = cov_matrix(t, NU, derivatives=True)
        ref += [-0.5 * np.trace(np.linalg.solve(b.Sigma, D)) for D in b.d1]
    np.testing.assert_allclose(g, ref, rtol=1e-10)


def fd_gradient(f, x, h=1e-6):
    g = np.zeros(len(x))
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h * x[j]
        g[j] = (f(x + e) - f(x - e)) / (2 * e[j])
    return g


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_gradient_and_hessian_finite_differences(seed):
    rng = np.random.default_rng(seed)
    data, spec, Theta, *_ = make_problem(rng, n=4, n_i=5, irregular=True)
    Om = build_penalty(spec)
    nu = rng.uniform([0.2, 2.0, 0.1], [2.0, 20.0, 1.0])
    Th = Theta + 0.3 * rng.normal(size=Theta.shape)
    f = lambda v: penalized_log_likelihood(Th, v, data, 0.1, Om)
    g, H = nu_derivatives(Th, nu, data)
    fd = fd_gradient(f, nu)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-5
    Hfd = np.column_stack([_fd_col(lambda v: nu_gradient(Th, v, data), nu, k) for k in range(3)])
    assert np.abs(H - Hfd).max() / np.abs(Hfd).max() < 1e-5
    assert np.abs(H - H.T).max() < 1e-10 * max(1, np.abs(H).max())
    np.testing.assert_allclose(nu_hessian(Th, nu, data), H)


def _fd_col(grad, x, k, h=1e-6):
    e = np.zeros(len(x))
    e[k] = h * x[k]
    return (grad(x + e) - grad(x - e)) / (2 * e[k])


def test_cross_block_matches_fd(rng):
    data, spec, Theta, *_ = make_problem(rng, n=5, M_x=2, M_y=3)
    Om = build_penalty(spec)
    _, _, C = nu_derivatives(Theta, NU, data, cross=True)
    # C[:, j] = -d/dnu_j of the Theta score
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-6 * NU[j]
        fd = (theta_score(Theta, NU + e, data, 0.0, Om) - theta_score(Theta, NU - e, data, 0.0, Om)) / (2 * e[j])
        np.testing.assert_allclose(-C[:, j], fd, rtol=1e-5, atol=1e-7 * np.abs(fd).max())


def test_newton_step_examples():
    f = lambda x: -2.0 * (x[0] - 1.5) ** 2 + 3.0
    x, status, _ = newton_step(np.array([1.5]), np.array([0.0]), np.array([[-4.0]]), f)
    assert status == "stationary" and x[0] == 1.5
    x0 = np.array([-0.7])
    x, status, fx = newton_step(x0, np.array([-4.0 * (x0[0] - 1.5)]), np.array([[-4.0]]), f)
    assert status == "ok" and abs(x[0] - 1.5) < 1e-10 and fx == pytest.approx(3.0)
    nu, status, _ = newton_nu_step(np.array([1.0, 2.0, 3.0]), np.zeros(3), -np.eye(3), lambda r: 0.0)
    np.testing.assert_array_equal(nu, [1.0, 2.0, 3.0])


def test_newton_step_indefinite_still_ascends():
    f = lambda x: -(x[0] ** 2) + 0.1 * x[1] ** 2 - x[1] ** 4
    x0 = np.array([0.5, 0.05])
    g = np.array([-1.0, 0.2 * 0.05 - 4 * 0.05**3])
    H = np.diag([-2.0, 0.2 - 12 * 0.05**2])
    x, status, fx = newton_step(x0, g, H, f)
    assert status == "ok" and fx >= f(x0)


def test_newton_step_failure_status():
    # gradient points uphill but the objective only ever decreases
    x, status, _ = newton_step(np.array([0.0]), np.array([1.0]), np.array([[-1.0]]), lambda x: -abs(x[0]), f0=0.0)
    assert status == "failed" and x[0] == 0.0


def test_accepted_nu_step_never_decreases(rng):
    data, spec, Theta, *_ = make_problem(rng, n=8, n_i=6, irregular=True)
    Om = build_penalty(spec)
    nu = np.array([1.5, 3.0, 0.8])
    g, H = nu_derivatives(Theta, nu, data)
    from fofquad.estimator import to_log_scale

    gr, Hr = to_log_scale(nu, g, H)
    obj = lambda r: penalized_log_likelihood(Theta, np.exp(r), data, 0.0, Om)
    f0 = obj(np.log(nu))
    nu_new, status, f1 = newton_nu_step(nu, gr, Hr, obj, f0)
    assert status in ("ok", "stationary") and f1 >= f0


@pytest.mark.parametrize("seed", range(4))
def test_fit_ascent_and_stationarity(seed):
    rng = np.random.default_rng(100 + seed)
    data, spec, *_ = make_problem(rng, n=20, n_i=8, M_x=3, M_y=4, lam=1e-3, irregular=bool(seed % 2))
    model = fit(data, spec)
    assert model.converged
    assert_ascent(model)
    if model.diagnostics["boundary"]:
        # white-noise data: the GP amplitude collapses
        assert model.nu[0] < 1e-8 * model.nu[2]
    score = theta_score(model.Theta, model.nu, data, spec.lam, build_penalty(spec))
    X = data.design_matrix()
    scale = np.abs(X.T @ data.y_stacked()).max()
    assert np.abs(score).max() < 1e-6 * scale


def test_first_iteration_from_truth_never_decreases():
    rng = np.random.default_rng(21)
    data, spec, *_ = make_problem(rng, n=15, n_i=8, M_x=2, M_y=4)
    m = fit(data, spec, nu_init=np.array([0.01, 5.0, 0.09]), max_outer=1)
    tr = m.diagnostics["trace"]
    assert tr[1] >= tr[0]


def test_fix_nu_keeps_start(rng):
    data, spec, *_ = make_problem(rng)
    m = fit(data, spec, nu_init=NU, fix_nu=True)
    np.testing.assert_array_equal(m.nu, NU)
    theta, _ = update_theta(data, NU, 0.0, build_penalty(spec))
    np.testing.assert_allclose(vec(m.Theta), theta)


def gp_synthetic(rng, n=200, n_t=15, M_x=2, M_y=5, nu0=(0.2, 30.0, 0.05)):
    pb, rb = gaussian_rbf_basis(M_x), bspline_basis(M_y)
    Phi = gram_matrix(pb)
    Z = build_covariates(rng.normal(size=(n, M_x)), Phi)
    a, B, G3 = split_theta(rng.normal(size=(M_y, Z.shape[1])), M_x)
    Theta0 = assemble_theta(a, B, symmetrize_gamma(G3, M_x))
    t = np.linspace(0, 1, n_t)
    Psi = rb.evaluate(t)
    L = np.linalg.cholesky(cov_matrix(t, nu0).Sigma)
    g = [Psi @ Theta0 @ z for z in Z]
    y = [gi + L @ rng.normal(size=n_t) for gi in g]
    spec = QuadraticModelSpec(M_x, M_y, difference_penalty(M_x).matrix if M_x > 2 else np.zeros((M_x, M_x)),
                              difference_penalty(M_y).matrix, 0.0)
    return RegressionData(Z, [t] * n, y, rb), spec, np.array(g), pb, Phi


def test_synthetic_recovery_of_nu():
    rng = np.random.default_rng(7)
    nu0 = np.array([0.2, 30.0, 0.05])
    data, spec, g, pb, Phi = gp_synthetic(rng, nu0=tuple(nu0))
    m = fit(data, spec, predictor_basis=pb, Phi=Phi)
    assert m.converged
    assert_ascent(m)
    assert np.all(np.abs(m.nu - nu0) / nu0 < 0.2)
    ase = np.mean((np.array(fitted_values(m, data)) - g) ** 2)
    assert ase < nu0[0] + nu0[2]


def test_penalized_components_shrink_with_lambda(rng):
    data, spec, *_ = make_problem(rng, n=20, n_i=8, M_x=3, M_y=4)
    Om = build_penalty(spec)
    semi = []
    for lam in 10.0 ** np.arange(-4, 2):
        m = fit(data, spec.with_lam(lam), Omega=Om, nu_init=NU, fix_nu=True)
        semi.append(penalty_value(m.Theta, Om))
    assert np.all(np.diff(semi) < 0)


def test_predict_examples(rng):
    data, spec, Theta, pb, Phi = make_problem(rng, M_x=3, M_y=4)
    rb = data.response_basis
    zero = FittedModel(np.zeros_like(Theta), NU, spec, pb, rb, Phi)
    t = np.linspace(0, 1, 7)
    w = rng.normal(size=3)
    assert np.all(predict(zero, w, t) == 0)
    model = FittedModel(Theta, NU, spec, pb, rb, Phi)
    with pytest.raises(DomainError):
        predict(model, w, np.array([1.2]))

    # quadrature route through the surfaces
    s = np.linspace(0, 1, 2001)
    wts = np.full(s.size, s[1] - s[0])
    wts[[0, -1]] *= 0.5
    surf = eval_surfaces(Theta, pb, rb, s, t, s)
    x = pb.evaluate(s) @ w
    ref = surf["alpha"] + (wts * x) @ surf["beta"] + np.einsum("a,b,abc->c", wts * x, wts * x, surf["gamma"])
    # the Gram matrix uses Gauss-Legendre, the oracle the trapezoid rule
    np.testing.assert_allclose(predict(model, w, t), ref, atol=1e-6 * max(1, np.abs(ref).max()))


def test_linear_only_prediction_is_functional_linear(rng):
    data, spec, Theta, pb, Phi = make_problem(rng, M_x=3, M_y=4)
    T = Theta.copy()
    T[:, 4:] = 0.0
    lin_spec = QuadraticModelSpec(3, 4, spec.Omega_x, spec.Omega_y, 0.0, order=1)
    quad = FittedModel(T, NU, spec, pb, data.response_basis, Phi)
    lin = FittedModel(T[:, :4], NU, lin_spec, pb, data.response_basis, Phi)
    w = rng.normal(size=3)
    t = np.linspace(0, 1, 9)
    np.testing.assert_allclose(predict(quad, w, t), predict(lin, w, t), atol=1e-14)


def test_zeroed_gamma_fit_is_linear_model_fit(rng):
    data, spec, *_ = make_problem(rng, n=20, n_i=8, M_x=3, M_y=4, lam=1e-3)
    lin_spec = QuadraticModelSpec(3, 4, spec.Omega_x, spec.Omega_y, 1e-3, order=1)
    lin_data = RegressionData(data.Z[:, :4], data.times, data.y, data.response_basis)
    m_lin = fit(lin_data, lin_spec, nu_init=NU, fix_nu=True)
    # quadratic design with the Gamma covariates zeroed
    Zq = data.Z.copy()
    Zq[:, 4:] = 0.0
    m_q = fit(RegressionData(Zq, data.times, data.y, data.response_basis), spec, nu_init=NU, fix_nu=True)
    np.testing.assert_allclose(m_q.Theta[:, :4], m_lin.Theta, atol=1e-8)
    assert np.abs(m_q.Theta[:, 4:]).max() < 1e-10


def test_model_json_roundtrip(rng):
    import json

    data, spec, *_ = make_problem(rng, n=10, M_x=3, M_y=4, lam=1e-2)
    pb = gaussian_rbf_basis(3)
    m = fit(data, spec, predictor_basis=pb)
    m2 = FittedModel.from_dict(json.loads(json.dumps(m.to_dict())))
    np.testing.assert_array_equal(m2.Theta, m.Theta)
    np.testing.assert_array_equal(m2.nu, m.nu)
    w = np.ones(3)
    np.testing.assert_allclose(predict(m2, w, [0.3]), predict(m, w, [0.3]), rtol=1e-14)
