import numpy as np
import pytest

from conftest import fd_gradient
from gkhyper.covariance import MaternKernel, RegularGrid, matern_eval
from gkhyper.gengk import gengk_bidiag, truncate_factorization
from gkhyper.marginal import (
    HyperParams,
    Hyperprior,
    MarginalModel,
    gradient_gengk,
    hyperprior_neglog,
    objective_exact,
    objective_gengk,
    objective_svd,
)
from gkhyper.operators import DenseOperator, ZeroOperator, dense_matrix
from gkhyper.problems import build_heat_problem


def make_dense_model(rng, m=8, n=8, hyperprior=Hyperprior("flat"), grid=True):
    A = DenseOperator(rng.standard_normal((m, n)) / np.sqrt(max(m, n)))
    d = rng.standard_normal(m)
    geometry = RegularGrid((n,), (1.0 / n,)) if grid else rng.uniform(0, 1, (n, 2))
    return MarginalModel(forward=A, data=d, geometry=geometry, nu=1.5,
                         hyperprior=hyperprior)


def reference_z(model, theta):
    # independent dense assembly of Z = A Q A' + theta1 I from the kernel
    # definition (point-set geometry only)
    a = dense_matrix(model.forward)
    pts = np.atleast_2d(model.geometry)
    n = pts.shape[0]
    kernel = MaternKernel(model.nu, theta.prior_std**2, theta.corr_length)
    q = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            q[i, j] = matern_eval(kernel, np.linalg.norm(pts[i] - pts[j]))
    return a @ q @ a.T + theta.noise_var * np.eye(model.nrows), a


def test_zero_operator_closed_form(rng):
    d = rng.standard_normal(7)
    model = MarginalModel(forward=ZeroOperator(7, 7), data=d,
                          geometry=RegularGrid((7,), (1 / 7,)))
    theta = HyperParams(np.array([1.0, 0.9, 0.2]))
    ev = objective_exact(model, theta)
    # Z = I so the log determinant vanishes and F = ||d||^2 / 2
    assert np.isclose(ev.value, 0.5 * d @ d, rtol=1e-14)
    assert ev.logdet_term == 0.0


def test_term_split_identity(rng):
    model = make_dense_model(rng, hyperprior=Hyperprior("gamma", 1e-4))
    theta = HyperParams(np.array([0.2, 1.1, 0.4]))
    for ev in (objective_exact(model, theta), objective_gengk(model, theta, 8)):
        assert ev.value == ev.neglogprior_term + ev.logdet_term + ev.quad_term


def test_dense_gradient_matches_finite_differences(rng):
    model = make_dense_model(rng)
    theta = HyperParams(np.array([0.1, 1.0, 0.5]))
    ev = objective_exact(model, theta)
    fd = fd_gradient(lambda t: objective_exact(model, HyperParams(t)).value,
                     theta.values)
    assert np.all(np.abs(ev.gradient - fd) <= 1e-5 * np.abs(fd))


def test_theta1_gradient_decomposition(rng):
    # <Z^{-1}, dZ/dtheta1>_F = tr(Z^{-1}) when R = theta1 I; the full first
    # component is then tr(Z^{-1})/2 - ||Z^{-1} r||^2 / 2 for a flat prior
    model = make_dense_model(rng, grid=False)
    theta = HyperParams(np.array([0.3, 0.8, 0.25]))
    z, a = reference_z(model, theta)
    z_inv = np.linalg.inv(z)
    w = z_inv @ (a @ np.zeros(model.ncols) - model.data)
    expected = 0.5 * np.trace(z_inv) - 0.5 * w @ w
    ev = objective_exact(model, theta)
    assert np.isclose(ev.gradient[0], expected, rtol=1e-10)


def test_zero_operator_gengk_equals_exact(rng):
    d = rng.standard_normal(6)
    model = MarginalModel(forward=ZeroOperator(6, 6), data=d,
                          geometry=RegularGrid((6,), (1 / 6,)))
    theta = HyperParams(np.array([0.7, 1.2, 0.3]))
    ex = objective_exact(model, theta)
    gk = objective_gengk(model, theta, 4)
    m, t1 = 6, 0.7
    assert np.isclose(gk.value, 0.5 * m * np.log(t1) + 0.5 * (d @ d) / t1, rtol=1e-14)
    assert np.isclose(gk.value, ex.value, rtol=1e-14)
    assert np.allclose(gk.gradient, ex.gradient, rtol=1e-12, atol=1e-14)
    assert gk.k_used == 0


def test_full_rank_exactness_square(rng):
    model = make_dense_model(rng, m=16, n=16)
    theta = HyperParams(np.array([0.3, 1.0, 0.2]))
    ex = objective_exact(model, theta)
    gk = objective_gengk(model, theta, 16)
    assert abs(gk.value - ex.value) <= 1e-8 * abs(ex.value)
    assert np.all(np.abs(gk.gradient - ex.gradient) <= 1e-8 * np.abs(ex.gradient))


def test_full_rank_exactness_heat48():
    prob = build_heat_problem(n=48, noise_level=0.02, seed=2)
    model = MarginalModel(forward=prob.forward, data=prob.data,
                          geometry=prob.geometry)
    theta = HyperParams(np.array([1e-4, 0.5, 0.08]))
    ex = objective_exact(model, theta)
    gk = objective_gengk(model, theta, 48)
    assert abs(gk.value - ex.value) <= 1e-8 * abs(ex.value)
    assert np.linalg.norm(gk.gradient - ex.gradient) <= 1e-8 * np.linalg.norm(ex.gradient)


def test_heat_k22_accuracy_order():
    # at a representative point the k=22 approximation error sits far below
    # the objective scale (the motivating accuracy regime)
    prob = build_heat_problem(n=256, noise_level=0.02, seed=0)
    model = MarginalModel(forward=prob.forward, data=prob.data,
                          geometry=prob.geometry)
    theta = HyperParams(np.array([7.7e-6, 0.45, 0.185]))
    ex = objective_exact(model, theta)
    gk = objective_gengk(model, theta, 22)
    rel = abs(gk.value - ex.value) / abs(ex.value)
    assert rel < 1e-3
    assert gk.k_used == 22


def test_monotone_logdet_term():
    prob = build_heat_problem(n=64, noise_level=0.02, seed=1)
    model = MarginalModel(forward=prob.forward, data=prob.data,
                          geometry=prob.geometry)
    theta = HyperParams(np.array([1e-5, 0.4, 0.08]))
    noise = model.noise_cov(theta)
    fact = gengk_bidiag(model.forward, noise, model.prior_cov(theta), None,
                        model.data, 40)
    values = [
        objective_gengk(model, theta, k, fact=truncate_factorization(fact, k)).logdet_term
        for k in range(1, fact.k + 1)
    ]
    assert np.all(np.diff(values) >= -1e-10)


def test_k_beyond_breakdown_is_recorded(rng):
    m, n, r = 10, 9, 3
    A = DenseOperator(rng.standard_normal((m, r)) @ rng.standard_normal((r, n)))
    model = MarginalModel(forward=A, data=A.apply(rng.standard_normal(n)),
                          geometry=rng.uniform(0, 1, (n, 2)))
    theta = HyperParams(np.array([0.5, 1.0, 0.3]))
    gk = objective_gengk(model, theta, 9)
    assert gk.k_used < 9


def test_dense_cap_guard(rng):
    model = make_dense_model(rng)
    model.dense_cap = 4
    theta = HyperParams(np.array([0.5, 1.0, 0.3]))
    with pytest.raises(ValueError, match="dense cap"):
        objective_exact(model, theta)
    with pytest.raises(ValueError, match="dense cap"):
        objective_svd(model, theta, 3)


def test_gradient_gengk_standalone(rng):
    model = make_dense_model(rng, m=12, n=12)
    theta = HyperParams(np.array([0.4, 1.0, 0.3]))
    noise = model.noise_cov(theta)
    fact = gengk_bidiag(model.forward, noise, model.prior_cov(theta), None,
                        model.data, 12)
    grad = gradient_gengk(model, theta, fact)
    assert np.allclose(grad, objective_exact(model, theta).gradient, rtol=1e-8)


# --- truncated-SVD variant


def test_svd_full_rank_identity(rng):
    model = make_dense_model(rng, m=12, n=12)
    theta = HyperParams(np.array([0.2, 1.0, 0.3]))
    ex = objective_exact(model, theta)
    sv = objective_svd(model, theta, 12)
    assert abs(sv.value - ex.value) <= 1e-9 * abs(ex.value)


def test_svd_zero_operator(rng):
    d = rng.standard_normal(5)
    model = MarginalModel(forward=ZeroOperator(5, 5), data=d,
                          geometry=RegularGrid((5,), (0.2,)))
    theta = HyperParams(np.array([0.9, 1.0, 0.3]))
    ex = objective_exact(model, theta)
    sv = objective_svd(model, theta, 0)
    assert np.isclose(sv.value, ex.value, rtol=1e-12)


def test_svd_bound_holds_on_heat64():
    prob = build_heat_problem(n=64, noise_level=0.02, seed=0)
    model = MarginalModel(forward=prob.forward, data=prob.data,
                          geometry=prob.geometry)
    theta = HyperParams(np.array([1e-5, 0.4, 0.08]))
    ex = objective_exact(model, theta)

    # independent singular-value oracle for the whitened operator
    a = dense_matrix(model.forward)
    q = dense_matrix(model.prior_cov(theta))
    evals, evecs = np.linalg.eigh(q)
    q_half = (evecs * np.sqrt(np.clip(evals, 0, None))) @ evecs.T
    s = np.linalg.svd(a @ q_half / np.sqrt(theta.noise_var), compute_uv=False)
    beta1 = np.linalg.norm(model.data) / np.sqrt(theta.noise_var)

    for k in range(1, 64):
        sv = objective_svd(model, theta, k)
        sk2 = s[k] ** 2 if k < s.size else 0.0
        bound = 0.5 * np.sum(np.log1p(s[k:] ** 2)) + 0.5 * beta1**2 * sk2 / (1 + sk2)
        assert abs(ex.value - sv.value) <= bound + 1e-8


# --- hyperpriors


def test_flat_hyperprior():
    value, grad = hyperprior_neglog(Hyperprior("flat"),
                                    HyperParams(np.array([2.0, 3.0, 4.0])))
    assert value == 0.0
    assert np.array_equal(grad, np.zeros(3))


def test_gamma_hyperprior_values():
    value, grad = hyperprior_neglog(Hyperprior("gamma", 1e-4),
                                    HyperParams(np.array([1.0, 1.0, 1.0])))
    assert np.isclose(value, 3e-4, rtol=1e-15)
    assert np.allclose(grad, 1e-4 * np.ones(3))


def test_gamma_hyperprior_gradient_matches_fd():
    prior = Hyperprior("gamma", 1e-4)
    theta = np.array([0.5, 2.0, 0.1])
    fd = fd_gradient(lambda t: prior.neglog(t)[0], theta, step_rel=1e-4)
    assert np.allclose(prior.neglog(theta)[1], fd, rtol=1e-6)


def test_hyperprior_validation():
    with pytest.raises(ValueError):
        Hyperprior("jeffreys")
    with pytest.raises(ValueError):
        Hyperprior("gamma", -1.0)


def test_hyperparams_validation():
    with pytest.raises(ValueError, match="positive"):
        HyperParams(np.array([1.0, -2.0, 1.0]))
    with pytest.raises(ValueError, match="positive"):
        HyperParams(np.array([0.0, 1.0, 1.0]))
    theta = HyperParams(np.array([1e-6, 0.5, 0.1]))
    assert theta.noise_var == 1e-6
    assert theta.prior_std == 0.5
    assert theta.corr_length == 0.1
