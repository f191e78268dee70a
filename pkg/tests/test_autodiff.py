"""Input jets and parameter gradients."""

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kppinn.autodiff import (
    NonFiniteLossError,
    abs_power,
    directional_derivative,
    jet_eval,
    param_grad,
    point_jet,
    quadratic_form_op,
)
from kppinn.kernel_core import Grid1D, MaternParams
from kppinn.kernel_packet import apply_inverse, build_factor, quadratic_form
from kppinn.losses import LossKind, make_loss
from kppinn.network import MLPConfig, apply_mlp, init
from kppinn.residuals import make_problem


def central_grad(f, x, h):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_polynomial_jet():
    f = lambda x: x[0] ** 2 + 3 * x[1]
    jet = point_jet(f, jnp.array([1.0, 2.0]))
    assert float(jet.value) == 7.0
    np.testing.assert_array_equal(jet.grad, [2.0, 3.0])
    np.testing.assert_array_equal(jet.hess_diag, [2.0, 0.0])


def test_single_neuron_gradient():
    w, b = np.array([0.3, -1.2, 0.7]), 0.1
    f = lambda x: jnp.tanh(jnp.dot(w, x) + b)
    x = np.array([0.2, 0.5, -0.4])
    fd = central_grad(lambda z: float(f(z)), x, 1e-5)
    np.testing.assert_allclose(point_jet(f, jnp.asarray(x), order=1).grad, fd, rtol=1e-6)


def test_mlp_jets_match_finite_differences():
    cfg = MLPConfig(2, (20, 20), 1, seed=3)
    flat = jnp.asarray(init(cfg).values)
    f = lambda x: apply_mlp(cfg, flat, x)[0]
    pts = np.random.default_rng(0).uniform(-1, 1, (20, 2))
    jet = jet_eval(lambda p, x: apply_mlp(cfg, p, x)[0], flat, jnp.asarray(pts))
    h = 1e-4
    for k, x in enumerate(pts):
        g = central_grad(lambda z: float(f(z)), x, 1e-6)
        np.testing.assert_allclose(jet.grad[k], g, rtol=1e-4, atol=1e-9)
        f0 = float(f(x))
        d2 = [(float(f(x + h * e)) - 2 * f0 + float(f(x - h * e))) / h**2 for e in np.eye(2)]
        np.testing.assert_allclose(jet.hess_diag[k], d2, rtol=1e-4, atol=1e-6)


def test_order_one_is_restriction_of_order_two():
    cfg = MLPConfig(3, (8,), 2, seed=1)
    flat = jnp.asarray(init(cfg).values)
    g = lambda x: apply_mlp(cfg, flat, x)
    x = jnp.array([0.1, -0.3, 0.5])
    j1, j2 = point_jet(g, x, 1), point_jet(g, x, 2)
    np.testing.assert_array_equal(j1.value, j2.value)
    np.testing.assert_array_equal(j1.grad, j2.grad)


def test_diagonal_matches_mixed_hessian():
    cfg = MLPConfig(3, (8, 8), 1, seed=2)
    flat = jnp.asarray(init(cfg).values)
    g = lambda x: apply_mlp(cfg, flat, x)[0]
    jet = point_jet(g, jnp.array([0.2, 0.4, -0.1]), 2, mixed=True)
    np.testing.assert_allclose(jnp.diagonal(jet.hess), jet.hess_diag, rtol=1e-12)


def test_directional_derivative_mixed():
    f = lambda x: x[0] ** 3 * x[1] ** 2
    x = jnp.array([1.5, -2.0])
    assert float(directional_derivative(f, x, (2, 1))) == pytest.approx(6 * 1.5 * 2 * -2.0)
    assert float(directional_derivative(f, x, (0, 0))) == pytest.approx(1.5**3 * 4)


def test_abs_power_subgradient():
    d = jax.grad(lambda z: abs_power(z, 0.5))
    assert float(d(0.0)) == 0.0
    assert float(d(4.0)) == pytest.approx(0.25)
    assert float(d(-4.0)) == pytest.approx(-0.25)


def test_half_norm_gradient_is_params():
    p = np.random.default_rng(0).standard_normal(12)
    val, g = param_grad(lambda w, th: 0.5 * jnp.sum(w * w), p)
    assert val == pytest.approx(0.5 * p @ p)
    np.testing.assert_allclose(g.network, p, rtol=1e-15)
    assert g.problem.size == 0


def test_non_finite_loss_raises():
    with pytest.raises(NonFiniteLossError):
        param_grad(lambda w, th: jnp.log(w[0]), np.array([-1.0]))


def test_quadratic_form_gradient_linear_map():
    g = Grid1D.uniform(0, 5, 14)
    f = build_factor(g, MaternParams(1.5, 1.0))
    q = quadratic_form_op(lambda v: apply_inverse(f, v), lambda v: apply_inverse(f, v, transpose=True), 14)
    M = np.random.default_rng(1).standard_normal((14, 6))
    loss = lambda w, th: q(jnp.asarray(M) @ w)
    w0 = np.random.default_rng(2).standard_normal(6)
    val, grad = param_grad(loss, w0)
    assert val == pytest.approx(quadratic_form(f, M @ w0), rel=1e-12)
    fd = central_grad(lambda w: quadratic_form(f, M @ w), w0, 1e-6)
    np.testing.assert_allclose(grad.network, fd, rtol=1e-5)


def test_quadratic_form_op_under_jit():
    g = Grid1D.uniform(0, 3, 9)
    f = build_factor(g, MaternParams(0.5, 1.0))
    q = quadratic_form_op(lambda v: apply_inverse(f, v), lambda v: apply_inverse(f, v, transpose=True), 9)
    y = np.linspace(-1, 1, 9)
    assert float(jax.jit(q)(jnp.asarray(y))) == pytest.approx(quadratic_form(f, y), rel=1e-13)


def test_helmholtz_kp_loss_gradient_six_by_six():
    pb = make_problem("helmholtz", n_interior=(6, 6), n_boundary=24, n_test=(5, 5))
    cfg = MLPConfig(2, (6, 6), 1, seed=4)
    loss = make_loss(pb, cfg, LossKind.kp(0.5))
    theta = jnp.asarray(pb.theta_true)
    w0 = init(cfg).values
    _, grad = param_grad(lambda w, th: loss(w, theta), w0)
    idx = np.random.default_rng(5).choice(w0.size, 10, replace=False)
    for i in idx:
        e = np.zeros_like(w0)
        e[i] = 1e-4
        fd = (float(loss(w0 + e, theta)) - float(loss(w0 - e, theta))) / 2e-4
        assert grad.network[i] == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_gradient_is_deterministic():
    pb = make_problem("stiff", n_interior=8, n_test=10)
    cfg = MLPConfig(1, (5,), 1)
    loss = make_loss(pb, cfg, LossKind.kp(1.5), "inverse")
    w0 = init(cfg).values
    _, g1 = param_grad(loss, w0, np.array([0.0]))
    _, g2 = param_grad(loss, w0, np.array([0.0]))
    assert np.array_equal(g1.flat, g2.flat)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_jet_of_separable_function(a, b):
    f = lambda x: jnp.sin(x[0]) * jnp.exp(0.5 * x[1])
    jet = point_jet(f, jnp.array([a, b]))
    np.testing.assert_allclose(jet.grad, [np.cos(a) * np.exp(0.5 * b), 0.5 * np.sin(a) * np.exp(0.5 * b)], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(jet.hess_diag, [-np.sin(a) * np.exp(0.5 * b), 0.25 * np.sin(a) * np.exp(0.5 * b)], rtol=1e-12, atol=1e-14)
