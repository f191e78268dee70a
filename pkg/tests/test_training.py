"""Adam and the training loop."""

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kppinn.autodiff import param_grad
from kppinn.losses import LossKind, make_loss
from kppinn.network import MLPConfig, init
from kppinn.residuals import make_problem
from kppinn.training import AdamState, NonFiniteGradientError, TrainConfig, adam_step, train

STIFF = dict(n_interior=16, n_test=50)


def test_zero_gradient_keeps_params():
    s = AdamState.zeros_like(np.arange(4.0))
    for _ in range(5):
        s = adam_step(s, np.zeros(4))
    np.testing.assert_array_equal(s.x, np.arange(4.0))
    assert s.t == 5


@given(st.lists(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-6), min_size=1, max_size=6))
def test_first_step(g):
    g = np.array(g)
    s = adam_step(AdamState.zeros_like(np.zeros_like(g)), g, lr=0.01)
    np.testing.assert_allclose(s.x, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_constant_gradient_limit():
    g = np.array([2.0, -0.5, 1e-3])
    s = AdamState.zeros_like(np.zeros(3))
    for _ in range(10_000):
        s = adam_step(s, g, lr=1e-3)
    # with a constant gradient every step moves by lr * sign(g)
    np.testing.assert_allclose(s.x, -10.0 * np.sign(g), rtol=1e-4)


def test_non_finite_gradient_raises():
    with pytest.raises(NonFiniteGradientError):
        adam_step(AdamState.zeros_like(np.zeros(2)), np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros_like(np.zeros(2)), np.zeros(3))


def test_config_validation():
    for bad in (dict(n_iter=0), dict(lr=0.0), dict(beta1=1.0), dict(mode="both"), dict(log_every=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_single_iteration_matches_manual_step():
    pb = make_problem("stiff", **STIFF)
    net = MLPConfig(1, (6,), 1, seed=0)
    cfg = TrainConfig(n_iter=1, lr=1e-2, loss=LossKind.l2())
    tr = train(pb, net, cfg)
    w0 = init(net).values
    loss = make_loss(pb, net, LossKind.l2())
    val, g = param_grad(lambda w, th: loss(w, jnp.asarray(pb.theta_true)), w0)
    expected = adam_step(AdamState.zeros_like(w0), g.network, lr=1e-2).x
    np.testing.assert_allclose(tr.params.values, expected, rtol=1e-12, atol=1e-15)
    assert tr.losses == [pytest.approx(val, rel=1e-12)]
    assert tr.steps == 1


def test_reproducible():
    pb = make_problem("stiff", **STIFF)
    net = MLPConfig(1, (8, 8), 1)
    cfg = TrainConfig(n_iter=30, loss=LossKind.kp(1.5), mode="inverse", seed=4)
    a, b = train(pb, net, cfg), train(pb, net, cfg)
    assert np.array_equal(a.params.values, b.params.values)
    assert np.array_equal(a.theta, b.theta)
    assert a.losses == b.losses


def test_factors_built_once():
    pb = make_problem("helmholtz", n_interior=(8, 8), n_boundary=20, n_test=(3, 3))
    tr = train(pb, MLPConfig(2, (6,), 1), TrainConfig(n_iter=5, loss=LossKind.kp(0.5)))
    # one factor per axis: two for the interior, one per edge
    assert tr.factor_builds == 6
    tr2 = train(pb, MLPConfig(2, (6,), 1), TrainConfig(n_iter=15, loss=LossKind.kp(0.5)))
    assert tr2.factor_builds == tr.factor_builds


def test_training_reduces_loss():
    pb = make_problem("stiff", **STIFF)
    tr = train(pb, MLPConfig(1, (16, 16), 1), TrainConfig(n_iter=300, lr=1e-2, loss=LossKind.kp(0.5), log_every=50))
    assert tr.losses[-1] < 0.2 * tr.losses[0]
    assert tr.iterations[0] == 0 and tr.iterations[-1] == 299


def test_theta_gradient_matches_finite_differences():
    pb = make_problem("stiff", **STIFF)
    net = MLPConfig(1, (8,), 1, seed=2)
    w = init(net).values
    for kind in (LossKind.l2(), LossKind.kp(0.5), LossKind.kp(2.5)):
        loss = make_loss(pb, net, kind, "inverse")
        th = np.array([-0.7])
        _, g = param_grad(loss, w, th)
        h = 1e-5
        fd = (float(loss(w, th + h)) - float(loss(w, th - h))) / (2 * h)
        assert g.problem[0] == pytest.approx(fd, rel=1e-4)


def test_forward_mode_keeps_theta_fixed():
    pb = make_problem("stiff", **STIFF)
    tr = train(pb, MLPConfig(1, (4,), 1), TrainConfig(n_iter=3, loss=LossKind.l2()))
    np.testing.assert_array_equal(tr.theta, pb.theta_true)


def test_divergence_is_reported():
    pb = make_problem("stiff", **STIFF)
    net = MLPConfig(1, (4,), 1)
    bad = np.full(net.n_params, 1e200)
    tr = train(pb, net, TrainConfig(n_iter=5, loss=LossKind.l2()), params=bad)
    assert tr.status == "diverged" and "iteration 0" in tr.message


def test_patience_and_floor():
    pb = make_problem("stiff", **STIFF)
    net = MLPConfig(1, (4,), 1)
    tr = train(pb, net, TrainConfig(n_iter=50, loss=LossKind.l2(), loss_floor=1e30))
    assert tr.status == "converged" and tr.steps == 1
    tr = train(pb, net, TrainConfig(n_iter=50, lr=1e-12, loss=LossKind.l2(), patience=3))
    assert tr.status == "converged" and tr.steps < 50


def test_rows_format():
    pb = make_problem("stiff", **STIFF)
    tr = train(pb, MLPConfig(1, (4,), 1), TrainConfig(n_iter=3, loss=LossKind.l2(), mode="inverse", log_every=1))
    rows = tr.rows()
    assert [r[0] for r in rows] == [0, 1, 2]
    assert float(rows[0][2]) == 0.0
