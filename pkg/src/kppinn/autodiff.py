"""Input jets and parameter gradients on top of JAX.

Input derivatives (first and pure second partials, optionally the full
Hessian) come from nested forward-mode ``jvp``; gradients with respect to
network weights and problem parameters come from reverse mode over the whole
loss, i.e. reverse-over-forward.  Quadratic forms whose matrix is a constant
black-box operator (the KP and Kronecker inverses) enter the graph through
:func:`quadratic_form_op`, whose backward pass is ``(M + M^T) y``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Scalar2Jet:
    """Value and input derivatives of a field at one or many points.

    Shapes, for ``m`` output heads (head axis dropped for scalar fields) and
    optional leading batch axes: ``value (..., m)``, ``grad (..., m, d)``,
    ``hess_diag (..., m, d)`` and, only when mixed partials were requested,
    ``hess (..., m, d, d)``.
    """

    value: jax.Array
    grad: jax.Array | None = None
    hess_diag: jax.Array | None = None
    hess: jax.Array | None = None

    def laplacian(self, axes=None):
        h = self.hess_diag
        if axes is not None:
            h = h[..., list(axes)]
        return jnp.sum(h, axis=-1)

    def head(self, k):
        """Jet of output head ``k`` of a vector-valued field."""
        pick = lambda a, trailing: None if a is None else a[(..., k) + (slice(None),) * trailing]
        return Scalar2Jet(pick(self.value, 0), pick(self.grad, 1), pick(self.hess_diag, 1), pick(self.hess, 2))


# a pytree so that batched jets can pass through vmap
jax.tree_util.register_dataclass(Scalar2Jet, data_fields=["value", "grad", "hess_diag", "hess"], meta_fields=[])


def point_jet(g, x, order: int = 2, mixed: bool = False) -> Scalar2Jet:
    """Jet of ``g: R^d -> R^m`` (or scalar) at a single point ``x``."""
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    x = jnp.asarray(x)
    value = g(x)
    if order == 0:
        return Scalar2Jet(value)
    eye = jnp.eye(x.shape[0], dtype=x.dtype)
    firsts, seconds = [], []
    for e in eye:
        if order == 1:
            firsts.append(jax.jvp(g, (x,), (e,))[1])
        else:
            d1 = lambda p, e=e: jax.jvp(g, (p,), (e,))[1]
            f, s = jax.jvp(d1, (x,), (e,))
            firsts.append(f)
            seconds.append(s)
    grad = jnp.stack(firsts, axis=-1)
    if order == 1:
        return Scalar2Jet(value, grad)
    hess_diag = jnp.stack(seconds, axis=-1)
    hess = jax.jacfwd(jax.jacfwd(g))(x) if mixed else None
    return Scalar2Jet(value, grad, hess_diag, hess)


def jet_eval(f, params, x, order: int = 2, mixed: bool = False) -> Scalar2Jet:
    """Jet of ``x -> f(params, x)`` at one point ``(d,)`` or a batch ``(N, d)``."""
    g = partial(f, params)
    x = jnp.asarray(x)
    if x.ndim == 1:
        return point_jet(g, x, order, mixed)
    return jax.vmap(lambda p: point_jet(g, p, order, mixed))(x)


def directional_derivative(h, x, counts):
    """Mixed partial ``D^alpha h(x)`` with ``alpha[i] = counts[i]``, by nested jvp."""
    x = jnp.asarray(x)
    eye = jnp.eye(x.shape[0], dtype=x.dtype)
    g = h
    for axis, k in enumerate(counts):
        for _ in range(int(k)):
            g = lambda p, g=g, e=eye[axis]: jax.jvp(g, (p,), (e,))[1]
    return g(x)


@jax.custom_jvp
def _abs_power(z, c):
    return jnp.abs(z) ** c


@_abs_power.defjvp
def _abs_power_jvp(primals, tangents):
    z, c = primals
    dz, _ = tangents
    out = jnp.abs(z) ** c
    # subgradient 0 at z = 0 (the derivative is singular there for c < 1)
    safe = jnp.where(z == 0, 1.0, jnp.abs(z))
    slope = jnp.where(z == 0, 0.0, c * jnp.sign(z) * safe ** (c - 1))
    return out, slope * dz


def abs_power(z, c):
    """``|z|**c`` with derivative ``c sign(z) |z|^(c-1)`` and 0 at the kink."""
    return _abs_power(z, jnp.asarray(c, dtype=jnp.result_type(float)))


def quadratic_form_op(apply, apply_transpose, n: int):
    """Differentiable ``y -> y^T M y`` for a constant linear operator ``M``.

    ``apply(y)`` and ``apply_transpose(y)`` are host (NumPy) callables; they
    run through :func:`jax.pure_callback` so the form can sit inside jitted
    losses.  The gradient is ``(M + M^T) y``.
    """
    out_spec = jax.ShapeDtypeStruct((n,), jnp.float64)

    def _mv(y):
        return jax.pure_callback(lambda v: np.asarray(apply(np.asarray(v)), dtype=np.float64), out_spec, y)

    def _mtv(y):
        return jax.pure_callback(
            lambda v: np.asarray(apply_transpose(np.asarray(v)), dtype=np.float64), out_spec, y
        )

    @jax.custom_vjp
    def q(y):
        return jnp.dot(y, _mv(y))

    def fwd(y):
        my = _mv(y)
        return jnp.dot(y, my), (y, my)

    def bwd(res, g):
        y, my = res
        return (g * (my + _mtv(y)),)

    q.defvjp(fwd, bwd)
    return q


@dataclass(frozen=True)
class ParamGradient:
    """Gradient split into network weights and trainable problem parameters."""

    network: np.ndarray
    problem: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.network, self.problem])


def param_grad(loss, params, theta=None):
    """Reverse-mode gradient of ``loss(params, theta)``.

    Returns ``(value, ParamGradient)``.  Raises :class:`NonFiniteLossError`
    when the loss is NaN or infinite.
    """
    params = jnp.asarray(params)
    theta = jnp.zeros((0,)) if theta is None else jnp.asarray(theta)
    value, (gp, gt) = jax.value_and_grad(loss, argnums=(0, 1))(params, theta)
    value = float(value)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss is not finite ({value})")
    return value, ParamGradient(np.asarray(gp), np.asarray(gt))
