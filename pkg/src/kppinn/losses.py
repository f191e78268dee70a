"""Loss functionals over residual batches.

Four variants share one assembly path:

* ``l2``: per component, the mean of squared residuals;
* ``rkhs_kp``: raw quadratic forms ``y^T K^{-1} y`` per segment with ``K^{-1}``
  applied through kernel-packet (Kronecker) factors;
* ``rkhs_dense``: the same forms through a dense Cholesky factor;
* ``sobolev``: mean over points of the sum of squared mixed derivatives
  ``D^alpha h`` with every ``alpha_i <= order`` along the segment's free axes,
  taken by local polynomial differentiation of the residual samples.

Boundary contributions are multiplied by ``boundary_weight`` in every variant;
interior and data terms carry weight one.  Segments that are not tensor grids
(single points, scattered observations) use the mean of squares in every
variant, which for a single point equals the RKHS form with ``K = [1]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from .autodiff import quadratic_form_op
from .kernel_core import MaternParams, tensor_kernel_matrix
from .kernel_packet import _cholesky
from .network import MLPConfig, apply_mlp
from .residuals import ProblemSpec, ResidualBatch, ResidualVector
from .tensor_algebra import build_tensor_factor, tensor_apply_inverse

VARIANTS = ("l2", "rkhs_dense", "rkhs_kp", "sobolev")


class DenseCapError(ValueError):
    pass


@dataclass(frozen=True)
class LossKind:
    variant: str
    matern: MaternParams | None = None
    order: int | None = None
    boundary_weight: float = 1.0
    dense_cap: int = 4096

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant.startswith("rkhs") and not isinstance(self.matern, MaternParams):
            raise ValueError("RKHS losses need MaternParams")
        if self.variant == "sobolev" and self.order not in (0, 1, 2):
            raise ValueError(f"Sobolev order must be 0, 1 or 2, got {self.order}")
        if not self.boundary_weight >= 0:
            raise ValueError("boundary_weight must be >= 0")

    @classmethod
    def l2(cls, boundary_weight=1.0):
        return cls("l2", boundary_weight=boundary_weight)

    @classmethod
    def kp(cls, nu=0.5, ell=1.0, boundary_weight=1.0):
        return cls("rkhs_kp", MaternParams(nu, ell), boundary_weight=boundary_weight)

    @classmethod
    def dense(cls, nu=0.5, ell=1.0, boundary_weight=1.0, dense_cap=4096):
        return cls("rkhs_dense", MaternParams(nu, ell), boundary_weight=boundary_weight, dense_cap=dense_cap)

    @classmethod
    def sobolev(cls, order=1, boundary_weight=1.0):
        return cls("sobolev", order=order, boundary_weight=boundary_weight)

    @property
    def nu_or_order(self):
        if self.matern is not None:
            return self.matern.nu
        return self.order

    @property
    def label(self) -> str:
        names = {"l2": "L2", "rkhs_dense": "RKHS", "rkhs_kp": "KP", "sobolev": "Sobolev"}
        if self.variant == "l2":
            return "L2"
        return f"{names[self.variant]} nu={self.nu_or_order:g}"


def _weight(role, kind_or_weight):
    w = kind_or_weight.boundary_weight if isinstance(kind_or_weight, LossKind) else kind_or_weight
    return w if role == "boundary" else 1.0


def _mean_square(values):
    return jnp.mean(values * values)


def l2_loss(batch: ResidualBatch, boundary_weight=1.0):
    """Sum over ``(role, component)`` of the mean squared residual."""
    total = 0.0
    for (role, _), items in batch.groups().items():
        y = jnp.concatenate([r.values for r in items])
        total = total + _weight(role, boundary_weight) * _mean_square(y)
    return total


# --------------------------------------------------------------------------
# quadratic-form operators


def kp_operator(segment, matern: MaternParams):
    """Differentiable ``y -> y^T K^{-1} y`` on a tensor segment via KP factors."""
    tf = build_tensor_factor(segment.grid, matern, fallback=True)
    return quadratic_form_op(
        lambda v: tensor_apply_inverse(tf, v),
        lambda v: tensor_apply_inverse(tf, v, transpose=True),
        segment.n,
    )


def dense_operator(segment, matern: MaternParams, cap=4096):
    """Same form through a dense Cholesky factor of the materialized kernel."""
    if segment.n > cap:
        raise DenseCapError(f"segment {segment.name!r} has {segment.n} points, above the dense cap {cap}")
    L = jnp.asarray(_cholesky(tensor_kernel_matrix(matern, segment.grid)))

    def q(y):
        z = solve_triangular(L, y, lower=True)
        return jnp.dot(z, z)

    return q


def build_operators(problem: ProblemSpec, kind: LossKind, mode="forward") -> dict:
    """One quadratic-form operator per tensor segment used by ``mode``.

    Built once per run; the returned callables close over constant factors.
    """
    if not kind.variant.startswith("rkhs"):
        return {}
    ops = {}
    for term in problem.terms(mode):
        seg = term.segment
        if seg.name in ops or not seg.is_tensor:
            continue
        if kind.variant == "rkhs_kp":
            ops[seg.name] = kp_operator(seg, kind.matern)
        else:
            ops[seg.name] = dense_operator(seg, kind.matern, kind.dense_cap)
    return ops


def _rkhs(batch: ResidualBatch, kind: LossKind, ops: dict):
    total = 0.0
    for r in batch.residuals:
        seg = r.term.segment
        if seg.is_tensor:
            if seg.name not in ops:
                raise KeyError(f"no factor for segment {seg.name!r}")
            if r.values.shape != (seg.n,):
                raise ValueError(f"segment {seg.name!r}: factor size {seg.n}, residual shape {r.values.shape}")
            val = ops[seg.name](r.values)
        else:
            val = _mean_square(r.values)
        total = total + _weight(r.role, kind) * val
    return total


def rkhs_kp_loss(batch: ResidualBatch, kind: LossKind, ops: dict):
    """Sum of KP quadratic forms, boundary terms scaled by ``boundary_weight``."""
    return _rkhs(batch, kind, ops)


def rkhs_dense_loss(batch: ResidualBatch, kind: LossKind, ops: dict | None = None):
    return _rkhs(batch, kind, ops if ops is not None else _dense_ops_for(batch, kind))


def _dense_ops_for(batch, kind):
    ops = {}
    for r in batch.residuals:
        seg = r.term.segment
        if seg.is_tensor and seg.name not in ops:
            ops[seg.name] = dense_operator(seg, kind.matern, kind.dense_cap)
    return ops


# --------------------------------------------------------------------------
# Sobolev baseline


def differentiation_matrix(points, k, width=5):
    """Dense ``(n, n)`` matrix of local polynomial ``k``-th derivative weights.

    Each row uses the ``width`` nearest grid points (fewer on short grids);
    rows are exact for polynomials of degree ``width - 1``.  Returns zeros
    when the grid has no more than ``k`` points.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.size
    D = np.zeros((n, n))
    if k == 0:
        return np.eye(n)
    w = min(width, n)
    if w <= k:
        return D
    for i in range(n):
        lo = min(max(i - w // 2, 0), n - w)
        idx = np.arange(lo, lo + w)
        scale = x[idx[-1]] - x[idx[0]]
        t = (x[idx] - x[i]) / scale
        V = np.vander(t, w, increasing=True).T
        rhs = np.zeros(w)
        rhs[k] = math.factorial(k)
        D[i, idx] = np.linalg.solve(V, rhs) / scale**k
    return D


def multi_indices(term, order):
    """Derivative multi-indices over the free axes of ``term``'s segment."""
    seg = term.segment
    if order == 0 or not (term.smooth and seg.is_tensor):
        return ((0,) * max(len(seg.free_axes), 1),)
    return tuple(itertools.product(range(order + 1), repeat=len(seg.free_axes)))


def _mode_apply(Y, axis, D):
    return jnp.moveaxis(jnp.tensordot(D, jnp.moveaxis(Y, axis, 0), axes=1), 0, axis)


def sobolev_terms(residual: ResidualVector, order, mats=None):
    """Stack of ``D^alpha h`` samples, shape ``(n_alpha, n)``."""
    term, y = residual.term, residual.values
    alphas = multi_indices(term, order)
    if len(alphas) == 1:
        return y[None, :]
    seg = term.segment
    shape = seg.grid.shape
    if mats is None:
        mats = {}
    out = []
    for alpha in alphas:
        Y = y.reshape(shape)
        for axis, k in enumerate(alpha):
            if k:
                key = (id(seg.grid.axes[axis]), k)
                if key not in mats:
                    mats[key] = jnp.asarray(differentiation_matrix(seg.grid.axes[axis].points, k))
                Y = _mode_apply(Y, axis, mats[key])
        out.append(Y.reshape(-1))
    return jnp.stack(out)


def sobolev_loss(batch: ResidualBatch, order, boundary_weight=1.0, mats=None):
    """Mean over points of ``sum_alpha (D^alpha h)^2`` per ``(role, component)``.

    Mixed derivatives with every ``alpha_i <= order`` are taken along the
    free axes of each tensor segment by local polynomial differentiation of
    the residual samples; data and scattered terms contribute ``alpha = 0``.
    """
    if isinstance(order, LossKind):
        order, boundary_weight = order.order, order.boundary_weight
    if order not in (0, 1, 2):
        raise ValueError(f"Sobolev order must be 0, 1 or 2, got {order}")
    total = 0.0
    for (role, _), items in batch.groups().items():
        sq = [jnp.sum(sobolev_terms(r, order, mats) ** 2, axis=0) for r in items]
        total = total + _weight(role, boundary_weight) * jnp.mean(jnp.concatenate(sq))
    return total


# --------------------------------------------------------------------------
# assembly


def network_field(network, params):
    """Field ``x -> outputs`` for an :class:`MLPConfig` or a frozen callable."""
    if isinstance(network, MLPConfig):
        return lambda x: apply_mlp(network, params, x)
    if callable(network):
        return network
    raise TypeError("network must be an MLPConfig or a callable field")


def make_loss(problem: ProblemSpec, network, kind: LossKind, mode="forward", ops=None):
    """Build ``loss(params, theta)`` with operators constructed exactly once."""
    if mode not in ("forward", "inverse"):
        raise ValueError(f"mode must be 'forward' or 'inverse', got {mode!r}")
    ops = build_operators(problem, kind, mode) if ops is None else ops
    terms = problem.terms(mode)
    mats = {}

    def loss(params, theta):
        fld = network_field(network, params)
        th = problem.theta(theta if mode == "inverse" else None)
        batch = ResidualBatch(tuple(ResidualVector(t, t.values(fld, th)) for t in terms))
        if kind.variant == "l2":
            return l2_loss(batch, kind.boundary_weight)
        if kind.variant == "sobolev":
            return sobolev_loss(batch, kind, mats=mats)
        return _rkhs(batch, kind, ops)

    return loss


def assemble_loss(problem, network, params, theta, kind: LossKind, mode="forward"):
    """Loss value for one parameter setting (see :func:`make_loss` for reuse)."""
    theta = jnp.asarray(problem.theta_true if theta is None else theta, dtype=jnp.float64)
    return make_loss(problem, network, kind, mode)(params, theta)
