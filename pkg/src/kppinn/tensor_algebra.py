"""Kronecker-structured kernel inverses on tensor grids.

On a tensor grid the kernel matrix is ``kron(K_0, ..., K_{d-1})`` and its
inverse is the Kronecker product of the 1-D inverses, so ``K^{-1} y`` is one
1-D KP solve per axis applied along that axis of the reshaped ``y``.  The
``n x n`` matrix is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel_core import MaternParams, TensorGrid
from .kernel_packet import KernelPacketError, KernelPacketFactor, apply_inverse, build_factor


class AxisFactorError(KernelPacketError):
    def __init__(self, axis, cause):
        super().__init__(f"axis {axis}: {cause}")
        self.axis = axis
        self.cause = cause


@dataclass(frozen=True, eq=False)
class TensorFactor:
    grid: TensorGrid
    factors: tuple
    params: tuple

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def shape(self) -> tuple:
        return self.grid.shape


def build_tensor_factor(grid: TensorGrid, params, fallback: bool = True) -> TensorFactor:
    """Per-axis KP factors; axes shorter than one packet use a dense factor."""
    if isinstance(params, MaternParams):
        params = [params] * grid.d
    params = tuple(params)
    if len(params) != grid.d:
        raise ValueError(f"need one MaternParams per axis ({grid.d}), got {len(params)}")
    factors = []
    for i, (axis, p) in enumerate(zip(grid.axes, params)):
        try:
            factors.append(build_factor(axis, p, fallback=fallback))
        except KernelPacketError as exc:
            raise AxisFactorError(i, exc) from exc
    return TensorFactor(grid, tuple(factors), params)


def _apply_modes(factors, shape, y, transpose):
    y = np.asarray(y, dtype=np.float64)
    n = int(np.prod(shape))
    if y.shape != (n,):
        raise ValueError(f"expected a vector of length {n}, got shape {y.shape}")
    Y = y.reshape(shape)
    for axis, f in enumerate(factors):
        moved = np.moveaxis(Y, axis, 0)
        rest = moved.shape[1:]
        out = apply_inverse(f, moved.reshape(shape[axis], -1), transpose=transpose)
        Y = np.moveaxis(out.reshape((shape[axis],) + rest), 0, axis)
    return Y.reshape(-1)


def tensor_apply_inverse(tf: TensorFactor, y, transpose: bool = False) -> np.ndarray:
    """``(kron_i K_i)^{-1} y``, axis 0 first."""
    return _apply_modes(tf.factors, tf.shape, y, transpose)


def tensor_quadratic_form(tf: TensorFactor, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float(y @ tensor_apply_inverse(tf, y))


def as_tensor_factor(factor: KernelPacketFactor) -> TensorFactor:
    """Wrap a 1-D factor as a degenerate one-axis tensor factor."""
    return TensorFactor(TensorGrid((factor.grid,)), (factor,), (factor.params,))
