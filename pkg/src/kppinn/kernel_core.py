"""Half-integer Matérn kernels and the grid types shared across the package.

Scale convention: ``ell`` *multiplies* the distance,

    Phi_nu(a, b) = exp(-ell*sqrt(2 nu)|a-b|) * p!/(2p)! *
                   sum_{i=0}^{p} (p+i)!/(i!(p-i)!) (2 ell sqrt(2 nu)|a-b|)^(p-i),

with ``p = nu - 1/2``.  Larger ``ell`` therefore means faster decay, which is
the opposite of the usual length-scale reading.  For p = 0, 1, 2 the formula
reduces to

    exp(-z),  (1 + z) exp(-z),  (1 + z + z^2/3) exp(-z),   z = ell*sqrt(2 nu)*r,

so Phi(x, x) = 1 for every supported smoothness (the prefactor p!/(2p)!
cancels the i = p term of the sum exactly).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import factorial, sqrt

import numpy as np

SUPPORTED_NU = (0.5, 1.5, 2.5)


class GridError(ValueError):
    """Raised for malformed point sets (unsorted, duplicated, non-finite)."""


@dataclass(frozen=True)
class MaternParams:
    nu: float = 0.5
    ell: float = 1.0

    def __post_init__(self):
        twice = 2.0 * self.nu
        if abs(twice - round(twice)) > 1e-12 or round(twice) % 2 != 1 or twice < 1:
            raise ValueError(f"nu must be a positive half-integer, got {self.nu}")
        if self.nu not in SUPPORTED_NU:
            raise ValueError(f"nu={self.nu} not supported; choose one of {SUPPORTED_NU}")
        if not (self.ell > 0 and np.isfinite(self.ell)):
            raise ValueError(f"ell must be positive and finite, got {self.ell}")

    @property
    def p(self) -> int:
        """Polynomial degree ``nu - 1/2`` of the closed form."""
        return int(round(self.nu - 0.5))

    @property
    def c(self) -> float:
        """Exponential decay rate ``ell * sqrt(2 nu)`` of the kernel."""
        return self.ell * sqrt(2.0 * self.nu)

    @property
    def packet_width(self) -> int:
        """Number of consecutive points ``s = 2 nu + 2`` in an interior packet."""
        return 2 * self.p + 3

    @cached_property
    def poly_coeffs(self) -> np.ndarray:
        """Coefficients of z^k (k = 0..p) in the prefactor polynomial."""
        p = self.p
        coeffs = np.zeros(p + 1)
        pref = factorial(p) / factorial(2 * p)
        for i in range(p + 1):
            k = p - i
            coeffs[k] = pref * factorial(p + i) / (factorial(i) * factorial(p - i)) * 2.0**k
        return coeffs


def matern_from_distance(params: MaternParams, r) -> np.ndarray:
    """Evaluate the kernel as a function of (unsigned) distance ``r``."""
    z = params.c * np.abs(np.asarray(r, dtype=np.float64))
    poly = np.polynomial.polynomial.polyval(z, params.poly_coeffs)
    return poly * np.exp(-z)


def matern_eval(params: MaternParams, a, b):
    """``k(a, b)``; broadcasts over array inputs, returns a float for scalars."""
    out = matern_from_distance(params, np.subtract(a, b))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Strictly increasing, finite 1-D point set."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1)
        if pts.size < 1:
            raise GridError("grid must contain at least one point")
        bad = np.flatnonzero(~np.isfinite(pts))
        if bad.size:
            raise GridError(f"grid point {bad[0]} is not finite")
        gaps = np.diff(pts)
        if np.any(gaps <= 0):
            bad = int(np.argmax(gaps <= 0))
            raise GridError(
                f"grid points must be strictly increasing (violation at index {bad + 1}: "
                f"{pts[bad]!r} -> {pts[bad + 1]!r})"
            )
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.size

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int) -> "Grid1D":
        return cls(np.linspace(lo, hi, n))

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"Grid1D(n={self.n}, [{self.points[0]:g}, {self.points[-1]:g}])"


@dataclass(frozen=True, eq=False)
class TensorGrid:
    """Cartesian product of 1-D grids.

    Flattening order is row-major: the last axis varies fastest, so that the
    kernel matrix of the flattened points is ``kron(K_0, K_1, ..., K_{d-1})``.
    """

    axes: tuple

    def __post_init__(self):
        axes = tuple(a if isinstance(a, Grid1D) else Grid1D(a) for a in self.axes)
        if not axes:
            raise GridError("tensor grid needs at least one axis")
        object.__setattr__(self, "axes", axes)

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.n for a in self.axes)

    @property
    def n(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """All grid points as an ``(n, d)`` array in flattening order."""
        mesh = np.meshgrid(*(a.points for a in self.axes), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def __repr__(self):
        return f"TensorGrid(shape={self.shape})"


def kernel_matrix(params: MaternParams, grid: Grid1D) -> np.ndarray:
    x = grid.points
    return matern_from_distance(params, x[:, None] - x[None, :])


def tensor_kernel_matrix(params, grid: TensorGrid) -> np.ndarray:
    """Materialized Kronecker product of the per-axis kernel matrices."""
    if isinstance(params, MaternParams):
        params = [params] * grid.d
    out = np.ones((1, 1))
    for p, axis in zip(params, grid.axes):
        out = np.kron(out, kernel_matrix(p, axis))
    return out
