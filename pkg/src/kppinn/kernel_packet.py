"""Kernel packets: sparse banded factors with K^{-1} = A Phi^{-1} on a 1-D grid.

A packet is a combination ``phi(x) = sum_k A_k Phi(x, x_k)`` over consecutive
grid points whose coefficients annihilate the exponential-polynomial space
``{x^l exp(+-c x), l <= p}``.  Outside its window such a combination is a sum
of exactly those functions, so it vanishes identically there.  Stacking ``n``
packets as the columns of ``A`` gives ``K A = Phi`` with both ``A`` and
``Phi`` banded, hence ``K^{-1} = A Phi^{-1}`` at ``O(n s^2)`` cost.

Column layout (``p = nu - 1/2``, ``s = 2p + 3``)::

    0 .. p            left one-sided packets, windows x[0 : p+1+k], k = 1..p+1
    p+1 .. n-p-2      interior packets, windows x[w : w+s]
    n-p-1 .. n-1      right one-sided packets (column n-k has window size p+1+k)

``A`` has bandwidth ``p + 1`` on each side and ``Phi`` has bandwidth ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .kernel_core import Grid1D, MaternParams, kernel_matrix, matern_from_distance

# Below this value of (decay rate * window width) the exponential basis is
# replaced by a power-series basis of the same function space; the two
# exponentials become nearly collinear with the polynomials as it shrinks.
SERIES_SWITCH = 2.0
_SERIES_TERMS = 48

_builds = 0


class KernelPacketError(ArithmeticError):
    pass


class SingularWindowError(KernelPacketError):
    """The packet condition matrix of a window is numerically rank-deficient."""


class GridTooSmallError(KernelPacketError, ValueError):
    pass


class FactorizationError(KernelPacketError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class NotPositiveDefiniteError(KernelPacketError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def factor_build_count() -> int:
    """Number of :func:`build_factor` calls made in this process."""
    return _builds


@dataclass(frozen=True, eq=False)
class BandedMatrix:
    """Square banded matrix in LAPACK general-band storage.

    ``data[upper + i - j, j] == M[i, j]`` for ``-lower <= j - i <= upper``.
    """

    n: int
    lower: int
    upper: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (self.lower + self.upper + 1, self.n):
            raise ValueError(
                f"band storage must have shape {(self.lower + self.upper + 1, self.n)}, "
                f"got {self.data.shape}"
            )

    @classmethod
    def zeros(cls, n, lower, upper):
        return cls(n, lower, upper, np.zeros((lower + upper + 1, n)))

    @classmethod
    def from_dense(cls, M, lower, upper):
        M = np.asarray(M, dtype=np.float64)
        n = M.shape[0]
        out = cls.zeros(n, lower, upper)
        for k in range(-lower, upper + 1):
            i = np.arange(max(0, -k), min(n, n - k))
            out.data[upper - k, i + k] = M[i, i + k]
        return out

    def to_dense(self) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        for k in range(-self.lower, self.upper + 1):
            i = np.arange(max(0, -k), min(self.n, self.n - k))
            M[i, i + k] = self.data[self.upper - k, i + k]
        return M

    def matvec(self, x, transpose=False):
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros_like(x)
        n = self.n
        for k in range(-self.lower, self.upper + 1):
            i = np.arange(max(0, -k), min(n, n - k))
            vals = self.data[self.upper - k, i + k]
            if x.ndim > 1:
                vals = vals[:, None]
            if transpose:
                y[i + k] += vals * x[i]
            else:
                y[i] += vals * x[i + k]
        return y

    def bandwidths(self) -> tuple:
        """Actual (lower, upper) extent of the nonzero entries."""
        lo = up = 0
        for k in range(-self.lower, self.upper + 1):
            if np.any(self.data[self.upper - k] != 0):
                if k < 0:
                    lo = max(lo, -k)
                else:
                    up = max(up, k)
        return lo, up


@dataclass(frozen=True, eq=False)
class KernelPacketFactor:
    grid: Grid1D
    params: MaternParams
    A: BandedMatrix | None
    Phi: BandedMatrix | None
    lu: tuple | None = field(repr=False, default=None)
    dense_fallback: bool = False
    chol: np.ndarray | None = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def s(self) -> int:
        return self.params.packet_width


def _basis_poly(a: int, b: int) -> np.ndarray:
    """Coefficients (ascending) of (z - 1)^a (z + 1)^b."""
    poly = np.array([1.0])
    for _ in range(a):
        poly = np.convolve(poly, [-1.0, 1.0])
    for _ in range(b):
        poly = np.convolve(poly, [1.0, 1.0])
    return poly


def _condition_matrices(tau, eps, a, b):
    """Condition rows for windows in scaled coordinates.

    ``tau`` has shape (W, m) with entries in [-1/2, 1/2]; ``eps`` has shape
    (W,).  Rows span {tau^l e^{eps tau}, l < a} + {tau^l e^{-eps tau}, l < b},
    returned with shape (W, a + b, m).
    """
    W, m = tau.shape
    N = a + b
    out = np.empty((W, N, m))
    small = eps <= SERIES_SWITCH

    if np.any(~small):
        t, e = tau[~small], eps[~small][:, None]
        rows = [t**l * np.exp(e * t) for l in range(a)]
        rows += [t**l * np.exp(-e * t) for l in range(b)]
        M = np.stack(rows, axis=1)
        M /= np.max(np.abs(M), axis=2, keepdims=True)
        out[~small] = M

    if np.any(small):
        # Basis of solutions of (D - eps)^a (D + eps)^b f = 0 with
        # f^{(j)}(0) = delta_{jm}; tends to tau^m/m! as eps -> 0, so it stays
        # well conditioned where the exponentials collapse onto polynomials.
        t, e = tau[small], eps[small]
        gamma = _basis_poly(a, b)
        pi = gamma[None, :N] * e[:, None] ** (N - np.arange(N))[None, :]
        J = N + _SERIES_TERMS
        q = np.zeros((t.shape[0], N, J))
        fact = np.cumprod(np.r_[1.0, np.arange(1, N)])
        q[:, np.arange(N), np.arange(N)] = 1.0 / fact[None, :]
        for k in range(J - N):
            # q_{k+N} = -sum_i pi_i q_{k+i} (k+i)!/(k+N)!
            acc = np.zeros((t.shape[0], N))
            for i in range(N):
                ratio = 1.0 / np.prod(np.arange(k + i + 1, k + N + 1, dtype=np.float64))
                acc -= pi[:, i, None] * q[:, :, k + i] * ratio
            q[:, :, k + N] = acc
        powers = t[:, None, :] ** np.arange(J)[None, :, None]  # (W, J, m)
        out[small] = np.einsum("wnj,wjm->wnm", q, powers)
    return out


def _null_vectors(M):
    """Normalized null vectors of a stack of (m-1) x m matrices."""
    _, sv, vt = np.linalg.svd(M, full_matrices=True)
    v = vt[:, -1, :]
    # rank check: the (m-1)-th singular value must be clearly nonzero
    ratio = sv[:, -1] / sv[:, 0]
    bad = np.nonzero(~(ratio > 1e-13))[0]
    if bad.size:
        raise SingularWindowError(
            f"packet condition matrix is rank-deficient (window {int(bad[0])}, "
            f"singular value ratio {ratio[bad[0]]:.3e})"
        )
    scale = np.max(np.abs(v), axis=1, keepdims=True)
    v = v / scale
    lead = v[np.arange(v.shape[0]), np.argmax(np.abs(v) > 1e-14, axis=1)]
    return v * np.sign(lead)[:, None]


def _scaled_windows(windows, c):
    lo, hi = windows[:, 0], windows[:, -1]
    width = hi - lo
    tau = (windows - 0.5 * (lo + hi)[:, None]) / width[:, None]
    return tau, c * width


def packet_coefficients(window, params: MaternParams, side: str = "interior") -> np.ndarray:
    """Coefficients of one kernel packet on ``window``.

    ``side='interior'`` imposes both decay directions on exactly ``s`` points.
    ``side='left'`` (packet touching the left end of the grid) must vanish to
    the right, so it imposes all ``delta=+1`` conditions plus as many
    ``delta=-1`` conditions as the window size allows; ``'right'`` mirrors it.
    The result has unit max-norm and a positive leading entry.
    """
    x = np.asarray(window, dtype=np.float64).reshape(1, -1)
    m = x.shape[1]
    if m < 2 or np.any(np.diff(x[0]) <= 0):
        raise ValueError("window must hold at least two strictly increasing points")
    full = params.p + 1
    if side == "interior":
        if m != params.packet_width:
            raise ValueError(f"interior window needs {params.packet_width} points, got {m}")
        a, b = full, full
    elif side == "left":
        a, b = full, m - 1 - full
    elif side == "right":
        a, b = m - 1 - full, full
    else:
        raise ValueError(f"unknown side {side!r}")
    if min(a, b) < 0:
        raise ValueError(f"{side} window of {m} points is too short for nu={params.nu}")
    tau, eps = _scaled_windows(x, params.c)
    return _null_vectors(_condition_matrices(tau, eps, a, b))[0]


def _packet_values(x, cols, rows, coeffs, params):
    """phi(x[rows]) for packets with window indices ``cols`` (both (W, .))."""
    dist = x[rows][:, :, None] - x[cols][:, None, :]
    return np.einsum("wik,wk->wi", matern_from_distance(params, dist), coeffs)


def build_factor(grid: Grid1D, params: MaternParams, fallback: bool = False) -> KernelPacketFactor:
    """Construct the banded KP factorization of the kernel matrix on ``grid``.

    With ``fallback=True`` grids shorter than one packet get a dense Cholesky
    factor instead (flagged by ``dense_fallback``); otherwise they raise.
    """
    global _builds
    _builds += 1
    if not isinstance(grid, Grid1D):
        grid = Grid1D(grid)
    n, p, s = grid.n, params.p, params.packet_width
    if n < s:
        if not fallback:
            raise GridTooSmallError(f"grid has {n} points but nu={params.nu} needs at least {s}")
        return KernelPacketFactor(
            grid, params, None, None, dense_fallback=True,
            chol=_cholesky(kernel_matrix(params, grid)),
        )

    x = grid.points
    A = BandedMatrix.zeros(n, p + 1, p + 1)
    Phi = BandedMatrix.zeros(n, p, p)

    def put(band, col, rows, vals):
        band.data[band.upper + rows - col, col] = vals

    # interior packets, all at once
    W = n - s + 1
    cols = np.arange(W)[:, None] + np.arange(s)[None, :]
    tau, eps = _scaled_windows(x[cols], params.c)
    coeffs = _null_vectors(_condition_matrices(tau, eps, p + 1, p + 1))
    rows = cols[:, 1:-1]
    vals = _packet_values(x, cols, rows, coeffs, params)
    j = (p + 1 + np.arange(W))[:, None]
    put(A, j, cols, coeffs)
    put(Phi, j, rows, vals)

    # one-sided packets at both ends
    for k in range(1, p + 2):
        m = p + 1 + k
        left = np.arange(m)
        v = packet_coefficients(x[left], params, "left")
        put(A, k - 1, left, v)
        put(Phi, k - 1, left[:-1], _packet_values(x, left[None], left[None, :-1], v[None], params)[0])

        right = np.arange(n - m, n)
        v = packet_coefficients(x[right], params, "right")
        put(A, n - k, right, v)
        put(Phi, n - k, right[1:], _packet_values(x, right[None], right[None, 1:], v[None], params)[0])

    return KernelPacketFactor(grid, params, A, Phi, lu=_band_lu(Phi))


def _band_lu(Phi: BandedMatrix):
    kl, ku = Phi.lower, Phi.upper
    ab = np.zeros((2 * kl + ku + 1, Phi.n))
    ab[kl:] = Phi.data
    lu, piv, info = lapack.dgbtrf(ab, kl, ku)
    if info > 0:
        raise FactorizationError(f"banded LU of Phi hit a zero pivot at index {info - 1}", info - 1)
    if info < 0:
        raise FactorizationError(f"dgbtrf rejected argument {-info}")
    return lu, piv


def _cholesky(K):
    c, info = lapack.dpotrf(K, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(
            f"kernel matrix not numerically positive definite: leading minor of order {info} "
            f"failed (pivot index {info - 1})",
            info - 1,
        )
    return c


def _check_len(factor, y):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != factor.n:
        raise ValueError(f"expected leading dimension {factor.n}, got {y.shape[0]}")
    return y


def apply_inverse(factor: KernelPacketFactor, y, transpose: bool = False) -> np.ndarray:
    """``K^{-1} y`` as ``A (Phi^{-1} y)``; ``transpose`` gives ``Phi^{-T} A^T y``.

    ``y`` may be a vector or an ``(n, r)`` block of right-hand sides.
    """
    y = _check_len(factor, y)
    if factor.dense_fallback:
        return lapack.dpotrs(factor.chol, y, lower=1)[0]
    lu, piv = factor.lu
    kl, ku = factor.Phi.lower, factor.Phi.upper
    if transpose:
        z = factor.A.matvec(y, transpose=True)
        out, info = lapack.dgbtrs(lu, kl, ku, z, piv, trans=1)
        return out
    z, info = lapack.dgbtrs(lu, kl, ku, y, piv, trans=0)
    return factor.A.matvec(z)


def quadratic_form(factor: KernelPacketFactor, y) -> float:
    y = _check_len(factor, y)
    return float(y @ apply_inverse(factor, y))


def dense_quadratic_form(grid: Grid1D, params: MaternParams, y) -> float:
    """``y^T K^{-1} y`` through a dense Cholesky factorization."""
    if not isinstance(grid, Grid1D):
        grid = Grid1D(grid)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (grid.n,):
        raise ValueError(f"expected a vector of length {grid.n}, got shape {y.shape}")
    L = _cholesky(kernel_matrix(params, grid))
    z = lapack.dtrtrs(L, y, lower=1)[0]
    return float(z @ z)
