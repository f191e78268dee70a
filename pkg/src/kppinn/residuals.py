"""Benchmark equations: residual operators, exact solutions and point sets.

Four problems are provided, each as a :class:`ProblemSpec` built by a factory
(:func:`stiff_problem`, :func:`helmholtz_problem`, :func:`lqg_problem`,
:func:`ns_problem`).  Residuals act on a *field*: any traceable callable
``x -> outputs`` with ``x`` of shape ``(d,)`` and outputs of shape ``(m,)``.
The network is one such field; the exact solutions are another, which is how
the losses are checked to vanish at the true solution.

Point sets are organised in :class:`Segment` objects.  A segment is either a
tensor grid over some *free* axes with the remaining coordinates fixed (the
interior, a boundary edge, a terminal slice) or a scattered point list.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import gammaln

from .autodiff import point_jet
from .kernel_core import Grid1D, TensorGrid

ROLES = ("interior", "boundary", "data")


class QuadratureError(ArithmeticError):
    pass


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------
# point sets


@dataclass(frozen=True, eq=False)
class Segment:
    name: str
    dim: int
    free_axes: tuple = ()
    grid: TensorGrid | None = None
    fixed: tuple = ()
    scattered: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if (self.grid is None) == (self.scattered is None):
            raise ValueError("a segment needs exactly one of `grid` or `scattered`")
        if self.grid is not None and self.grid.d != len(self.free_axes):
            raise ValueError("grid dimension must match the number of free axes")

    @classmethod
    def point(cls, name, x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return cls(name, x.size, scattered=x[None, :])

    @property
    def is_tensor(self) -> bool:
        return self.grid is not None

    @property
    def n(self) -> int:
        return self.grid.n if self.grid is not None else self.scattered.shape[0]

    def points(self) -> np.ndarray:
        if self.scattered is not None:
            return np.asarray(self.scattered, dtype=np.float64)
        out = np.zeros((self.grid.n, self.dim))
        out[:, list(self.free_axes)] = self.grid.points()
        for axis, value in self.fixed:
            out[:, axis] = value
        return out


@dataclass(frozen=True, eq=False)
class Term:
    """One residual component evaluated on one segment.

    ``fn(field, theta, x, aux)`` returns the residual at a single point;
    ``aux`` carries per-point observations (or 0.0).  ``smooth`` is False when
    the residual involves observed data, whose input derivatives are unknown.
    """

    role: str
    name: str
    segment: Segment
    fn: object = field(repr=False)
    aux: np.ndarray | None = field(default=None, repr=False)
    smooth: bool = True

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    def values(self, fld, theta):
        pts = jnp.asarray(self.segment.points())
        aux = jnp.zeros(pts.shape[0]) if self.aux is None else jnp.asarray(self.aux)
        return jax.vmap(lambda x, a: self.fn(fld, theta, x, a))(pts, aux)


@dataclass(frozen=True, eq=False)
class ResidualVector:
    term: Term
    values: jax.Array

    @property
    def role(self):
        return self.term.role


@dataclass(frozen=True, eq=False)
class ResidualBatch:
    residuals: tuple

    def by_role(self, role):
        return [r for r in self.residuals if r.role == role]

    def groups(self):
        """Residuals grouped by ``(role, component name)`` in first-seen order."""
        out = {}
        for r in self.residuals:
            out.setdefault((r.role, r.term.name), []).append(r)
        return out


# --------------------------------------------------------------------------
# problem container


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    name: str
    dim: int
    bounds: tuple
    output_dim: int
    interior: Segment
    boundary: tuple
    test_grid: TensorGrid
    theta_names: tuple
    theta_true: tuple
    theta_init: tuple
    constants: dict = field(default_factory=dict)
    data_segments: tuple = ()
    observations: object = None

    @property
    def n_theta(self) -> int:
        return len(self.theta_names)

    def theta(self, vec=None) -> dict:
        """Parameter dict; ``vec=None`` gives the true (forward-mode) values."""
        vals = self.theta_true if vec is None else vec
        return {k: vals[i] for i, k in enumerate(self.theta_names)}

    def segments(self):
        segs = {self.interior.name: self.interior}
        for s in (*self.boundary, *self.data_segments):
            segs.setdefault(s.name, s)
        return segs

    # problem-specific hooks ------------------------------------------------
    def terms(self, mode="forward"):
        return _TERM_BUILDERS[self.name](self, mode)

    def exact_field(self):
        return _EXACT_FIELDS[self.name](self)

    def target(self, points) -> np.ndarray:
        """True values of the error-metric quantity at ``points``."""
        return _TARGETS[self.name](self, np.asarray(points, dtype=np.float64))

    def prediction(self, fld, points):
        """The error-metric quantity computed from a field (traceable)."""
        pts = jnp.asarray(points)
        if self.name == "ns":
            vel = jax.vmap(lambda x: ns_velocity(fld, x))(pts)
            return jnp.concatenate([vel[:, 0], vel[:, 1]])
        return jax.vmap(lambda x: fld(x)[0])(pts)


def evaluate_residuals(problem: ProblemSpec, fld, theta_vec=None, mode="forward") -> ResidualBatch:
    theta = problem.theta(theta_vec if mode == "inverse" else None)
    return ResidualBatch(tuple(ResidualVector(t, t.values(fld, theta)) for t in problem.terms(mode)))


def _grid(lo, hi, n):
    return Grid1D(np.linspace(lo, hi, int(n)))


def _scalar(fld):
    return lambda x: fld(x)[0]


# --------------------------------------------------------------------------
# stiff ODE:  u' - lambda u = e^{-t},  u(0) = mu,  t in [0, 5]


def stiff_exact(lam, mu, t):
    if lam == -1:
        raise ZeroDivisionError("the closed-form solution is singular at lambda = -1")
    xp = jnp if isinstance(t, jax.Array) else np
    return (mu + 1.0 / (1.0 + lam)) * xp.exp(lam * t) - xp.exp(-t) / (1.0 + lam)


def stiff_residual(u, lam, t):
    """``u'(t) - lam u(t) - e^{-t}`` for a scalar field ``u`` of ``t``."""
    value, du = jax.jvp(u, (t,), (jnp.ones_like(t),))
    return du - lam * value - jnp.exp(-t)


def stiff_problem(n_interior=50, n_test=2000, lam=-2.0, mu=2.0, lam_init=0.0, t_end=5.0):
    interior = Segment("interior", 1, (0,), TensorGrid((_grid(0.0, t_end, n_interior),)))
    boundary = (Segment.point("t0", [0.0]),)
    return ProblemSpec(
        "stiff", 1, ((0.0, t_end),), 1, interior, boundary,
        TensorGrid((_grid(0.0, t_end, n_test),)),
        ("lambda",), (lam,), (lam_init,), {"mu": mu},
        data_segments=(interior, *boundary),
    )


def _stiff_terms(pb, mode):
    def h1(fld, th, x, a):
        u = lambda t: fld(jnp.reshape(t, (1,)))[0]
        return stiff_residual(u, th["lambda"], x[0])

    def h2(fld, th, x, a):
        return fld(x)[0] - pb.constants["mu"]

    terms = [Term("interior", "h1", pb.interior, h1), Term("boundary", "h2", pb.boundary[0], h2)]
    if mode == "inverse":
        terms += _data_terms(pb)
    return terms


def _stiff_field(pb):
    lam, mu = pb.theta_true[0], pb.constants["mu"]
    return lambda x: jnp.reshape(stiff_exact(lam, mu, x[0]), (1,))


# --------------------------------------------------------------------------
# Helmholtz:  Δu + k^2 u = p on [-1, 1]^2,  u = 0 on the boundary


def helmholtz_exact(x, y):
    xp = jnp if isinstance(x, jax.Array) or isinstance(y, jax.Array) else np
    return (x + y) * xp.sin(math.pi * x) * xp.sin(math.pi * y)


def helmholtz_source(x, y):
    xp = jnp if isinstance(x, jax.Array) or isinstance(y, jax.Array) else np
    pi = math.pi
    s = xp.sin(pi * x) * xp.sin(pi * y)
    return (
        (x + y) * s
        - 2 * pi**2 * (x + y) * s
        + 2 * pi * xp.cos(pi * y) * xp.sin(pi * x)
        + 2 * pi * xp.cos(pi * x) * xp.sin(pi * y)
    )


def helmholtz_residual(u, k, x, y):
    """``Δu + k^2 u - p`` for a scalar field ``u`` of a 2-vector."""
    jet = point_jet(u, jnp.stack([x, y]), order=2)
    return jet.laplacian() + k**2 * jet.value - helmholtz_source(x, y)


def helmholtz_edges(n_per_edge=25, lo=-1.0, hi=1.0):
    """Four edges; each corner belongs to exactly one edge (counter-clockwise)."""
    t = np.linspace(lo, hi, n_per_edge + 1)
    head, tail = Grid1D(t[:-1]), Grid1D(t[1:])
    return (
        Segment("bottom", 2, (0,), TensorGrid((head,)), ((1, lo),)),
        Segment("right", 2, (1,), TensorGrid((head,)), ((0, hi),)),
        Segment("top", 2, (0,), TensorGrid((tail,)), ((1, hi),)),
        Segment("left", 2, (1,), TensorGrid((tail,)), ((0, lo),)),
    )


def helmholtz_problem(n_interior=(100, 100), n_boundary=100, n_test=(500, 600), k=1.0, k_init=0.5):
    if n_boundary % 4:
        raise ValueError("n_boundary must be divisible by 4 (one share per edge)")
    interior = Segment(
        "interior", 2, (0, 1), TensorGrid((_grid(-1, 1, n_interior[0]), _grid(-1, 1, n_interior[1])))
    )
    boundary = helmholtz_edges(n_boundary // 4)
    return ProblemSpec(
        "helmholtz", 2, ((-1.0, 1.0), (-1.0, 1.0)), 1, interior, boundary,
        TensorGrid((_grid(-1, 1, n_test[0]), _grid(-1, 1, n_test[1]))),
        ("k",), (k,), (k_init,),
        data_segments=(interior, *boundary),
    )


def _helmholtz_terms(pb, mode):
    def h1(fld, th, x, a):
        return helmholtz_residual(_scalar(fld), th["k"], x[0], x[1])

    def h2(fld, th, x, a):
        return fld(x)[0]

    terms = [Term("interior", "h1", pb.interior, h1)]
    terms += [Term("boundary", "h2", s, h2) for s in pb.boundary]
    if mode == "inverse":
        terms += _data_terms(pb)
    return terms


# --------------------------------------------------------------------------
# LQG:  u_t + Δ_x u - mu |∇_x u|^2 = 0,  u(x, T) = g(x),  x in R^2


def lqg_terminal(x):
    xp = jnp if isinstance(x, jax.Array) else np
    return xp.log((1.0 + xp.sum(x * x, axis=-1)) / 2.0)


def lqg_mixture_nodes(mu, step=0.2):
    """Nodes ``a_j`` and weights for ``(2/(1+r^2))^mu = sum_j w_j exp(-a_j (1+r^2))``.

    Uses ``(1+r^2)^{-mu} = Γ(mu)^{-1} ∫ a^{mu-1} e^{-a(1+r^2)} da`` with
    ``a = e^v`` and the trapezoid rule in ``v``, which converges
    geometrically for this analytic, doubly decaying integrand.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    v = np.arange(-38.0 / mu, 4.0 + step, step)
    a = np.exp(v)
    logw = mu * math.log(2.0) - gammaln(mu) + math.log(step) + mu * v - a
    return a, np.exp(logw)


def _mixture_expectation(xp, a, w, x, t, T):
    # E_Y[(2 / (1 + |x - s Y|^2))^mu], s^2 = 2 (T - t), Y ~ N(0, I_d)
    d = x.shape[-1]
    s2 = 2.0 * (T - t)
    r2 = xp.sum(x * x, axis=-1)
    den = 1.0 + 2.0 * a * s2[..., None]
    return xp.sum(w * den ** (-d / 2.0) * xp.exp(-a * r2[..., None] / den), axis=-1)


def _hermite_expectation(mu, x, t, T, nodes):
    z, wz = np.polynomial.hermite_e.hermegauss(nodes)
    wz = wz / math.sqrt(2.0 * math.pi)
    d = x.shape[-1]
    grids = np.meshgrid(*([z] * d), indexing="ij")
    Y = np.stack([g.reshape(-1) for g in grids], axis=-1)
    W = np.prod(np.meshgrid(*([wz] * d), indexing="ij"), axis=0).reshape(-1)
    s = np.sqrt(2.0 * (T - t))[..., None, None]
    arg = x[..., None, :] - s * Y
    vals = np.exp(-mu * lqg_terminal(arg))
    return np.sum(W * vals, axis=-1)


def lqg_exact(mu, T, x, t, method="mixture", nodes=None, check=True, tol=None):
    """Closed-form value ``-(1/mu) log E[exp(-mu g(x - sqrt(2(T-t)) Y))]``.

    ``method='mixture'`` (default) integrates a one-dimensional Gamma mixture
    exactly in the Gaussian variable; ``method='hermite'`` applies tensor
    Gauss-Hermite quadrature with ``nodes`` per axis.  With ``check=True``
    the result is recomputed on a coarser rule and a :class:`QuadratureError`
    is raised when the relative change in the expectation exceeds ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t > T + 1e-12):
        raise ValueError("t must not exceed the horizon T")
    if method == "mixture":
        step = 0.2 if nodes is None else float(nodes)
        a, w = lqg_mixture_nodes(mu, step)
        val = _mixture_expectation(np, a, w, x, t, T)
        if check:
            coarse = _mixture_expectation(np, a[::2], 2 * w[::2], x, t, T)
            _check_quadrature(val, coarse, 1e-6 if tol is None else tol, method)
    elif method == "hermite":
        nodes = 100 if nodes is None else int(nodes)
        val = _hermite_expectation(mu, x, t, T, nodes)
        if check:
            coarse = _hermite_expectation(mu, x, t, T, max(2, (3 * nodes) // 4))
            _check_quadrature(val, coarse, 1e-4 if tol is None else tol, method)
    else:
        raise ValueError(f"unknown method {method!r}")
    return -np.log(val) / mu


def _check_quadrature(fine, coarse, tol, method):
    rel = np.abs(fine - coarse) / np.abs(fine)
    worst = float(np.max(rel))
    if not worst <= tol:
        idx = int(np.argmax(rel))
        raise QuadratureError(
            f"{method} quadrature not converged: relative change {worst:.3e} > {tol:.1e} "
            f"(flat index {idx}, fine={np.ravel(fine)[idx]!r}, coarse={np.ravel(coarse)[idx]!r})"
        )


def lqg_exact_monte_carlo(mu, T, x, t, samples=10_000_000, seed=0, chunk=1_000_000):
    """Plain Monte Carlo estimate of the same expectation (independent oracle)."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    s = math.sqrt(2.0 * (T - float(t)))
    total, done = 0.0, 0
    while done < samples:
        m = min(chunk, samples - done)
        Y = rng.standard_normal((m, x.size))
        total += float(np.sum(np.exp(-mu * lqg_terminal(x - s * Y))))
        done += m
    return -math.log(total / samples) / mu


def lqg_residual(u, mu, x, t):
    """``u_t + Δ_x u - mu |∇_x u|^2`` for a scalar field of ``(x_1, .., x_d, t)``."""
    z = jnp.concatenate([x, jnp.reshape(t, (1,))])
    jet = point_jet(u, z, order=2)
    d = x.shape[0]
    grad_x = jet.grad[:d]
    return jet.grad[d] + jnp.sum(jet.hess_diag[:d]) - mu * jnp.sum(grad_x * grad_x)


def lqg_problem(n_interior=(30, 20, 10), n_terminal=(45, 45), n_test=(100, 80, 50),
                mu=1.0, mu_init=0.5, T=1.0, box=1.0):
    xs = [_grid(-box, box, n_interior[0]), _grid(-box, box, n_interior[1])]
    interior = Segment("interior", 3, (0, 1, 2), TensorGrid((*xs, _grid(0.0, T, n_interior[2]))))
    terminal = Segment(
        "terminal", 3, (0, 1),
        TensorGrid((_grid(-box, box, n_terminal[0]), _grid(-box, box, n_terminal[1]))), ((2, T),),
    )
    test = TensorGrid((_grid(-box, box, n_test[0]), _grid(-box, box, n_test[1]), _grid(0.0, T, n_test[2])))
    return ProblemSpec(
        "lqg", 3, ((-box, box), (-box, box), (0.0, T)), 1, interior, (terminal,), test,
        ("mu",), (mu,), (mu_init,), {"T": T},
        data_segments=(interior, terminal),
    )


def _lqg_terms(pb, mode):
    def h1(fld, th, z, a):
        return lqg_residual(_scalar(fld), th["mu"], z[:2], z[2])

    def h2(fld, th, z, a):
        return fld(z)[0] - lqg_terminal(z[:2])

    terms = [Term("interior", "h1", pb.interior, h1), Term("boundary", "h2", pb.boundary[0], h2)]
    if mode == "inverse":
        terms += _data_terms(pb)
    return terms


def _lqg_field(pb):
    mu, T = pb.theta_true[0], pb.constants["T"]
    a, w = (jnp.asarray(v) for v in lqg_mixture_nodes(mu))

    def fld(z):
        val = _mixture_expectation(jnp, a, w, z[:2], z[2], T)
        return jnp.reshape(-jnp.log(val) / mu, (1,))

    return fld


# --------------------------------------------------------------------------
# Navier-Stokes, vorticity / stream-function form with a two-head (psi, omega)
# network:  omega_t + u omega_x + v omega_y = mu Δomega,  omega = -Δpsi,
# u = psi_y, v = -psi_x.  Coordinates are ordered (x, y, t).


def taylor_green(mu, x, y, t, drift=1.0):
    """Decaying Taylor-Green vortex advected with uniform speed ``drift``.

    ``psi = drift*y + F sin(x - drift t) sin y`` with ``F = exp(-2 mu t)``;
    returns ``(psi, omega, u, v)``.  The nonlinear term cancels the drift
    exactly, leaving ``omega_t' = -2 mu omega = mu Δomega``.
    """
    xp = jnp if any(isinstance(a, jax.Array) for a in (x, y, t)) else np
    F = xp.exp(-2.0 * mu * t)
    sx, cx = xp.sin(x - drift * t), xp.cos(x - drift * t)
    sy, cy = xp.sin(y), xp.cos(y)
    psi = drift * y + F * sx * sy
    omega = 2.0 * F * sx * sy
    u = drift + F * sx * cy
    v = -F * cx * sy
    return psi, omega, u, v


def ns_velocity(fld, z):
    """``(u, v) = (psi_y, -psi_x)`` from the psi head of a field."""
    g = jax.jacfwd(lambda p: fld(p)[0])(z)
    return jnp.stack([g[1], -g[0]])


def ns_residuals(fld, mu, z):
    """(momentum, Poisson) residuals of a two-head field at ``z = (x, y, t)``."""
    jet = point_jet(fld, z, order=2)
    psi, om = jet.head(0), jet.head(1)
    u, v = psi.grad[1], -psi.grad[0]
    momentum = om.grad[2] + u * om.grad[0] + v * om.grad[1] - mu * (om.hess_diag[0] + om.hess_diag[1])
    poisson = om.value + psi.hess_diag[0] + psi.hess_diag[1]
    return momentum, poisson


@dataclass(frozen=True, eq=False)
class ObservationTable:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def n(self) -> int:
        return self.t.size

    def bounding_box(self) -> dict:
        return {k: (float(getattr(self, k).min()), float(getattr(self, k).max())) for k in ("x", "y", "t")}

    def points(self) -> np.ndarray:
        """Observation coordinates ordered (x, y, t)."""
        return np.stack([self.x, self.y, self.t], axis=-1)


NS_COLUMNS = ("t", "x", "y", "u", "v")


def load_ns_dataset(path) -> ObservationTable:
    """Read a ``t,x,y,u,v`` CSV of velocity observations."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    if not text.strip():
        raise DatasetError(f"{path}: empty file")
    lines = text.split("\n")
    header = [h.strip() for h in lines[0].split(",")]
    missing = [c for c in NS_COLUMNS if c not in header]
    if missing:
        raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")
    idx = [header.index(c) for c in NS_COLUMNS]
    rows = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != len(header):
            raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(row[i]) for i in idx]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: no observations")
    arr = np.array(rows)
    return ObservationTable(*(arr[:, i].copy() for i in range(5)))


def write_ns_dataset(path, table: ObservationTable):
    """Write observations with round-trip exact (``repr``) float formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(NS_COLUMNS) + "\n")
        for row in zip(table.t, table.x, table.y, table.u, table.v):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def ns_data(table: ObservationTable, x, y, t):
    """Observed ``(u, v)`` at points that appear in ``table`` (exact match)."""
    lookup = {(a, b, c): (uu, vv) for a, b, c, uu, vv in zip(table.x, table.y, table.t, table.u, table.v)}
    out = np.array([lookup[(a, b, c)] for a, b, c in zip(np.ravel(x), np.ravel(y), np.ravel(t))])
    return out[:, 0], out[:, 1]


def taylor_green_table(points, mu=0.01, drift=1.0) -> ObservationTable:
    """Synthetic observations at ``points`` ordered (x, y, t)."""
    x, y, t = points[:, 0], points[:, 1], points[:, 2]
    _, _, u, v = taylor_green(mu, x, y, t, drift)
    return ObservationTable(t.copy(), x.copy(), y.copy(), u, v)


def ns_problem(n_interior=(30, 20, 10), n_boundary=(20, 10, 10), n_test=(98, 48, 20),
               mu=0.01, mu_init=0.05, T=1.9, x_range=(1.0, 8.0), y_range=(-2.0, 2.0),
               dataset=None, drift=1.0):
    """NS benchmark; synthetic Taylor-Green data unless ``dataset`` names a CSV.

    ``n_boundary = (nx, ny, nt)`` sizes the initial slice ``nx x ny`` and the
    four faces (``ny x nt`` and ``nx x nt``).
    """
    (x0, x1), (y0, y1) = x_range, y_range
    gx, gy, gt = _grid(x0, x1, n_interior[0]), _grid(y0, y1, n_interior[1]), _grid(0.0, T, n_interior[2])
    interior = Segment("interior", 3, (0, 1, 2), TensorGrid((gx, gy, gt)))
    test = TensorGrid((_grid(x0, x1, n_test[0]), _grid(y0, y1, n_test[1]), _grid(0.0, T, n_test[2])))
    bx, by, bt = _grid(x0, x1, n_boundary[0]), _grid(y0, y1, n_boundary[1]), _grid(0.0, T, n_boundary[2])
    bounds = ((x0, x1), (y0, y1), (0.0, T))
    constants = {"T": T, "drift": drift, "mode": "synthetic"}

    if dataset is not None and not Path(dataset).exists():
        warnings.warn(f"NS dataset {dataset} not found; using synthetic Taylor-Green observations", stacklevel=2)
        dataset = None
    if dataset is not None:
        table = load_ns_dataset(dataset)
        obs = Segment("observations", 3, scattered=table.points())
        constants["mode"] = "dataset"
        return ProblemSpec("ns", 3, bounds, 2, interior, (obs,), test, ("mu",), (mu,), (mu_init,),
                           constants, data_segments=(), observations=table)

    boundary = (
        Segment("initial", 3, (0, 1), TensorGrid((bx, by)), ((2, 0.0),)),
        Segment("x_start", 3, (1, 2), TensorGrid((by, bt)), ((0, x0),)),
        Segment("x_end", 3, (1, 2), TensorGrid((by, bt)), ((0, x1),)),
        Segment("y_start", 3, (0, 2), TensorGrid((bx, bt)), ((1, y0),)),
        Segment("y_end", 3, (0, 2), TensorGrid((bx, bt)), ((1, y1),)),
    )
    pts = np.concatenate([s.points() for s in (interior, *boundary)])
    table = taylor_green_table(pts, mu, drift)
    return ProblemSpec("ns", 3, bounds, 2, interior, boundary, test, ("mu",), (mu,), (mu_init,),
                       constants, data_segments=(interior,), observations=table)


def _velocity_terms(pb, role, segment):
    u_obs, v_obs = ns_data(pb.observations, *segment.points().T)

    def du(fld, th, z, a):
        return ns_velocity(fld, z)[0] - a

    def dv(fld, th, z, a):
        return ns_velocity(fld, z)[1] - a

    return [
        Term(role, "u", segment, du, u_obs, smooth=False),
        Term(role, "v", segment, dv, v_obs, smooth=False),
    ]


def _ns_terms(pb, mode):
    def momentum(fld, th, z, a):
        return ns_residuals(fld, th["mu"], z)[0]

    def poisson(fld, th, z, a):
        return ns_residuals(fld, th["mu"], z)[1]

    terms = [Term("interior", "momentum", pb.interior, momentum), Term("interior", "poisson", pb.interior, poisson)]
    for seg in pb.boundary:
        terms += _velocity_terms(pb, "boundary", seg)
    if mode == "inverse":
        for seg in pb.data_segments:
            terms += _velocity_terms(pb, "data", seg)
    return terms


def _ns_field(pb):
    if pb.constants.get("mode") != "synthetic":
        raise ValueError("no closed-form field in dataset mode")
    mu, drift = pb.theta_true[0], pb.constants["drift"]

    def fld(z):
        psi, omega, _, _ = taylor_green(mu, z[0], z[1], z[2], drift)
        return jnp.stack([psi, omega])

    return fld


def _ns_target(pb, points):
    if pb.constants.get("mode") == "synthetic":
        _, _, u, v = taylor_green(pb.theta_true[0], points[:, 0], points[:, 1], points[:, 2], pb.constants["drift"])
    else:
        u, v = ns_data(pb.observations, *points.T)
    return np.concatenate([u, v])


# --------------------------------------------------------------------------
# shared helpers and dispatch tables


def _data_terms(pb):
    """``u - u_d`` on every data segment, observations from the exact solution."""
    exact = pb.exact_field()
    out = []
    for seg in pb.data_segments:
        obs = np.asarray(jax.vmap(lambda x: exact(x)[0])(jnp.asarray(seg.points())))

        def h3(fld, th, x, a):
            return fld(x)[0] - a

        out.append(Term("data", "h3", seg, h3, obs, smooth=False))
    return out


_TERM_BUILDERS = {"stiff": _stiff_terms, "helmholtz": _helmholtz_terms, "lqg": _lqg_terms, "ns": _ns_terms}
_EXACT_FIELDS = {
    "stiff": _stiff_field,
    "helmholtz": lambda pb: (lambda x: jnp.reshape(helmholtz_exact(x[0], x[1]), (1,))),
    "lqg": _lqg_field,
    "ns": _ns_field,
}
_TARGETS = {
    "stiff": lambda pb, p: stiff_exact(pb.theta_true[0], pb.constants["mu"], p[:, 0]),
    "helmholtz": lambda pb, p: helmholtz_exact(p[:, 0], p[:, 1]),
    "lqg": lambda pb, p: lqg_exact(pb.theta_true[0], pb.constants["T"], p[:, :2], p[:, 2]),
    "ns": _ns_target,
}

FACTORIES = {"stiff": stiff_problem, "helmholtz": helmholtz_problem, "lqg": lqg_problem, "ns": ns_problem}


def make_problem(name, **overrides) -> ProblemSpec:
    try:
        factory = FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose one of {sorted(FACTORIES)}") from None
    return factory(**overrides)


def with_theta_init(problem: ProblemSpec, theta_init) -> ProblemSpec:
    return replace(problem, theta_init=tuple(theta_init))
