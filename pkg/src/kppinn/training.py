"""Full-batch Adam training of a network, and of problem parameters in inverse mode."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from .autodiff import ParamGradient
from .kernel_packet import factor_build_count
from .losses import LossKind, make_loss
from .network import MLPConfig, ParameterVector, init
from .residuals import ProblemSpec

DEFAULT_ITERATIONS = {"stiff": 20_000, "helmholtz": 30_000, "lqg": 30_000, "ns": 30_000}


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_iter: int = 20_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossKind = field(default_factory=lambda: LossKind.kp(0.5))
    mode: str = "forward"
    theta_init: tuple | None = None
    log_every: int = 100
    loss_floor: float = 0.0
    patience: int | None = None
    wall_budget: float | None = None

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.mode not in ("forward", "inverse"):
            raise ValueError(f"mode must be 'forward' or 'inverse', got {self.mode!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass(frozen=True)
class AdamState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x.copy(), np.zeros_like(x), np.zeros_like(x), 0)


def _adam(x, m, v, t, g, lr, b1, b2, eps):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return x - lr * mhat / (jnp.sqrt(vhat) + eps), m, v


def adam_step(state: AdamState, grad, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update on the flat vector ``state.x``."""
    g = grad.flat if isinstance(grad, ParamGradient) else np.asarray(grad, dtype=np.float64)
    if g.shape != state.x.shape:
        raise ValueError(f"gradient shape {g.shape} does not match state {state.x.shape}")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("non-finite gradient entry")
    t = state.t + 1
    x, m, v = _adam(state.x, state.m, state.v, t, g, lr, beta1, beta2, eps)
    return AdamState(np.asarray(x), np.asarray(m), np.asarray(v), t)


@dataclass
class TrainTrace:
    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    params: ParameterVector | None = None
    theta: np.ndarray | None = None
    status: str = "completed"
    message: str = ""
    steps: int = 0
    factor_builds: int = 0

    def record(self, it, loss, theta, wall):
        self.iterations.append(int(it))
        self.losses.append(float(loss))
        self.thetas.append(np.asarray(theta, dtype=np.float64).copy())
        self.wall.append(float(wall))

    def rows(self):
        """``(iter, loss, theta_hat, wall_s)`` tuples; theta joined by ``;``."""
        return [
            (i, l, ";".join(repr(float(v)) for v in th), w)
            for i, l, th, w in zip(self.iterations, self.losses, self.thetas, self.wall)
        ]


def train(problem: ProblemSpec, network: MLPConfig, config: TrainConfig, params=None) -> TrainTrace:
    """Minimize the configured loss; in inverse mode theta is trained jointly.

    The quadratic-form operators are built once before the loop.  The trace
    logs iteration 0, every ``log_every``-th step and the last step; the
    logged loss is evaluated at the parameters before that step's update.
    """
    builds0 = factor_build_count()
    loss_fn = make_loss(problem, network, config.loss, config.mode)
    builds = factor_build_count() - builds0

    inverse = config.mode == "inverse"
    n_net = network.n_params
    if params is None:
        params = init(replace(network, seed=config.seed))
    theta0 = config.theta_init if config.theta_init is not None else problem.theta_init
    theta0 = np.asarray(theta0 if inverse else problem.theta_true, dtype=np.float64)
    x0 = np.concatenate([np.asarray(getattr(params, "values", params), dtype=np.float64), theta0 if inverse else []])

    def objective(x):
        return loss_fn(x[:n_net], x[n_net:] if inverse else jnp.asarray(theta0))

    lr, b1, b2, eps = config.lr, config.beta1, config.beta2, config.eps

    @jax.jit
    def step(x, m, v, t):
        loss, g = jax.value_and_grad(objective)(x)
        x1, m1, v1 = _adam(x, m, v, t, g, lr, b1, b2, eps)
        return loss, jnp.all(jnp.isfinite(g)), x1, m1, v1

    trace = TrainTrace(factor_builds=builds)
    x, m, v = jnp.asarray(x0), jnp.zeros_like(jnp.asarray(x0)), jnp.zeros_like(jnp.asarray(x0))
    best, since_best = np.inf, 0
    start = time.perf_counter()
    for it in range(config.n_iter):
        loss, finite, x1, m1, v1 = step(x, m, v, it + 1)
        loss = float(loss)
        wall = time.perf_counter() - start
        theta_now = np.asarray(x[n_net:]) if inverse else theta0
        if not np.isfinite(loss) or not bool(finite):
            trace.record(it, loss, theta_now, wall)
            trace.status = "diverged"
            trace.message = f"non-finite {'loss' if not np.isfinite(loss) else 'gradient'} at iteration {it}"
            break
        x, m, v = x1, m1, v1
        trace.steps = it + 1
        stop = ""
        if loss < config.loss_floor:
            stop = f"loss below floor at iteration {it}"
        elif config.patience is not None:
            if loss < best * (1 - 1e-6):
                best, since_best = loss, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    stop = f"no improvement for {config.patience} iterations"
        if not stop and config.wall_budget is not None and wall > config.wall_budget:
            trace.status = "budget"
            stop = f"wall-clock budget {config.wall_budget:g}s reached at iteration {it}"
        if it % config.log_every == 0 or it == config.n_iter - 1 or stop:
            trace.record(it, loss, theta_now, wall)
        if stop:
            trace.status = "budget" if trace.status == "budget" else "converged"
            trace.message = stop
            break
    xf = np.asarray(x)
    trace.params = ParameterVector(network, xf[:n_net].copy())
    trace.theta = xf[n_net:].copy() if inverse else theta0.copy()
    return trace
