"""Fully connected tanh networks over a flat parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import jax.numpy as jnp
import numpy as np

from .autodiff import jet_eval

# default architectures per benchmark: (input_dim, hidden widths, output_dim)
DEFAULT_ARCHITECTURES = {
    "stiff": (1, (50, 50, 50), 1),
    "helmholtz": (2, (50, 50, 50, 50), 1),
    "lqg": (3, (64, 64, 64), 1),
    "ns": (3, (64, 64, 64, 64), 2),
}


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    hidden: tuple = (50, 50, 50)
    output_dim: int = 1
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.output_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation != "tanh":
            raise ValueError(f"only the tanh activation is supported, got {self.activation!r}")

    @classmethod
    def for_problem(cls, name, seed=0, hidden=None):
        d, h, m = DEFAULT_ARCHITECTURES[name]
        return cls(d, h if hidden is None else tuple(hidden), m, seed=seed)

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def layout(self) -> tuple:
        """Per layer ``(w_offset, (fan_in, fan_out), b_offset, fan_out)``."""
        out, off = [], 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w_off = off
            off += fan_in * fan_out
            out.append((w_off, (fan_in, fan_out), off, fan_out))
            off += fan_out
        return tuple(out)

    @property
    def n_params(self) -> int:
        w_off, shape, b_off, fan_out = self.layout[-1]
        return b_off + fan_out


@dataclass(frozen=True, eq=False)
class ParameterVector:
    config: MLPConfig
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (self.config.n_params,):
            raise ValueError(f"expected {self.config.n_params} parameters, got {self.values.shape}")

    def layers(self):
        """(W, b) pairs as views into the flat vector."""
        return unflatten(self.config, self.values)


def init(config: MLPConfig) -> ParameterVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    values = np.zeros(config.n_params)
    for w_off, (fan_in, fan_out), _, _ in config.layout:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        values[w_off : w_off + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
    return ParameterVector(config, values)


def unflatten(config: MLPConfig, flat):
    return [
        (flat[w_off : w_off + shape[0] * shape[1]].reshape(shape), flat[b_off : b_off + n_b])
        for w_off, shape, b_off, n_b in config.layout
    ]


def apply_mlp(config: MLPConfig, flat, x):
    """Traceable network evaluation; ``x`` is ``(d,)`` or ``(N, d)``."""
    layers = unflatten(config, flat)
    h = x
    for W, b in layers[:-1]:
        h = jnp.tanh(h @ W + b)
    W, b = layers[-1]
    return h @ W + b


def _as_flat(params):
    return params.values if isinstance(params, ParameterVector) else params


def forward(config: MLPConfig, params, x) -> np.ndarray:
    flat = np.asarray(_as_flat(params), dtype=np.float64)
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite network parameter")
    return np.asarray(apply_mlp(config, jnp.asarray(flat), jnp.asarray(x, dtype=jnp.float64)))


def forward_jet(config: MLPConfig, params, x, order: int = 2, mixed: bool = False):
    """One :class:`Scalar2Jet` per output head."""
    flat = jnp.asarray(_as_flat(params))
    jet = jet_eval(lambda p, z: apply_mlp(config, p, z), flat, jnp.asarray(x, dtype=jnp.float64), order, mixed)
    return [jet.head(k) for k in range(config.output_dim)]
