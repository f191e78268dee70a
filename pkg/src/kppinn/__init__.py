"""Neural PDE solvers trained under RKHS-norm losses evaluated with kernel packets."""

import jax

jax.config.update("jax_enable_x64", True)

from .kernel_core import Grid1D, MaternParams, TensorGrid, kernel_matrix, matern_eval  # noqa: E402
from .kernel_packet import (  # noqa: E402
    apply_inverse,
    build_factor,
    dense_quadratic_form,
    packet_coefficients,
    quadratic_form,
)
from .tensor_algebra import build_tensor_factor, tensor_apply_inverse, tensor_quadratic_form  # noqa: E402

__version__ = "0.1.0"
