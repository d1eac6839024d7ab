"""Central-difference gradient oracle.

Independent of the reverse-mode engine: it only ever calls the function
under test forward, perturbing one coordinate at a time. Gradient-check
tests compare ``backward`` against this at 64-bit precision.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[Tensor], Tensor], params: Tensor, h: float = 1e-5) -> Tensor:
    """Per-coordinate central differences (f(p+h*e_i) - f(p-h*e_i)) / 2h.

    ``f`` must be deterministic and return a scalar tensor. The parameter
    tensor is restored to its original values before returning.
    """
    flat = params.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(params).item()
            flat[i] = orig - h
            lo = f(params).item()
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad.reshape(params.shape))
