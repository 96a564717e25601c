"""Central finite-difference gradient checking (64-bit mode)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision, record


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param`` in place."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn().data)
        flat[i] = orig - step
        lo = float(fn().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def gradient_pairs(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """(tape gradient, finite-difference gradient) of the scalar ``fn()`` per parameter.

    ``params`` must already hold float64 data; entries are keyed by name
    or position.
    """
    with precision(np.float64):
        for p in params:
            p.grad = None
        with record():
            loss = fn()
            backward(loss)
        pairs = {}
        for i, p in enumerate(params):
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            pairs[p.name or str(i)] = (analytic, numerical_grad(fn, p, step))
    return pairs


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients, per parameter."""
    return {k: relative_error(a, n) for k, (a, n) in gradient_pairs(fn, params, step).items()}
