"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6
) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of ``inputs``
    on every call.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_grad(lambda: float(loss_fn().data), t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
