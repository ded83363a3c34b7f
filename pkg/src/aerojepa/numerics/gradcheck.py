"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a = np.ravel(a)
    b = np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    flat = t.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(t.shape)


def check_gradients(fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                    floor: float = 1e-6) -> dict:
    """Compare autodiff gradients of the scalar ``fn()`` with central differences.

    Returns ``{name: relative_error}`` per parameter. ``fn`` must rebuild the
    graph from the current parameter values on every call. ``floor`` bounds
    the denominator so structurally zero gradients (e.g. key biases under a
    softmax) compare on absolute difference instead of noise over noise.
    """
    for p in params.values():
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    errors = {}
    for k, p in params.items():
        num = numeric_grad(fn, p, eps)
        errors[k] = relative_error(analytic[k], num, floor)
    for p in params.values():
        p.grad = None
    return errors
