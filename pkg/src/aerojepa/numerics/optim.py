"""AdamW with global-norm clipping and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import NumericError


def warmup_cosine_lr(step: int, base_lr: float, total_steps: int, warmup_steps: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp, then cosine decay reaching 0 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    step = min(max(step, 1), total_steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    clip_norm: float = 10.0
    total_steps: int = 1000
    warmup_fraction: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_grad_norm: float = 0.0
    last_lr: float = 0.0

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def current_lr(self, step=None) -> float:
        return warmup_cosine_lr(self.step if step is None else step, self.lr, self.total_steps,
                                self.warmup_steps)


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   state: OptimizerState) -> dict:
    """One AdamW update; returns new parameter arrays (inputs untouched).

    The global gradient norm is clipped first, decay is decoupled from the
    adaptive step, and a non-finite gradient aborts before any state changes.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    clipped, norm = clip_by_global_norm(grads, state.clip_norm)
    state.step += 1
    lr = state.current_lr()
    state.last_grad_norm = norm
    state.last_lr = lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    out = {}
    for name, p in params.items():
        g = clipped.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = p - lr * (update + state.weight_decay * p)
    return out


class AdamW:
    """Stateful wrapper updating ``Tensor`` parameters in place from their ``.grad``."""

    def __init__(self, params: Mapping, state: OptimizerState):
        self.params = dict(params)
        self.state = state

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        new = optimizer_step({k: p.data for k, p in self.params.items()}, grads, self.state)
        for k, p in self.params.items():
            p.data = new[k]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
