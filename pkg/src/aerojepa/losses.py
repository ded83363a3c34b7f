"""Latent alignment, field reconstruction and the SIGReg Gaussianity regulariser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import Tensor

WORKFLOWS = ("coupled", "decoupled")

# quadrature for the Epps-Pulley integral; the integrand is even in t, so
# integrate over [0, T_MAX] and double
T_MAX = 5.0
N_KNOTS = 17


@dataclass(frozen=True)
class LossWeights:
    lambda_lat: float = 1.0
    lambda_rec: float = 1.0
    lambda_sig: float = 0.01
    workflow: str = "coupled"

    def __post_init__(self):
        if min(self.lambda_lat, self.lambda_rec, self.lambda_sig) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.workflow not in WORKFLOWS:
            raise ValueError(f"workflow must be one of {WORKFLOWS}")


def _mse(a, b, what: str) -> Tensor:
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")
    diff = a - b
    return (diff * diff).mean()


def latent_loss(z_pred, z_target) -> Tensor:
    """Mean squared difference over every token entry."""
    return _mse(z_pred, z_target, "latent_loss")


def recon_loss(decoded, truth) -> Tensor:
    """Mean squared error over queries and supervised channels."""
    return _mse(decoded, truth, "recon_loss")


def _quadrature():
    t = np.linspace(0.0, T_MAX, N_KNOTS)
    w = np.full(N_KNOTS, t[1] - t[0])
    w[[0, -1]] *= 0.5
    # symmetric extension to [-T, T] and the Gaussian weight exp(-t^2 / 2)
    return t, 2.0 * w * np.exp(-0.5 * t**2)


def projection_directions(d: int, n_projections: int, seed) -> np.ndarray:
    """``(d, P)`` matrix of unit columns drawn uniformly on the sphere."""
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    u = np.random.default_rng(seed).standard_normal((d, n_projections))
    return u / np.linalg.norm(u, axis=0, keepdims=True)


def sigreg_loss(z, n_projections: int = 64, seed=0, directions=None) -> Tensor:
    """Sliced Epps-Pulley statistic plus first/second moment penalties.

    ``z`` is ``(n, d)`` (pooled latents) or ``(n, M, d)`` (flattened to tokens).
    For every random unit direction ``u`` the projected sample ``x = z u`` is
    compared to N(0, 1) through ``n * int |phi_n(t) - exp(-t^2/2)|^2 w(t) dt``
    with ``w(t) = exp(-t^2/2)``. The result is the mean over directions of that
    statistic plus ``mean(x)^2 + (var(x) - 1)^2``.
    """
    z = nx.as_tensor(z)
    if z.ndim == 3:
        z = z.reshape(z.shape[0] * z.shape[1], z.shape[2])
    if z.ndim != 2:
        raise DimensionError(f"sigreg_loss expects (n, d) or (n, M, d), got {z.shape}")
    n, d = z.shape
    if n < 2:
        raise ValueError("sigreg_loss needs a batch of at least 2 latents")
    u = projection_directions(d, n_projections, seed) if directions is None else np.asarray(directions)
    x = nx.matmul(z, u)  # (n, P)
    t, w = _quadrature()
    tx = x.reshape(n, u.shape[1], 1) * t  # (n, P, T)
    re = nx.cos(tx).mean(axis=0) - np.exp(-0.5 * t**2)
    im = nx.sin(tx).mean(axis=0)
    ep = ((re * re + im * im) * w).sum(axis=-1) * float(n)  # (P,)
    mu = x.mean(axis=0)
    xc = x - mu
    var = (xc * xc).mean(axis=0)
    moments = mu * mu + (var - 1.0) * (var - 1.0)
    return (ep + moments).mean()


def sigreg_statistic(z, n_projections: int = 64, seed=0) -> float:
    """Value of :func:`sigreg_loss` without recording a graph."""
    with nx.no_grad():
        return float(sigreg_loss(np.asarray(z, dtype=np.float64), n_projections, seed).data)


def sigreg_null_threshold(n: int, d: int, n_projections: int = 64, quantile: float = 0.95,
                          trials: int = 200, seed=0) -> float:
    """Monte-Carlo quantile of the statistic for ``n`` i.i.d. standard-normal ``d``-vectors.

    Each trial draws a fresh sample and fresh projection directions.
    """
    ss = np.random.SeedSequence(seed)
    stats = []
    for child in ss.spawn(trials):
        s_data, s_proj = child.spawn(2)
        z = np.random.default_rng(s_data).standard_normal((n, d))
        stats.append(sigreg_statistic(z, n_projections, s_proj))
    return float(np.quantile(stats, quantile))


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of ``lat``, ``rec`` and ``sig`` parts for the declared workflow.

    Coupled uses all three; decoupled (latent stage) uses ``lat`` and ``sig``
    and ignores any ``rec`` entry.
    """
    needed = ("lat", "rec", "sig") if weights.workflow == "coupled" else ("lat", "sig")
    missing = [k for k in needed if k not in parts or parts[k] is None]
    if missing:
        raise ValueError(f"{weights.workflow} workflow needs loss parts {missing}")
    total = weights.lambda_lat * parts["lat"] + weights.lambda_sig * parts["sig"]
    if weights.workflow == "coupled":
        total = total + weights.lambda_rec * parts["rec"]
    return total
