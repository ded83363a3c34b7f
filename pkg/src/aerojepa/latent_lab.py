"""PCA views, latent interpolation, concept-vector walks and the disentanglement matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from .errors import DimensionError
from .geometry import PointCloud
from .model import AeroJEPANet, TokenSet, pool_latent
from .probes import ProbeSuite, probe_predict
from .synthgen import CAMBER_RANGE, THICKNESS_RANGE, DesignParams, contour, integrate_forces

WALK_GAMMAS = np.linspace(-3.0, 3.0, 13)


class LatentPCA(TransformerMixin, BaseEstimator):
    """Centred SVD projection; thin wrapper over :class:`sklearn.decomposition.PCA`."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] <= 1:
            raise ValueError("PCA needs at least two latents")
        if X.shape[0] <= self.n_components:
            raise ValueError(f"need more than {self.n_components} latents, got {X.shape[0]}")
        self.pca_ = PCA(n_components=self.n_components, svd_solver="full").fit(X)
        self.components_ = self.pca_.components_
        self.mean_ = self.pca_.mean_
        self.explained_variance_ratio_ = self.pca_.explained_variance_ratio_
        return self

    def transform(self, X):
        check_is_fitted(self, "pca_")
        return self.pca_.transform(check_array(X, dtype=np.float64))


def pca_project(latents, components: int = 2) -> tuple:
    """Returns ``(projections, explained_variance_ratio, fitted LatentPCA)``."""
    model = LatentPCA(components).fit(latents)
    return model.transform(latents), model.explained_variance_ratio_, model


def latent_interpolate(z_a, z_b, alphas) -> np.ndarray:
    """``(1 - a) z_a + a z_b`` for each ``a``; works for pooled vectors or token arrays."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise DimensionError(f"endpoint shapes differ: {z_a.shape} vs {z_b.shape}")
    a = np.asarray(alphas, dtype=np.float64).reshape((-1,) + (1,) * z_a.ndim)
    return (1.0 - a) * z_a + a * z_b


@dataclass(frozen=True)
class ConceptVector:
    direction: np.ndarray
    source: str

    def __post_init__(self):
        v = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise ValueError("concept direction must be unit norm")
        object.__setattr__(self, "direction", v)


def concept_vector(suite: ProbeSuite, target: str) -> ConceptVector:
    w = suite.models[target].w
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise ValueError(f"probe for {target!r} has zero weights")
    return ConceptVector(w / norm, f"{suite.family}:{target}")


def concept_walk(mu_ctx, v, gammas=WALK_GAMMAS) -> np.ndarray:
    """``mu + gamma * v`` for each gamma, ``(G, d)``."""
    direction = v.direction if isinstance(v, ConceptVector) else np.asarray(v, dtype=np.float64)
    mu = np.asarray(mu_ctx, dtype=np.float64)
    g = np.asarray(gammas, dtype=np.float64)[:, None]
    return mu + g * direction


@dataclass(frozen=True)
class DisentanglementMatrix:
    S: np.ndarray
    targets: tuple

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.S).copy()

    @property
    def off_diagonal(self) -> np.ndarray:
        return self.S[~np.eye(len(self.S), dtype=bool)]

    def diagonal_dominant(self) -> bool:
        return float(np.mean(np.abs(self.diagonal))) > float(np.mean(np.abs(self.off_diagonal)))


def disentanglement(suite: ProbeSuite, sigma_ctx=None, sigma_x=None) -> DisentanglementMatrix:
    """``S[k, j] = (W (v_k / sigma_ctx))_j / sigma_x[j]`` in target std per unit walk.

    ``W`` stacks the standardised probe weights, ``v_k = w_k / |w_k|``.
    ``sigma_ctx`` defaults to the suite's standardisation, ``sigma_x`` to ones.
    """
    W = suite.weight_matrix()
    K = W.shape[0]
    if K < 2:
        raise ValueError("disentanglement needs at least two probes")
    sig = suite.sigma if sigma_ctx is None else np.asarray(sigma_ctx, dtype=np.float64)
    sx = np.ones(K) if sigma_x is None else np.asarray(sigma_x, dtype=np.float64)
    V = W / np.linalg.norm(W, axis=1, keepdims=True)
    S = (V / sig) @ W.T / sx[None, :]
    return DisentanglementMatrix(S, tuple(suite.targets))


def numerical_slopes(suite: ProbeSuite, mu_ctx, sigma_x=None, h: float = 1.0) -> np.ndarray:
    """Two-point walk-and-reprobe estimate of the disentanglement matrix."""
    targets = suite.targets
    K = len(targets)
    sx = np.ones(K) if sigma_x is None else np.asarray(sigma_x, dtype=np.float64)
    S = np.empty((K, K))
    for k, tk in enumerate(targets):
        walk = concept_walk(mu_ctx, concept_vector(suite, tk), [-h, h])
        for j, tj in enumerate(targets):
            y = probe_predict(suite.models[tj], walk)
            S[k, j] = (y[1] - y[0]) / (2.0 * h) / sx[j]
    return S


# -- decoding along latent paths -------------------------------------------------------------------
def mean_token_set(token_sets: Sequence[TokenSet]) -> TokenSet:
    return TokenSet(np.mean([t.tokens for t in token_sets], axis=0),
                    np.mean([t.centroids for t in token_sets], axis=0))


def lift_latent(z, reference: TokenSet) -> TokenSet:
    """Token set whose pooled latent is ``z``: shift every reference token by ``z - pool(reference)``."""
    z = np.asarray(z, dtype=np.float64)
    return TokenSet(reference.tokens + (z - pool_latent(reference)), reference.centroids)


@dataclass(frozen=True)
class TokenLift:
    """Affine map from a pooled latent back to a full token set.

    ``tokens(z) = base + A^T (z - z_bar)`` reshaped to ``(M, d)``, followed by a
    uniform shift that makes the pooled value exactly ``z``. ``A`` is the
    least-squares regression of training token sets on their pooled latents,
    so moving along the training latents reproduces how real token sets vary
    rather than translating every token by the same amount. Centroids stay at
    the reference (mean) positions so the attention neighbourhoods are fixed.
    """

    base: np.ndarray      # (M, d)
    z_bar: np.ndarray     # (d,)
    A: np.ndarray         # (d, M*d)
    centroids: np.ndarray  # (M, coord_dim)

    @classmethod
    def fit(cls, token_sets: Sequence[TokenSet]) -> "TokenLift":
        T = np.stack([t.tokens for t in token_sets])
        n, M, d = T.shape
        Z = T.mean(axis=1)
        base, z_bar = T.mean(axis=0), Z.mean(axis=0)
        A = np.linalg.lstsq(Z - z_bar, (T - base).reshape(n, M * d), rcond=None)[0]
        cen = np.mean([t.centroids for t in token_sets], axis=0)
        return cls(base, z_bar, A, cen)

    @classmethod
    def shift(cls, reference: TokenSet) -> "TokenLift":
        """The uniform-translation lift of :func:`lift_latent`."""
        M, d = reference.tokens.shape
        return cls(reference.tokens, pool_latent(reference), np.zeros((d, M * d)), reference.centroids)

    def tokens(self, z):
        """Lifted tokens for ``z``; accepts arrays or autodiff tensors."""
        M, d = self.base.shape
        if isinstance(z, nx.Tensor):
            t = nx.matmul((z - self.z_bar).reshape(1, d), self.A).reshape(M, d) + self.base
            return t + (z - t.mean(axis=0))
        z = np.asarray(z, dtype=np.float64)
        t = ((z - self.z_bar) @ self.A).reshape(M, d) + self.base
        return t + (z - t.mean(axis=0))

    def __call__(self, z) -> TokenSet:
        return TokenSet(self.tokens(z), self.centroids)


def interpolate_token_sets(a: TokenSet, b: TokenSet, alphas) -> list:
    toks = latent_interpolate(a.tokens, b.tokens, alphas)
    cens = latent_interpolate(a.centroids, b.centroids, alphas)
    return [TokenSet(t, c) for t, c in zip(toks, cens)]


def design_contour(design_suite: ProbeSuite, z, resolution: int = 256) -> PointCloud:
    """Contour of the probe-decoded design (clipped into the generator box)."""
    pred = design_suite.predict(z)
    t = float(np.clip(pred["thickness"], *THICKNESS_RANGE))
    m = float(np.clip(pred["camber"], *CAMBER_RANGE))
    xy = contour(DesignParams(t, m), resolution)[0]
    return PointCloud(xy)


@dataclass
class WalkResult:
    fields: list  # PointCloud per step with the decoded channel(s)
    cl: np.ndarray
    cd_pressure: np.ndarray
    z_pred: np.ndarray  # pooled predicted latents


def decode_walk(net: AeroJEPANet, context_tokens: Sequence[TokenSet], conditions, queries) -> WalkResult:
    """Predict then decode at every path point and integrate the decoded pressure.

    ``conditions`` and ``queries`` are either single values shared by all
    steps or one entry per step. Queries must be closed ordered contours.
    """
    n = len(context_tokens)
    conds = list(conditions) if isinstance(conditions, (list, tuple)) else [conditions] * n
    qs = list(queries) if isinstance(queries, (list, tuple)) else [queries] * n
    if len(conds) != n or len(qs) != n:
        raise ValueError("conditions/queries must match the number of path points")
    fields, cl, cd, zp = [], [], [], []
    for zc, c, q in zip(context_tokens, conds, qs):
        pred = net.predict(zc, c)
        coords = q.coords if isinstance(q, PointCloud) else np.asarray(q, dtype=np.float64)
        vals = net.decode(pred, coords)
        fld = PointCloud(coords, vals, net_channel_names(net))
        alpha = c.alpha if hasattr(c, "alpha") else float(np.asarray(c)[0])
        lift, drag = integrate_forces(fld, alpha)
        fields.append(fld)
        cl.append(lift)
        cd.append(drag)
        zp.append(pool_latent(pred))
    return WalkResult(fields, np.asarray(cl), np.asarray(cd), np.asarray(zp))


def net_channel_names(net: AeroJEPANet) -> tuple:
    if net.cfg.field_channels == 1:
        return ("cp",)
    return tuple(f"f{i}" for i in range(net.cfg.field_channels))
