"""Tokenizer, context/target encoders, condition-modulated predictor and implicit decoder.

Batched internals work on arrays of shape ``(B, N, D)``; the public single-case
methods accept :class:`PointCloud` inputs and return :class:`TokenSet` values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .geometry import PointCloud, fps
from .nn import (
    AdaModulation,
    CrossAttention,
    FeedForward,
    Linear,
    LocalSelfAttention,
    MLP,
    Module,
    fourier_encode,
    knn_indices,
)
from .numerics import Tensor
from .synthgen import ALPHA_RANGE, MACH_RANGE


@dataclass(frozen=True)
class ModelConfig:
    n_tokens: int = 32
    token_dim: int = 16
    heads: int = 2
    encoder_depth: int = 3
    predictor_depth: int = 3
    decoder_depth: int = 2
    decoder_hidden: tuple = (64, 64)
    fourier_bands: int = 4
    tokenize_neighbors: int = 16
    attn_neighbors: int = 8
    coord_dim: int = 2
    field_channels: int = 1
    cond_dim: int = 2
    cond_hidden: int = 16
    mlp_ratio: int = 2
    use_sdf: bool = False

    def __post_init__(self):
        for name in ("n_tokens", "token_dim", "heads", "encoder_depth", "predictor_depth",
                     "decoder_depth", "fourier_bands", "tokenize_neighbors", "attn_neighbors",
                     "field_channels", "cond_dim", "cond_hidden", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")
        if self.coord_dim not in (2, 3):
            raise ValueError("coord_dim must be 2 or 3")
        object.__setattr__(self, "decoder_hidden", tuple(int(h) for h in self.decoder_hidden))

    @property
    def fourier_dim(self) -> int:
        return 2 * self.fourier_bands * self.coord_dim

    @property
    def geometry_features(self) -> int:
        # absolute coordinates, plus the signed distance when enabled
        return self.coord_dim + int(self.use_sdf)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(n_tokens=3072, token_dim=64, heads=4, encoder_depth=6, predictor_depth=6,
                         decoder_depth=2, decoder_hidden=(256, 256), fourier_bands=8),
}


@dataclass
class TokenSet:
    """``tokens`` is ``(M, d)`` (or ``(B, M, d)``); ``centroids`` matches on the leading axes."""

    tokens: np.ndarray
    centroids: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.tokens.shape[:-1] != self.centroids.shape[:-1]:
            raise DimensionError(f"tokens {self.tokens.shape} and centroids {self.centroids.shape} disagree")
        if not np.all(np.isfinite(self.tokens)):
            raise ContractError("token set holds non-finite values")

    @property
    def shape(self):
        return self.tokens.shape


def pool_latent(tokens) -> np.ndarray:
    """Token mean: ``(M, d) -> (d,)`` or ``(B, M, d) -> (B, d)``."""
    arr = tokens.tokens if isinstance(tokens, TokenSet) else np.asarray(tokens, dtype=np.float64)
    return arr.mean(axis=-2)


def normalize_conditions(cond) -> np.ndarray:
    """Map (alpha, mach) from their generator ranges onto [-1, 1]."""
    c = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    lo = np.array([ALPHA_RANGE[0], MACH_RANGE[0]])[: c.shape[1]]
    hi = np.array([ALPHA_RANGE[1], MACH_RANGE[1]])[: c.shape[1]]
    return 2.0 * (c - lo) / (hi - lo) - 1.0


def select_centroids(points: np.ndarray, m: int) -> np.ndarray:
    """FPS centroid indices from a canonical start, in a canonical order.

    The start is the point farthest from the cloud mean (lowest index on ties).
    In 2-D the picks are then sorted by polar angle about the mean, so clouds
    of similar shape yield spatially aligned token orders.
    """
    if m > len(points):
        raise ValueError(f"cloud has {len(points)} points, fewer than the {m} tokens requested")
    center = points.mean(axis=0)
    start = int(np.argmax(np.sum((points - center) ** 2, axis=1)))
    idx = fps(points, m, start=start)
    if points.shape[1] == 2:
        rel = points[idx] - center
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        idx = idx[np.argsort(ang, kind="stable")]
    return idx


class Tokenizer(Module):
    """One message-passing round from points to centroid tokens.

    Each centroid aggregates ``MLP([p_j - c_i, f_j])`` over its k nearest
    points by max-pooling; a linear Fourier embedding of the centroid is added.
    """

    def __init__(self, cfg: ModelConfig, n_features: int, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.token_dim
        self.message = MLP([cfg.coord_dim + n_features, d, d], rng)
        self.pos = Linear(cfg.fourier_dim, d, rng)
        self.n_features = n_features

    def centroids(self, points: np.ndarray) -> np.ndarray:
        idx = np.stack([select_centroids(p, self.cfg.n_tokens) for p in points])
        return np.take_along_axis(points, idx[..., None], axis=1)

    def aggregate(self, points: np.ndarray, features, centroids: np.ndarray) -> Tensor:
        B, N, D = points.shape
        k = min(self.cfg.tokenize_neighbors, N)
        nbr = knn_indices(centroids, points, k)  # (B, M, k)
        bidx = np.arange(B)[:, None, None]
        rel = points[bidx, nbr] - centroids[:, :, None, :]
        if self.n_features:
            f = nx.gather_rows(nx.as_tensor(features), nbr)
            inp = nx.concat([Tensor(rel), f], axis=-1)
        else:
            inp = Tensor(rel)
        return nx.max_(self.message(inp), axis=2)

    def __call__(self, points: np.ndarray, features, centroids: Optional[np.ndarray] = None):
        if centroids is None:
            centroids = self.centroids(points)
        tok = self.aggregate(points, features, centroids) + self.pos(fourier_encode(centroids, self.cfg.fourier_bands))
        return tok, centroids


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, n_features: int, rng: np.random.Generator):
        d = cfg.token_dim
        self.tokenizer = Tokenizer(cfg, n_features, rng)
        self.attn = [LocalSelfAttention(d, cfg.heads, cfg.attn_neighbors, cfg.coord_dim, rng)
                     for _ in range(cfg.encoder_depth)]
        self.ff = [FeedForward(d, cfg.mlp_ratio * d, rng) for _ in range(cfg.encoder_depth)]

    def __call__(self, points: np.ndarray, features, centroids=None):
        x, cen = self.tokenizer(points, features, centroids)
        for attn, ff in zip(self.attn, self.ff):
            x = ff(attn(x, cen))
        return x, cen


class Predictor(Module):
    """Latent queries at the context centroids; each block modulates, self-attends locally,
    then cross-attends to the context tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.token_dim
        self.query = nx.Tensor(rng.normal(0.0, 0.02, size=(d,)), requires_grad=True)
        self.query_pos = Linear(cfg.fourier_dim, d, rng)
        self.cond = MLP([cfg.cond_dim, cfg.cond_hidden, cfg.cond_hidden], rng)
        self.mod = [AdaModulation(d, cfg.cond_hidden, rng) for _ in range(cfg.predictor_depth)]
        self.attn = [LocalSelfAttention(d, cfg.heads, cfg.attn_neighbors, cfg.coord_dim, rng)
                     for _ in range(cfg.predictor_depth)]
        self.cross = [CrossAttention(d, cfg.heads, rng) for _ in range(cfg.predictor_depth)]
        self.ff = [FeedForward(d, cfg.mlp_ratio * d, rng) for _ in range(cfg.predictor_depth)]
        self.bands = cfg.fourier_bands

    def __call__(self, z_ctx, centroids: np.ndarray, cond) -> Tensor:
        z_ctx = nx.as_tensor(z_ctx)
        e = nx.gelu(self.cond(nx.as_tensor(cond)))
        q = self.query_pos(fourier_encode(centroids, self.bands)) + self.query
        for mod, attn, cross, ff in zip(self.mod, self.attn, self.cross, self.ff):
            q = mod(q, e)
            q = attn(q, centroids)
            q = cross(q, z_ctx)
            q = ff(q)
        return q


class Decoder(Module):
    """Implicit field decoder: Fourier-encoded query cross-attends to the tokens, then an MLP head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.token_dim
        n_in = cfg.fourier_dim + int(cfg.use_sdf)
        self.inp = Linear(n_in, d, rng)
        self.cross = [CrossAttention(d, cfg.heads, rng) for _ in range(cfg.decoder_depth)]
        self.ff = [FeedForward(d, cfg.mlp_ratio * d, rng) for _ in range(cfg.decoder_depth)]
        self.head = MLP([d + n_in, *cfg.decoder_hidden, cfg.field_channels], rng)
        self.bands = cfg.fourier_bands

    def query_features(self, queries: np.ndarray, sdf=None) -> np.ndarray:
        f = fourier_encode(queries, self.bands)
        if sdf is not None:
            f = np.concatenate([f, np.asarray(sdf)[..., None]], axis=-1)
        return f

    def __call__(self, tokens, queries: np.ndarray, sdf=None) -> Tensor:
        tokens = nx.as_tensor(tokens)
        f = self.query_features(queries, sdf)
        h = self.inp(f)
        for cross, ff in zip(self.cross, self.ff):
            h = ff(cross(h, tokens))
        return self.head(nx.concat([h, Tensor(f)], axis=-1))


class AeroJEPANet(Module):
    """All trainable parts plus the (non-trainable) field normalisation."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.context_encoder = Encoder(cfg, cfg.geometry_features, rng)
        self.target_encoder = Encoder(cfg, cfg.coord_dim + cfg.field_channels, rng)
        self.predictor = Predictor(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.field_mean = np.zeros(cfg.field_channels)
        self.field_std = np.ones(cfg.field_channels)
        self.calls = {"encode_context": 0, "predict": 0, "decode": 0}

    # -- normalisation -------------------------------------------------------------------
    def buffers(self) -> dict:
        return {"field_mean": self.field_mean.copy(), "field_std": self.field_std.copy()}

    def set_buffers(self, buffers: dict) -> None:
        for key in ("field_mean", "field_std"):
            arr = np.asarray(buffers[key], dtype=np.float64)
            if arr.shape != (self.cfg.field_channels,):
                raise DimensionError(f"buffer '{key}': expected {(self.cfg.field_channels,)}, got {arr.shape}")
            setattr(self, key, arr.copy())

    def normalize_field(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.field_mean) / self.field_std

    def denormalize_field(self, values) -> np.ndarray:
        return np.asarray(values) * self.field_std + self.field_mean

    # -- batched graph builders ------------------------------------------------------------
    def geometry_inputs(self, points: np.ndarray, sdf=None) -> np.ndarray:
        feats = points
        if self.cfg.use_sdf:
            if sdf is None:
                sdf = np.zeros(points.shape[:-1])
            feats = np.concatenate([points, np.asarray(sdf)[..., None]], axis=-1)
        return feats

    def context_tokens(self, points: np.ndarray, sdf=None):
        return self.context_encoder(points, self.geometry_inputs(points, sdf))

    def target_tokens(self, points: np.ndarray, values_norm: np.ndarray):
        feats = np.concatenate([points, values_norm], axis=-1)
        return self.target_encoder(points, feats)

    def predicted_tokens(self, z_ctx, centroids: np.ndarray, cond) -> Tensor:
        return self.predictor(z_ctx, centroids, normalize_conditions(cond))

    def decoded(self, tokens, queries: np.ndarray, sdf=None) -> Tensor:
        return self.decoder(tokens, queries, sdf)

    # -- single-case inference API -----------------------------------------------------------
    def encode_context(self, geometry: PointCloud) -> TokenSet:
        """Context tokens from geometry alone. Field channels in the input are rejected."""
        if geometry.features is not None and set(geometry.feature_names) - {"sdf"}:
            raise ContractError("context encoder input must not carry field channels "
                                f"(got {geometry.feature_names})")
        sdf = None
        if geometry.features is not None:
            sdf = geometry.features[:, list(geometry.feature_names).index("sdf")]
        self.calls["encode_context"] += 1
        with nx.no_grad():
            tok, cen = self.context_tokens(geometry.coords[None], None if sdf is None else sdf[None])
        return TokenSet(tok.data[0], cen[0])

    def encode_target(self, field: PointCloud) -> TokenSet:
        if field.features is None or field.n_features != self.cfg.field_channels:
            raise ContractError(f"target encoder needs {self.cfg.field_channels} field channel(s)")
        with nx.no_grad():
            tok, cen = self.target_tokens(field.coords[None], self.normalize_field(field.features)[None])
        return TokenSet(tok.data[0], cen[0])

    def predict(self, z_ctx: TokenSet, conditions) -> TokenSet:
        cond = conditions.as_array() if hasattr(conditions, "as_array") else np.asarray(conditions, float)
        self.calls["predict"] += 1
        with nx.no_grad():
            out = self.predicted_tokens(z_ctx.tokens[None], z_ctx.centroids[None], cond[None])
        return TokenSet(out.data[0], z_ctx.centroids)

    def decode(self, z_pred: TokenSet, queries, sdf=None) -> np.ndarray:
        """Field values (physical units) at query coordinates, ``(Q, channels)``."""
        q = queries.coords if isinstance(queries, PointCloud) else np.asarray(queries, dtype=np.float64)
        self.calls["decode"] += 1
        with nx.no_grad():
            out = self.decoded(z_pred.tokens[None], q[None], None if sdf is None else np.asarray(sdf)[None])
        return self.denormalize_field(out.data[0])


def tokenize(net: AeroJEPANet, cloud: PointCloud, which: str = "context") -> TokenSet:
    """Tokenize and encode one cloud with the context or target encoder."""
    if which == "context":
        return net.encode_context(cloud)
    if which == "target":
        return net.encode_target(cloud)
    raise ValueError(f"which must be 'context' or 'target', got {which!r}")
