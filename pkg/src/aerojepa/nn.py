"""Neural building blocks on top of :mod:`aerojepa.numerics`.

Blocks are post-norm (``LN(x + f(x))``). Parameters are ``Tensor`` leaves
discovered by attribute traversal, in construction order, so names and
initial values are a pure function of the construction seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .errors import DimensionError
from .numerics import Tensor


class Module:
    """Minimal parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter '{k}': expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def _param(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        limit = 0.0 if zero else np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out)) if limit else np.zeros((n_in, n_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        x = nx.as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape[-1]}")
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(np.ones(d))
        self.shift = _param(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return nx.layer_norm(x, self.eps) * self.gain + self.shift


class MLP(Module):
    """Dense layers with GELU between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, zero_last: bool = False):
        sizes = list(sizes)
        self.layers = [
            Linear(a, b, rng, zero=(zero_last and i == len(sizes) - 2))
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nx.gelu(x)
        return x


def fourier_encode(coords, bands: int) -> np.ndarray:
    """Sinusoidal features ``sin(2^j pi x), cos(2^j pi x)`` for ``j < bands``.

    Layout per axis: all sines (ascending frequency) then all cosines; axes
    are concatenated in order. Output width is ``2 * bands * D``.
    """
    x = np.asarray(coords, dtype=np.float64)
    if bands < 1:
        raise ValueError("bands must be >= 1")
    freqs = np.pi * 2.0 ** np.arange(bands)
    arg = x[..., :, None] * freqs
    feats = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)
    return feats.reshape(x.shape[:-1] + (2 * bands * x.shape[-1],))


def knn_indices(queries: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest ``refs`` per query, batched ``(B, Q, D), (B, R, D) -> (B, Q, k)``.

    Sorted by distance; equal distances keep the lower index first.
    """
    if k > refs.shape[1]:
        raise ValueError(f"k={k} exceeds {refs.shape[1]} reference points")
    d2 = np.sum((queries[:, :, None, :] - refs[:, None, :, :]) ** 2, axis=-1)
    if k == refs.shape[1]:
        return np.argsort(d2, axis=-1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    # argpartition may split ties arbitrarily; re-sort on (distance, index)
    sub = np.take_along_axis(d2, part, axis=-1)
    order = np.lexsort((part, sub), axis=-1)
    idx = np.take_along_axis(part, order, axis=-1)
    kth = np.take_along_axis(sub, order, axis=-1)[..., -1:]
    if np.any(np.sum(d2 <= kth, axis=-1) > k):
        full = np.argsort(d2, axis=-1, kind="stable")[..., :k]
        return full
    return idx


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., L, d) -> (..., heads, L, dh)
    *lead, length, d = x.shape
    x = x.reshape(tuple(lead) + (length, heads, d // heads))
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n, n + 2)
    return x.transpose(axes).reshape(tuple(lead) + (length, heads * dh))


@dataclass(frozen=True)
class BlockConfig:
    token_dim: int = 16
    heads: int = 2
    neighbors: int = 8
    fourier_bands: int = 6
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")
        if self.fourier_bands < 1:
            raise ValueError("fourier_bands must be >= 1")


class LocalSelfAttention(Module):
    """Multi-head self-attention restricted to each token's k nearest centroids.

    A linear encoding of the relative centroid offset is added to keys and
    values (point-transformer style). ``mode="gather"`` materialises the
    ``(B, M, k)`` neighbourhoods; ``mode="masked"`` computes dense ``(B, M, M)``
    scores and masks non-neighbours. Both give the same result.
    """

    def __init__(self, d: int, heads: int, neighbors: int, coord_dim: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.heads = heads
        self.neighbors = neighbors
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wpos = Linear(coord_dim, d, rng, bias=False)
        self.wo = Linear(d, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor, centroids: np.ndarray, mode: str = "gather") -> Tensor:
        B, M, d = x.shape
        k = min(self.neighbors, M)
        h, dh = self.heads, d // self.heads
        idx = knn_indices(centroids, centroids, k)
        q = self.wq(x)
        kx = self.wk(x)
        vx = self.wv(x)
        scale = 1.0 / np.sqrt(dh)
        if mode == "gather":
            bidx = np.arange(B)[:, None, None]
            rel = centroids[bidx, idx] - centroids[:, :, None, :]  # (B, M, k, D)
            pos = self.wpos(rel)
            keys = nx.gather_rows(kx, idx) + pos  # (B, M, k, d)
            vals = nx.gather_rows(vx, idx) + pos
            qh = q.reshape(B, M, h, 1, dh)
            kh = keys.reshape(B, M, k, h, dh).transpose(0, 1, 3, 4, 2)  # (B, M, h, dh, k)
            vh = vals.reshape(B, M, k, h, dh).transpose(0, 1, 3, 2, 4)  # (B, M, h, k, dh)
            attn = nx.softmax(nx.matmul(qh, kh) * scale, axis=-1)  # (B, M, h, 1, k)
            out = nx.matmul(attn, vh).reshape(B, M, d)
        elif mode == "masked":
            mask = np.zeros((B, M, M), dtype=bool)
            np.put_along_axis(mask, idx, True, axis=-1)
            rel = centroids[:, None, :, :] - centroids[:, :, None, :]  # (B, M, M, D): c_j - c_i
            pos = self.wpos(rel)
            keys = kx.reshape(B, 1, M, d) + pos
            vals = vx.reshape(B, 1, M, d) + pos
            qh = q.reshape(B, M, h, 1, dh)
            kh = keys.reshape(B, M, M, h, dh).transpose(0, 1, 3, 4, 2)
            vh = vals.reshape(B, M, M, h, dh).transpose(0, 1, 3, 2, 4)
            attn = nx.softmax(nx.matmul(qh, kh) * scale, axis=-1, mask=mask[:, :, None, None, :])
            out = nx.matmul(attn, vh).reshape(B, M, d)
        else:
            raise ValueError(f"unknown attention mode {mode!r}")
        return self.norm(x + self.wo(out))


class CrossAttention(Module):
    """Scaled dot-product attention from queries to a context token set."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.heads = heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        x, context = nx.as_tensor(x), nx.as_tensor(context)
        if x.shape[-1] != context.shape[-1]:
            raise DimensionError(f"query dim {x.shape[-1]} != context dim {context.shape[-1]}")
        d = x.shape[-1]
        dh = d // self.heads
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(context), self.heads)
        v = _split_heads(self.wv(context), self.heads)
        scores = nx.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        out = _merge_heads(nx.matmul(nx.softmax(scores, axis=-1), v))
        return self.norm(x + self.wo(out))


class AdaModulation(Module):
    """Condition-driven scale/shift/gate applied residually.

    ``x + gate * ((1 + scale) * LN(x) + shift)`` with ``(scale, shift, gate)``
    a linear map of the condition embedding. The map is zero-initialised, so
    the block is exactly the identity until the first update.
    """

    def __init__(self, d: int, cond_dim: int, rng: np.random.Generator):
        self.proj = Linear(cond_dim, 3 * d, rng, zero=True)
        self.d = d

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        d = self.d
        mod = self.proj(cond)  # (B, 3d)
        B = mod.shape[0]
        scale = mod[:, 0:d].reshape(B, 1, d)
        shift = mod[:, d:2 * d].reshape(B, 1, d)
        gate = mod[:, 2 * d:3 * d].reshape(B, 1, d)
        return x + gate * ((1.0 + scale) * nx.layer_norm(x) + shift)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.fc2(nx.gelu(self.fc1(x))))


def local_self_attention(block: LocalSelfAttention, tokens: Tensor, centroids: np.ndarray) -> Tensor:
    return block(tokens, centroids)


def cross_attention(block: CrossAttention, queries: Tensor, context: Tensor) -> Tensor:
    return block(queries, context)


def ada_modulate(block: AdaModulation, tokens: Tensor, condition: Tensor) -> Tensor:
    return block(tokens, condition)
