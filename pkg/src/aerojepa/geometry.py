"""Point clouds, farthest point sampling, signed distances and triple sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError


@dataclass(frozen=True)
class PointCloud:
    """Coordinates plus optional per-point feature channels.

    ``coords`` is ``(N, D)``; ``features`` is ``(N, F)`` or ``None``.
    ``feature_names`` labels the feature columns (e.g. ``("cp",)``).
    """

    coords: np.ndarray
    features: Optional[np.ndarray] = None
    feature_names: tuple = field(default=())

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] < 1 or coords.shape[1] not in (2, 3):
            raise GeometryError(f"coords must be (N>=1, 2|3), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise GeometryError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)
        feats = self.features
        if feats is not None:
            feats = np.asarray(feats, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.shape[0] != coords.shape[0]:
                raise GeometryError(
                    f"feature rows ({feats.shape[0]}) do not align with coords ({coords.shape[0]})"
                )
            object.__setattr__(self, "features", feats)
            names = tuple(self.feature_names) or tuple(f"f{i}" for i in range(feats.shape[1]))
            if len(names) != feats.shape[1]:
                raise GeometryError("feature_names length does not match feature columns")
            object.__setattr__(self, "feature_names", names)
        elif self.feature_names:
            raise GeometryError("feature_names given without features")

    def __len__(self):
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n_features(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return PointCloud(self.coords[idx], feats, self.feature_names if feats is not None else ())

    def with_features(self, features, names) -> "PointCloud":
        return PointCloud(self.coords, features, tuple(names))


def _coords_of(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.coords
    arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2:
        raise GeometryError(f"expected (N, D) coordinates, got shape {arr.shape}")
    return arr


def fps(cloud, k: int, seed=None, start: Optional[int] = None, allowed=None) -> np.ndarray:
    """Farthest point sampling.

    The first index is ``start`` if given, otherwise drawn from
    ``np.random.default_rng(seed)`` among the allowed points. Each later pick
    maximises the squared distance to the already-selected set; ties go to the
    lowest index. ``allowed`` is an optional boolean mask restricting the pool.
    """
    pts = _coords_of(cloud)
    n = pts.shape[0]
    pool = np.ones(n, dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool).copy()
    n_pool = int(pool.sum())
    if not 1 <= k <= n_pool:
        raise ValueError(f"cannot sample k={k} points from a pool of {n_pool}")
    if start is None:
        candidates = np.flatnonzero(pool)
        start = int(candidates[np.random.default_rng(seed).integers(n_pool)])
    elif not pool[start]:
        raise ValueError(f"start index {start} is not in the allowed pool")
    sel = np.empty(k, dtype=np.int64)
    sel[0] = start
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    dist[~pool] = -1.0
    dist[start] = -1.0
    for i in range(1, k):
        j = int(np.argmax(dist))
        sel[i] = j
        np.minimum(dist, np.sum((pts - pts[j]) ** 2, axis=1), out=dist, where=dist >= 0.0)
        dist[j] = -1.0
    return sel


def fps_bruteforce(cloud, k: int, start: int) -> np.ndarray:
    """O(N^2 k) reference: recompute every candidate's min distance at each step."""
    pts = _coords_of(cloud)
    n = pts.shape[0]
    sel = [int(start)]
    for _ in range(1, k):
        best, best_d = -1, -1.0
        for c in range(n):
            if c in sel:
                continue
            dmin = min(float(np.sum((pts[c] - pts[s]) ** 2)) for s in sel)
            if dmin > best_d:
                best, best_d = c, dmin
        sel.append(best)
    return np.asarray(sel, dtype=np.int64)


def _check_contour(verts: np.ndarray) -> None:
    if verts.shape[1] != 2:
        raise GeometryError("signed distance is implemented for closed 2-D contours only")
    if verts.shape[0] < 3:
        raise GeometryError("a closed contour needs at least 3 vertices")
    seg = np.roll(verts, -1, axis=0) - verts
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(lengths == 0.0):
        raise GeometryError("contour has repeated consecutive vertices")
    if lengths[-1] > 10.0 * lengths[:-1].max():
        raise GeometryError("contour appears open: closing segment is far longer than any other")
    if abs(signed_area(verts)) < 1e-14 * lengths.sum() ** 2:
        raise GeometryError("contour encloses zero area")


def signed_area(verts) -> float:
    """Shoelace area; positive for counter-clockwise ordering."""
    v = np.asarray(verts, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def sdf(points, boundary) -> np.ndarray:
    """Signed distance from ``points`` to a closed, ordered 2-D contour.

    Negative inside, positive outside, exactly zero on a vertex. Accepts a
    single point ``(2,)`` (returns a scalar array) or ``(P, 2)``.
    """
    verts = _coords_of(boundary)
    _check_contour(verts)
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    a = verts
    b = np.roll(verts, -1, axis=0)
    ab = b - a
    ab2 = np.sum(ab**2, axis=1)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab[None], axis=2) / ab2[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(np.min(np.sum((p[:, None, :] - closest) ** 2, axis=2), axis=1))
    # even-odd rule with a ray towards +x
    py = p[:, 1:2]
    ay, by = a[None, :, 1], b[None, :, 1]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = a[None, :, 0] + (py - ay) * (b[None, :, 0] - a[None, :, 0]) / (by - ay)
    crossings = np.sum(straddle & (p[:, 0:1] < x_cross), axis=1)
    inside = crossings % 2 == 1
    out = np.where(inside, -dist, dist)
    out[dist == 0.0] = 0.0
    return out[0] if single else out


@dataclass(frozen=True)
class SampleTriple:
    """Independently drawn context / target / query subsets of one case."""

    context: PointCloud
    target: PointCloud
    query: PointCloud
    context_idx: np.ndarray
    target_idx: np.ndarray
    query_idx: np.ndarray


def _shares_index_space(a: PointCloud, b: PointCloud) -> bool:
    return len(a) == len(b) and np.array_equal(a.coords, b.coords)


def sample_triple(
    source_geometry: PointCloud,
    source_field: PointCloud,
    sizes: Sequence[int],
    seed=None,
) -> SampleTriple:
    """Draw context (from geometry), target and query (from the field) by FPS restarts.

    Each draw starts at its own seeded point. Earlier picks are excluded from
    later draws whenever enough points remain, so the three index sets are
    pairwise disjoint when the source holds at least ``sum(sizes)`` points.
    """
    n_c, n_t, n_q = (int(s) for s in sizes)
    if min(n_c, n_t, n_q) < 1:
        raise ValueError("sample sizes must each be >= 1")
    if source_field.features is None:
        raise ValueError("source_field must carry field channels")
    n_geo, n_fld = len(source_geometry), len(source_field)
    if n_c > n_geo or n_t > n_fld or n_q > n_fld:
        raise ValueError(
            f"requested sizes {(n_c, n_t, n_q)} exceed available points (geometry {n_geo}, field {n_fld})"
        )
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_ctx, s_tgt, s_qry = ss.spawn(3)
    shared = _shares_index_space(source_geometry, source_field)

    ctx_idx = fps(source_geometry, n_c, seed=s_ctx)

    used = np.zeros(n_fld, dtype=bool)
    if shared:
        used[ctx_idx] = True
    allowed = ~used if (~used).sum() >= n_t else np.ones(n_fld, dtype=bool)
    tgt_idx = fps(source_field, n_t, seed=s_tgt, allowed=allowed)

    used_all = used.copy()
    used_all[tgt_idx] = True
    if (~used_all).sum() >= n_q:
        allowed = ~used_all
    else:
        not_target = np.ones(n_fld, dtype=bool)
        not_target[tgt_idx] = False
        allowed = not_target if not_target.sum() >= n_q else np.ones(n_fld, dtype=bool)
    qry_idx = fps(source_field, n_q, seed=s_qry, allowed=allowed)

    return SampleTriple(
        context=source_geometry.subset(ctx_idx),
        target=source_field.subset(tgt_idx),
        query=source_field.subset(qry_idx),
        context_idx=ctx_idx,
        target_idx=tgt_idx,
        query_idx=qry_idx,
    )
