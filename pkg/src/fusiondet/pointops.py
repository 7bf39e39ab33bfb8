"""Point-cloud set operations: sampling, grouping, interpolation, abstraction.

Coordinates are [N,3] float64, sensor frame (x forward, y left, z up).
Every op is deterministic: distance ties resolve to the lowest index,
sampling takes an explicit start index, nothing touches global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import MlpParams, ShapeError, as_tensor, mlp_forward


@dataclass
class PointCloud:
    """Points with optional per-point features, foreground scores, class ids."""

    coords: np.ndarray
    features: Optional[np.ndarray] = None
    fg_score: Optional[np.ndarray] = None
    class_id: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = as_tensor(self.coords, "coords")
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be [N,3], got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ShapeError("point cloud must hold at least one point")
        n = self.coords.shape[0]
        if self.features is not None:
            self.features = as_tensor(self.features, "features")
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ShapeError("features must be [N,C] aligned with coords")
        if self.fg_score is not None:
            self.fg_score = as_tensor(self.fg_score, "fg_score")
            if self.fg_score.shape != (n,):
                raise ShapeError("fg_score must be [N]")
            if np.any(self.fg_score < 0) or np.any(self.fg_score > 1):
                raise ValueError("fg_score entries must lie in [0,1]")
        if self.class_id is not None:
            self.class_id = np.asarray(self.class_id, dtype=np.int64)
            if self.class_id.shape != (n,):
                raise ShapeError("class_id must be [N]")

    def __len__(self) -> int:
        return self.coords.shape[0]


def _coords_of(pc) -> np.ndarray:
    coords = pc.coords if isinstance(pc, PointCloud) else as_tensor(pc, "coords")
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"expected [N,3] coordinates, got {coords.shape}")
    return coords


def farthest_point_sample(pc, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``count`` indices, in selection order.

    Starts from ``start``; each subsequent pick maximizes the minimum
    distance to the already-chosen set, lowest index winning ties.
    """
    coords = _coords_of(pc)
    n = coords.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"count={count} out of range for {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    # running min squared distance from every point to the chosen set
    best = np.sum((coords - coords[start]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(best))  # argmax takes the first maximizer: lowest index
        chosen[i] = nxt
        d = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(best, d, out=best)
    return chosen


def ball_query(pc, centroids: np.ndarray, radius: float, k: int) -> np.ndarray:
    """Up to k member indices within ``radius`` of each centroid point.

    ``centroids`` are indices into the cloud, so each centroid qualifies
    for its own group (distance 0 <= r). Members are the first k
    qualifying points in ascending index order; when fewer than k
    qualify, the first qualifying index pads the remainder. Returns
    [M, k] int64.
    """
    coords = _coords_of(pc)
    centroids = np.asarray(centroids, dtype=np.int64)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    if centroids.ndim != 1:
        raise ShapeError("centroids must be a flat index list")
    if np.any(centroids < 0) or np.any(centroids >= coords.shape[0]):
        raise IndexError("centroid index out of range")
    d2 = np.sum((coords[centroids][:, None, :] - coords[None, :, :]) ** 2, axis=2)
    r2 = radius * radius
    out = np.empty((centroids.shape[0], k), dtype=np.int64)
    for i in range(centroids.shape[0]):
        hits = np.flatnonzero(d2[i] <= r2)
        if hits.size >= k:
            out[i] = hits[:k]
        else:
            out[i, : hits.size] = hits
            out[i, hits.size :] = hits[0]
    return out


def knn_indices(pc, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to each query row, nearest first.

    Distance ties resolve to the lower index. Returns [Q, k] int64.
    """
    coords = _coords_of(pc)
    queries = _coords_of(queries)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    d2 = np.sum((queries[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")  # stable keeps index order in ties
    return order[:, :k].astype(np.int64)


def feature_propagation(src: PointCloud, dst_coords: np.ndarray, k: int = 3) -> np.ndarray:
    """Inverse-squared-distance interpolation of source features onto dst points.

    Each destination takes a 1/d^2-weighted mean of its k nearest source
    features (fewer when the source has fewer points). A destination
    within 1e-10 of a source copies that source feature exactly. Returns
    [M, C].
    """
    if src.features is None:
        raise ValueError("source cloud has no features to propagate")
    dst_coords = _coords_of(dst_coords)
    feats = src.features
    k = min(k, len(src))
    idx = knn_indices(src, dst_coords, k)
    d2 = np.sum((dst_coords[:, None, :] - src.coords[idx]) ** 2, axis=2)  # [M,k]
    exact = d2[:, 0] < 1e-20  # nearest-first ordering puts a coincidence in column 0
    w = 1.0 / np.maximum(d2, 1e-20)
    w = w / w.sum(axis=1, keepdims=True)
    out = np.einsum("mk,mkc->mc", w, feats[idx])
    if np.any(exact):
        out[exact] = feats[idx[exact, 0]]
    return out


def set_abstraction(pc: PointCloud, m: int, radius: float, k: int, mlp: MlpParams) -> PointCloud:
    """Sample m centroids, group neighbors, encode each group to one feature.

    Per member the MLP sees (coords relative to centroid ‖ member features);
    the group feature is the channel-wise max over members. Output cloud
    holds the centroid coordinates and [m, mlp.out_dim] features.
    """
    c = 0 if pc.features is None else pc.features.shape[1]
    if mlp.in_dim != 3 + c:
        raise ShapeError(f"mlp expects width {mlp.in_dim}, group rows have {3 + c}")
    centroids = farthest_point_sample(pc, m)
    groups = ball_query(pc, centroids, radius, k)  # [m, k]
    rel = pc.coords[groups] - pc.coords[centroids][:, None, :]  # [m, k, 3]
    rows = rel if pc.features is None else np.concatenate([rel, pc.features[groups]], axis=2)
    encoded = mlp_forward(mlp, rows)  # [m, k, out]
    return PointCloud(pc.coords[centroids], features=encoded.max(axis=1))
