"""Mini-batch k-means with k-means++ seeding.

Deterministic given the seed. When ``batch_size >= len(points)`` every
iteration consumes the full dataset (no subsampling, no RNG draw), which
degenerates to incremental Lloyd updates with monotone within-cluster
sum of squares.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def kmeans_plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    closest_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest_sq.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=closest_sq / total))
        centroids[i] = points[idx]
        closest_sq = np.minimum(closest_sq, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; ||x||^2 constant for argmin.
    cross = points @ centroids.T
    c_sq = np.sum(centroids**2, axis=1)
    return np.argmin(c_sq[None, :] - 2.0 * cross, axis=1)


def within_cluster_ss(points: np.ndarray, centroids: np.ndarray) -> float:
    labels = _nearest(points, centroids)
    return float(np.sum((points - centroids[labels]) ** 2))


def mini_batch_kmeans(
    points: np.ndarray,
    k: int,
    batch_size: int = 1024,
    iters: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """Cluster ``points`` (N x D) into ``k`` centroids.

    Raises ConfigError when N < k; reduce the per-class budget or supply
    more patch data.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError("kmeans: points must be an N x D matrix")
    n = points.shape[0]
    if k < 1:
        raise ConfigError("kmeans: k must be >= 1")
    if n < k:
        raise ConfigError(
            f"kmeans: {n} points cannot form {k} clusters; reduce the class "
            "budget or supply more data"
        )
    if not np.isfinite(points).all():
        raise ConfigError("kmeans: non-finite input")

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus_init(points, k, rng)
    counts = np.zeros(k, dtype=np.int64)

    full_batch = batch_size >= n
    for _ in range(iters):
        batch = points if full_batch else points[rng.choice(n, size=batch_size, replace=False)]
        labels = _nearest(batch, centroids)
        for j in np.unique(labels):
            members = batch[labels == j]
            counts[j] += len(members)
            step = len(members) / counts[j]
            centroids[j] += step * (members.mean(axis=0) - centroids[j])
    return centroids
