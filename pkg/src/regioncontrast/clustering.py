"""K-Means (k-means++ init, Lloyd iterations) and cluster purity.

Used to probe whether pretrained per-pixel features organize into
anatomically meaningful groups without any labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["KMeansResult", "kmeans", "cluster_purity", "subsample_points"]


@dataclass
class KMeansResult:
    centroids: np.ndarray    # (k, D)
    assignments: np.ndarray  # (M,) int
    inertia: float
    n_iter: int


def _dist2(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared euclidean distances (M, k), computed via the expansion trick."""
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * points @ centroids.T
    return np.maximum(d2, 0.0)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(m))]
    closest = _dist2(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(m))  # all points coincide with a centroid
        else:
            idx = int(rng.choice(m, p=closest / total))
        centroids[j] = points[idx]
        closest = np.minimum(closest, _dist2(points, centroids[j:j + 1])[:, 0])
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid.  Inertia is checked to be non-increasing across iterations
    (up to a relative fp slack) — a violated check means a broken update.
    Stops when every centroid moves less than ``tol``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError(f"kmeans: points must be (M, D) with M > 0, got shape {pts.shape}")
    m = pts.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"kmeans: need 1 <= k <= {m} points, got k = {k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(pts, k, rng)

    prev_inertia = np.inf
    assignments = np.zeros(m, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _dist2(pts, centroids)
        assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(m), assignments]
        inertia = float(point_d2.sum())
        if inertia > prev_inertia * (1.0 + 1e-9) + 1e-12:
            raise AssertionError(
                f"kmeans: inertia increased {prev_inertia} -> {inertia} at iteration {n_iter}"
            )
        prev_inertia = inertia

        new_centroids = centroids.copy()
        for j in range(k):
            mask = assignments == j
            if mask.any():
                new_centroids[j] = pts[mask].mean(axis=0)
            else:
                new_centroids[j] = pts[int(point_d2.argmax())]
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _dist2(pts, centroids)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(m), assignments].sum())
    return KMeansResult(centroids=centroids, assignments=assignments,
                        inertia=inertia, n_iter=n_iter)


def cluster_purity(assignments: np.ndarray, reference: np.ndarray) -> float:
    """(1/M) * sum over clusters of their largest reference-label overlap."""
    a = np.asarray(assignments).ravel()
    r = np.asarray(reference).ravel()
    if a.shape != r.shape or a.size == 0:
        raise ValueError(f"cluster_purity: shapes {a.shape} vs {r.shape}")
    total = 0
    for cluster in np.unique(a):
        labels, counts = np.unique(r[a == cluster], return_counts=True)
        total += int(counts.max())
    return total / a.size


def subsample_points(points: np.ndarray, max_points: int, seed: int = 0) -> np.ndarray:
    """At most ``max_points`` rows, drawn without replacement, seeded."""
    pts = np.asarray(points)
    if pts.shape[0] <= max_points:
        return pts
    rng = np.random.default_rng(seed)
    idx = rng.choice(pts.shape[0], size=max_points, replace=False)
    return pts[np.sort(idx)]
