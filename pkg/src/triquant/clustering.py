"""Seeded k-means: kmeans++ initialization plus Lloyd iterations.

Written in-package so initialization is a documented, reproducible procedure:
the first center is uniform over points, each next center is drawn with
probability proportional to squared distance from the nearest chosen center.
Ties in assignment go to the lowest centroid index.
"""

from __future__ import annotations

import numpy as np


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Pick k starting centroids; duplicates appear when points run out."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0 or k < 1:
        raise ValueError("need at least one point and one centroid")
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[j] = x[idx]
        np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1), out=d2)
    return centroids


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels (squared Euclidean, lowest index on ties)."""
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def lloyd(x: np.ndarray, centroids: np.ndarray, iters: int):
    """Run Lloyd iterations from the given centroids.

    Empty clusters keep their previous centroid. Stops early once the
    assignment is stable.

    Returns:
        (centroids, labels, sse) with sse the within-cluster squared error.
    """
    x = np.asarray(x, dtype=np.float64)
    centroids = np.array(centroids, dtype=np.float64)
    k = centroids.shape[0]
    labels = assign(x, centroids)
    for _ in range(iters):
        for j in range(k):
            members = x[labels == j]
            if members.shape[0]:
                centroids[j] = members.mean(axis=0)
        new_labels = assign(x, centroids)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    sse = float(np.sum((x - centroids[labels]) ** 2))
    return centroids, labels, sse


def kmeans(x: np.ndarray, k: int, iters: int, seed) -> tuple[np.ndarray, np.ndarray, float]:
    """kmeans++ seeding followed by Lloyd; deterministic per seed."""
    rng = np.random.default_rng(seed)
    init = kmeans_plus_plus(x, k, rng)
    return lloyd(x, init, iters)
