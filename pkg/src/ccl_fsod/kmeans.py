"""Deterministic k-means with k-means++ seeding."""

from __future__ import annotations

import numpy as np

MAX_ITER = 300
TOL = 1e-8


def _plusplus_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already sits on a center; duplicates are unavoidable
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[i] = X[idx]
        closest = np.minimum(closest, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(X, k: int, seed: int = 0, max_iter: int = MAX_ITER, tol: float = TOL):
    """Lloyd iterations from a seeded k-means++ start.

    Iteration stops once the relative change of the within-cluster sum of
    squares drops below ``tol`` or after ``max_iter`` rounds. An emptied
    cluster is re-seeded at the point farthest from its current center.

    Returns:
        (centers, assignment) with centers of shape (k, d).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {X.shape}")
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    if k == 1:
        return X.mean(axis=0, keepdims=True), np.zeros(n, dtype=np.int64)

    rng = np.random.default_rng(seed)
    centers = _plusplus_init(X, k, rng)
    prev_sse = np.inf
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        sse = d2[np.arange(n), assign].sum()
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
            else:
                far = d2[np.arange(n), assign].argmax()
                centers[j] = X[far]
                assign[far] = j
        if np.isfinite(prev_sse) and abs(prev_sse - sse) <= tol * max(prev_sse, np.finfo(float).tiny):
            break
        prev_sse = sse
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return centers, d2.argmin(axis=1)
