"""Pure numpy implementations of the selection kernels.

Squared distances accumulate coordinate by coordinate in a fixed order so the
results match the compiled kernels bit for bit.
"""
from __future__ import annotations

import numpy as np


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(..., n, d) x (..., m, d) -> (..., n, m) squared Euclidean distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[..., :, None, 0] - b[..., None, :, 0]
    acc = diff * diff
    for t in range(1, a.shape[-1]):
        diff = a[..., :, None, t] - b[..., None, :, t]
        acc += diff * diff
    return acc


def fps_batch(points: np.ndarray, m: int, starts: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    b, n, _ = points.shape
    dist = pairwise_sqdist(points, points)
    rows = np.arange(b)
    out = np.empty((b, m), dtype=np.int64)
    last = np.asarray(starts, dtype=np.int64)
    out[:, 0] = last
    mind = dist[rows, last].copy()
    mind[rows, last] = -1.0
    for s in range(1, m):
        nxt = np.argmax(mind, axis=1)
        out[:, s] = nxt
        np.minimum(mind, dist[rows, nxt], out=mind)
        mind[rows, nxt] = -1.0
    return out


def knn_batch(query: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    dist = pairwise_sqdist(query, reference)
    return np.argsort(dist, axis=-1, kind="stable")[..., :k].astype(np.int64)
