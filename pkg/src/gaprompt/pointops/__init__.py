"""Geometric kernels over point sets: FPS, KNN, grouping, and
inverse-distance feature interpolation.

Coordinates may have any width (3 for geometry, D when tokens are treated
as points). Selection kernels return integer index arrays; those are treated
as constants by the autodiff engine.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..errors import InvalidArgument
from ._backend import BACKEND, compiled_kernels, kernels, python_kernels

__all__ = [
    "BACKEND", "NeighborIndex", "InterpConfig", "farthest_point_sample",
    "farthest_point_sample_batch", "k_nearest", "knn_batch", "group_relative",
    "interpolate_features", "interpolation_weights", "pairwise_sqdist", "first_pick",
    "compiled_kernels", "python_kernels",
]


@dataclass(frozen=True)
class NeighborIndex:
    """``neighbors[c]`` holds the K nearest reference points to center ``c``,
    nearest first, ties by ascending index. ``centers`` indexes the same
    reference set (None when the queries were free points)."""

    centers: np.ndarray | None
    neighbors: np.ndarray


@dataclass(frozen=True)
class InterpConfig:
    k_interp: int = 32
    power: float = 2.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.k_interp < 1:
            raise InvalidArgument("k_interp must be >= 1")
        if self.power <= 0:
            raise InvalidArgument("power must be > 0")
        if self.epsilon <= 0:
            raise InvalidArgument("epsilon must be > 0")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)


def pairwise_sqdist(a, b) -> np.ndarray:
    return python_kernels.pairwise_sqdist(_data(a), _data(b))


def first_pick(n: int, seed) -> int:
    """Index of the first FPS pick: uniform over ``range(n)`` given ``seed``."""
    return int(np.random.default_rng(seed).integers(n))


def farthest_point_sample(points, m: int, seed=0, start: int | None = None) -> np.ndarray:
    """Greedy max-min subset of ``m`` point indices.

    The first index is drawn uniformly from ``seed`` unless ``start`` is given;
    each next index maximises the distance to the selected set (lowest index
    on ties).
    """
    pts = _data(points)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise InvalidArgument(f"expected an N x d point array, got shape {pts.shape}")
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise InvalidArgument(f"farthest_point_sample: need 1 <= m <= N, got m={m}, N={n}")
    if start is None:
        start = first_pick(n, seed)
    elif not 0 <= start < n:
        raise InvalidArgument(f"start index {start} out of range for N={n}")
    return kernels.fps_batch(pts[None], m, np.array([start], dtype=np.int64))[0]


def farthest_point_sample_batch(points, m: int, seeds=None, starts=None) -> np.ndarray:
    """Batched FPS over a (B, N, d) array; one seed (or start index) per cloud."""
    pts = _data(points)
    if pts.ndim != 3:
        raise InvalidArgument(f"expected a B x N x d array, got shape {pts.shape}")
    b, n, _ = pts.shape
    if not 1 <= m <= n:
        raise InvalidArgument(f"farthest_point_sample: need 1 <= m <= N, got m={m}, N={n}")
    if starts is None:
        if seeds is None:
            raise InvalidArgument("either seeds or starts is required")
        starts = [first_pick(n, s) for s in seeds]
    starts = np.asarray(starts, dtype=np.int64)
    if starts.shape != (b,):
        raise InvalidArgument(f"need one start per cloud, got {starts.shape} for batch {b}")
    return kernels.fps_batch(pts, m, starts)


def knn_batch(query, reference, k: int) -> np.ndarray:
    q, r = _data(query), _data(reference)
    if q.ndim != 3 or r.ndim != 3 or q.shape[0] != r.shape[0] or q.shape[2] != r.shape[2]:
        raise InvalidArgument(f"knn_batch: incompatible shapes {q.shape} and {r.shape}")
    if not 1 <= k <= r.shape[1]:
        raise InvalidArgument(f"k_nearest: need 1 <= k <= N, got k={k}, N={r.shape[1]}")
    return kernels.knn_batch(q, r, k)


def k_nearest(query, reference, k: int, centers: np.ndarray | None = None) -> NeighborIndex:
    """K nearest reference points for each query point, nearest first."""
    q, r = _data(query), _data(reference)
    if q.ndim != 2 or r.ndim != 2 or q.shape[1] != r.shape[1]:
        raise InvalidArgument(f"k_nearest: incompatible shapes {q.shape} and {r.shape}")
    nbrs = knn_batch(q[None], r[None], k)[0]
    return NeighborIndex(None if centers is None else np.asarray(centers, dtype=np.int64), nbrs)


def group_relative(reference, idx: NeighborIndex) -> np.ndarray:
    """Neighbor coordinates minus their center's coordinates, C x K x d."""
    ref = _data(reference)
    n = ref.shape[0]
    if idx.centers is None:
        raise InvalidArgument("group_relative needs center indices")
    for arr in (idx.centers, idx.neighbors):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise InvalidArgument(f"stale neighbor index: values must be < {n}")
    if idx.neighbors.shape[0] != idx.centers.shape[0]:
        raise InvalidArgument("centers and neighbors disagree on the center count")
    return ref[idx.neighbors] - ref[idx.centers][:, None, :]


def _batched(x):
    """Add a batch axis to 2-D inputs; return (value, was_unbatched)."""
    if isinstance(x, dc.Tensor):
        return (dc.reshape(x, (1,) + x.shape), True) if x.ndim == 2 else (x, False)
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _stable_topk(sq: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ascending, ties by index."""
    return np.argsort(sq, axis=-1, kind="stable")[..., :k]


def interpolation_weights(query_pos, center_pos, cfg: InterpConfig = InterpConfig()):
    """Normalised inverse-distance weights for each query's nearest centers.

    Returns ``(weights, nn)`` with shapes (..., Q, k) where ``nn`` indexes the
    centers nearest-first. ``weights`` is a Tensor, differentiable through
    either position set.
    """
    qb, unb = _batched(query_pos)
    cb, _ = _batched(center_pos)
    qd, cd = _data(qb), _data(cb)
    if cd.shape[1] < 1:
        raise InvalidArgument("interpolate_features: no centers")
    if qd.shape[0] != cd.shape[0] or qd.shape[2] != cd.shape[2]:
        raise InvalidArgument(f"interpolate_features: positions {qd.shape} vs centers {cd.shape}")
    k = min(cfg.k_interp, cd.shape[1])
    b, nq, _ = qd.shape
    nc = cd.shape[1]
    needs_grad = dc.grad_enabled() and any(isinstance(t, dc.Tensor) and t.requires_grad for t in (qb, cb))
    if not needs_grad:
        qb, cb = qd, cd
    with contextlib.nullcontext() if needs_grad else dc.no_grad():
        sq = dc.sqdist(qb, cb)                                           # (B, Q, C)
        nn = _stable_topk(sq.data, k)
        sq_k = dc.gather(dc.reshape(sq, (b * nq, nc)), nn.reshape(b * nq, k), batch_dims=1)
        w = dc.power(dc.add(dc.sqrt(sq_k), cfg.epsilon), -float(cfg.power))
        weights = dc.reshape(dc.div(w, dc.sum_reduce(w, axis=-1, keepdims=True)), (b, nq, k))
    if unb:
        weights = dc.reshape(weights, weights.shape[1:])
        nn = nn[0]
    return weights, nn


def interpolate_features(query_pos, center_pos, center_feat, cfg: InterpConfig = InterpConfig()) -> dc.Tensor:
    """Inverse-distance interpolation of center features at query positions.

    Each query mixes its ``min(k_interp, C)`` nearest centers with weights
    ``1 / (d + epsilon) ** power`` normalised to sum to one. Accepts unbatched
    (Q x d, C x d, C x F) or batched (B x ...) inputs. Sums run in
    nearest-first order, so jointly permuting centers and features does not
    change the result.
    """
    feat = dc.as_tensor(center_feat)
    cdata = _data(center_pos)
    if cdata.shape[-2] < 1:
        raise InvalidArgument("interpolate_features: no centers")
    if feat.shape[-2] != cdata.shape[-2]:
        raise InvalidArgument(f"interpolate_features: {cdata.shape[-2]} centers but {feat.shape[-2]} feature rows")
    weights, nn = interpolation_weights(query_pos, center_pos, cfg)
    unbatched = feat.ndim == 2
    if unbatched:
        feat = dc.reshape(feat, (1,) + feat.shape)
        weights = dc.reshape(weights, (1,) + weights.shape)
        nn = nn[None]
    fg = dc.gather(feat, nn, batch_dims=1)
    out = dc.sum_reduce(dc.mul(dc.reshape(weights, weights.shape + (1,)), fg), axis=2)
    if unbatched:
        out = dc.reshape(out, out.shape[1:])
    return out
