"""Point Prompt, prompt injection, and token-space prompt propagation."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from . import pointops
from .backbone import TokenSet
from .config import PropagationConfig
from .errors import InvalidArgument
from .seeding import PROPAGATION, derive_seeds

INIT_MODES = ("uniform", "cluster")
VARIANTS = ("replacement", "permutation")


class PointPrompt(dc.Module):
    """P learnable 3D points appended to every input cloud."""

    def __init__(self, points: np.ndarray, range_: float, init_mode: str):
        self.points = dc.Parameter(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        self.range = float(range_)
        self.init_mode = init_mode

    @property
    def count(self) -> int:
        return self.points.shape[0]


def init_point_prompt(count: int, r: float, mode: str = "uniform", seed=0) -> PointPrompt:
    """Uniform coordinates in [-r, r], or clamped Gaussian clusters (sigma r/4)."""
    if count < 0:
        raise InvalidArgument(f"init_point_prompt: count must be >= 0, got {count}")
    if not r > 0:
        raise InvalidArgument(f"init_point_prompt: range must be > 0, got {r}")
    if mode not in INIT_MODES:
        raise InvalidArgument(f"init_point_prompt: unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        pts = rng.uniform(-r, r, size=(count, 3))
    else:
        n_clusters = max(1, math.ceil(count / 5))
        means = rng.uniform(-r, r, size=(n_clusters, 3))
        owner = np.arange(count) % n_clusters
        pts = np.clip(means[owner] + rng.normal(0.0, r / 4, size=(count, 3)), -r, r)
    return PointPrompt(pts, r, mode)


def hybridize(x_shifted, prompt: PointPrompt | None) -> dc.Tensor:
    """[x_shifted; prompt points] along the point axis; prompt rows stay trainable."""
    x = dc.as_tensor(x_shifted)
    if prompt is None or prompt.count == 0:
        return x
    pts = prompt.points
    if x.ndim == 2:
        return dc.concat([x, pts], axis=0)
    pb = dc.broadcast_to(dc.reshape(pts, (1,) + pts.shape), (x.shape[0],) + pts.shape)
    return dc.concat([x, pb], axis=1)


def _batch_prompt(p, b: int) -> dc.Tensor:
    p = dc.as_tensor(p)
    if p.ndim == 2:
        return dc.broadcast_to(dc.reshape(p, (1,) + p.shape), (b,) + p.shape)
    return p


def inject(tokens, center_idx: np.ndarray, neighbor_idx: np.ndarray, p, variant: str):
    """Gather center/neighbor tokens with the prompt rows injected.

    ``tokens`` (B, L, D) are the non-CLS tokens, ``center_idx`` (B, C) and
    ``neighbor_idx`` (B, C, K) index them. Returns ``(h_centers, h_neighbors)``
    of shapes (B, C, D) and (B, C, K, D).

    replacement: gather, then overwrite the last L_p center rows and the last
    neighbor row of each of the last L_p center groups with ``p``.
    permutation: index ``[p; tokens[:L - L_p]]`` instead of ``tokens``, so a
    center selected at position j < L_p carries prompt row j.
    """
    tokens = dc.as_tensor(tokens)
    b, n_tok, d = tokens.shape
    c = center_idx.shape[1]
    k = neighbor_idx.shape[2]
    lp = 0 if p is None else dc.as_tensor(p).shape[-2]
    if variant not in VARIANTS:
        raise InvalidArgument(f"inject: unknown variant {variant!r}")
    if c < lp:
        raise InvalidArgument(f"inject: {c} centers cannot host {lp} prompt tokens")
    if lp == 0:
        return dc.gather(tokens, center_idx, batch_dims=1), dc.gather(tokens, neighbor_idx, batch_dims=1)
    pb = _batch_prompt(p, b)
    if pb.shape[-1] != d:
        raise InvalidArgument(f"inject: prompt width {pb.shape[-1]} != token width {d}")
    if variant == "permutation":
        mixed = dc.concat([pb, tokens[:, :n_tok - lp]], axis=1)
        return dc.gather(mixed, center_idx, batch_dims=1), dc.gather(mixed, neighbor_idx, batch_dims=1)
    h_c = dc.gather(tokens, center_idx, batch_dims=1)
    h_n = dc.gather(tokens, neighbor_idx, batch_dims=1)
    h_c = dc.concat([h_c[:, :c - lp], pb], axis=1)
    tail = dc.concat([h_n[:, c - lp:, :k - 1], dc.reshape(pb, (b, lp, 1, d))], axis=2)
    h_n = dc.concat([h_n[:, :c - lp], tail], axis=1)
    return h_c, h_n


def resolve_centers(cfg: PropagationConfig, n_tokens: int) -> int:
    return cfg.centers_C if cfg.centers_C is not None else max(1, n_tokens // 2)


def propagate_tokens(h: TokenSet, cfg: PropagationConfig, p_enhanced, seeds=None, block: int = 0) -> TokenSet:
    """Token-space FPS + KNN, prompt injection, then inverse-distance
    interpolation from the (injected) centers back to every non-CLS token.

    Positions are the token features themselves (``metric="feature"``) or the
    patch centers (``metric="center3d"``). The [CLS] row passes through.
    """
    tokens = dc.as_tensor(h.tokens)
    unbatched = tokens.ndim == 2
    if unbatched:
        tokens = dc.reshape(tokens, (1,) + tokens.shape)
        if p_enhanced is not None and dc.as_tensor(p_enhanced).ndim == 2:
            p_enhanced = dc.reshape(dc.as_tensor(p_enhanced), (1,) + dc.as_tensor(p_enhanced).shape)
    b = tokens.shape[0]
    start = int(h.has_cls)
    body = tokens[:, start:] if start else tokens
    n_tok = body.shape[1]
    n_centers = resolve_centers(cfg, n_tok)
    if n_tok < n_centers:
        raise InvalidArgument(f"propagate_tokens: {n_tok} tokens but centers_C={n_centers}")
    if cfg.neighbors_K > n_tok:
        raise InvalidArgument(f"propagate_tokens: neighbors_K={cfg.neighbors_K} exceeds {n_tok} tokens")
    if cfg.metric == "feature":
        pos = body
    else:
        if h.centers is None:
            raise InvalidArgument("propagate_tokens: metric 'center3d' needs patch centers")
        pos = dc.Tensor(np.asarray(h.centers, dtype=np.float64).reshape(b, n_tok, -1))
    seeds = [0] * b if seeds is None else list(np.atleast_1d(seeds))
    cidx = pointops.farthest_point_sample_batch(pos.data, n_centers, seeds=derive_seeds(seeds, PROPAGATION, block))
    center_pos = dc.gather(pos, cidx, batch_dims=1)
    nidx = pointops.knn_batch(center_pos.data, pos.data, cfg.neighbors_K)
    h_c, _h_n = inject(body, cidx, nidx, p_enhanced, cfg.variant)
    interp = pointops.InterpConfig(cfg.k_interp, cfg.power, cfg.epsilon)
    new = pointops.interpolate_features(pos, center_pos, h_c, interp)
    if cfg.residual:
        new = dc.add(body, new)
    out = dc.concat([tokens[:, :start], new], axis=1) if start else new
    if unbatched:
        out = dc.reshape(out, out.shape[1:])
    return TokenSet(out, h.centers, h.has_cls)
