"""A small pre-norm point-cloud transformer plus the per-block PEFT pieces.

The backbone (tokenizer, blocks, final norm) is what gets frozen during
adaptation. Adapters and deep prompt tokens live in ``PeftBlock`` so the
frozen/trainable split follows the module tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import pointops
from .config import ModelConfig
from .errors import InvalidArgument
from .seeding import TOKENIZER, derive_seeds


@dataclass
class TokenSet:
    tokens: dc.Tensor                 # (B, L, D); row 0 is [CLS] when has_cls
    centers: np.ndarray | None = None  # (B, L - has_cls, 3) patch centers
    has_cls: bool = True

    @property
    def patch_count(self) -> int:
        return self.tokens.shape[-2] - int(self.has_cls)


class Tokenizer(dc.Module):
    """Mini pointnet over center-relative patches plus a positional MLP."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.local_mlp = dc.MLP([3, hidden, hidden], rng)
        self.fuse_mlp = dc.MLP([2 * hidden, 2 * hidden, dim], rng)
        self.pos_mlp = dc.MLP([3, hidden, dim], rng)
        self.cls_token = dc.Parameter(rng.normal(0.0, 0.02, size=(1, dim)))
        self.cls_pos = dc.Parameter(rng.normal(0.0, 0.02, size=(1, dim)))


class Block(dc.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.num_heads = num_heads
        self.norm1 = dc.LayerNorm(dim)
        self.w_q = dc.Linear(dim, dim, rng, bias=False)
        self.w_k = dc.Linear(dim, dim, rng, bias=False)
        self.w_v = dc.Linear(dim, dim, rng, bias=False)
        self.w_o = dc.Linear(dim, dim, rng)
        self.norm2 = dc.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = dc.Linear(dim, hidden, rng)
        self.fc2 = dc.Linear(hidden, dim, rng)


class PointTransformer(dc.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.tokenizer = Tokenizer(cfg.embed_dim, cfg.tokenizer_hidden, rng)
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = dc.LayerNorm(cfg.embed_dim)


class Adapter(dc.Module):
    """Bottleneck MLP; the up-projection starts at zero."""

    def __init__(self, dim: int, bottleneck: int, rng: np.random.Generator):
        self.down = dc.Linear(dim, bottleneck, rng)
        self.up = dc.Linear(bottleneck, dim, rng, zero_init=True)

    def __call__(self, x) -> dc.Tensor:
        return self.up(dc.gelu(self.down(x)))


class PeftBlock(dc.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.adapter = Adapter(cfg.embed_dim, cfg.bottleneck, rng) if cfg.use_adapters else None
        self.prompt_tokens = (dc.Parameter(rng.normal(0.0, 0.02, size=(cfg.prompt_tokens, cfg.embed_dim)))
                              if cfg.prompt_tokens > 0 else None)


# -- operations ---------------------------------------------------------------

def tokenize(x_hybrid, tokenizer: Tokenizer, n_patches: int, patch_size: int, seeds=None) -> TokenSet:
    """FPS patch centers, KNN patches, per-patch embedding, [CLS] prepended.

    ``x_hybrid`` is (B, M, 3) (Tensor or array); gradients flow into its
    coordinates through the gathered patches and center positions.
    """
    pts = dc.as_tensor(x_hybrid)
    if pts.ndim == 2:
        pts = dc.reshape(pts, (1,) + pts.shape)
    b, m, _ = pts.shape
    if m < n_patches:
        raise InvalidArgument(f"tokenize: {m} points but {n_patches} patches requested")
    if patch_size > m:
        raise InvalidArgument(f"tokenize: patch size {patch_size} exceeds {m} points")
    seeds = [0] * b if seeds is None else list(np.atleast_1d(seeds))
    cidx = pointops.farthest_point_sample_batch(pts.data, n_patches, seeds=derive_seeds(seeds, TOKENIZER))
    centers = np.take_along_axis(pts.data, cidx[..., None], axis=1)
    nidx = pointops.knn_batch(centers, pts.data, patch_size)
    cpos = dc.gather(pts, cidx, batch_dims=1)                        # (B, G, 3)
    patches = dc.sub(dc.gather(pts, nidx, batch_dims=1),
                     dc.reshape(cpos, (b, n_patches, 1, 3)))          # (B, G, K, 3)
    local = tokenizer.local_mlp(patches)
    glob = dc.max_reduce(local, axis=2, keepdims=True)
    glob = dc.broadcast_to(glob, local.shape)
    emb = dc.max_reduce(tokenizer.fuse_mlp(dc.concat([local, glob], axis=-1)), axis=2)
    tok = dc.add(emb, tokenizer.pos_mlp(cpos))
    cls = dc.add(tokenizer.cls_token, tokenizer.cls_pos)
    cls = dc.broadcast_to(dc.reshape(cls, (1, 1, cls.shape[-1])), (b, 1, cls.shape[-1]))
    return TokenSet(dc.concat([cls, tok], axis=1), centers, True)


def multi_head_attention(z, blk: Block) -> tuple[dc.Tensor, np.ndarray]:
    """Self-attention over (B, L, D); returns output and head-averaged weights."""
    b, n, d = z.shape
    h = blk.num_heads
    dh = d // h

    def heads(t):
        return dc.transpose(dc.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(blk.w_q(z)), heads(blk.w_k(z)), heads(blk.w_v(z))
    scores = dc.scalar_scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = dc.softmax(scores, axis=-1)
    o = dc.reshape(dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return blk.w_o(o), attn.data.mean(axis=1)


def attention_block(h, p, blk: Block) -> tuple[dc.Tensor, dc.Tensor | None, np.ndarray]:
    """Pre-norm attention + feed-forward over ``[h; p]``.

    Returns (h_hat, p_hat, attention weights (B, L+L_p, L+L_p)). ``p`` may be
    None or have zero rows.
    """
    h = dc.as_tensor(h)
    unbatched = h.ndim == 2
    if unbatched:
        h = dc.reshape(h, (1,) + h.shape)
        if p is not None:
            p = dc.reshape(dc.as_tensor(p), (1,) + dc.as_tensor(p).shape)
    n_tok = h.shape[1]
    has_p = p is not None and p.shape[-2] > 0
    if has_p and p.shape[-1] != h.shape[-1]:
        raise InvalidArgument(f"attention_block: prompt width {p.shape[-1]} != token width {h.shape[-1]}")
    z = dc.concat([h, p], axis=1) if has_p else h
    a, weights = multi_head_attention(blk.norm1(z), blk)
    z = dc.add(z, a)
    z = dc.add(z, blk.fc2(dc.gelu(blk.fc1(blk.norm2(z)))))
    if has_p:
        h_hat, p_hat = z[:, :n_tok], z[:, n_tok:]
    else:
        h_hat, p_hat = z, None
    if unbatched:
        h_hat = dc.reshape(h_hat, h_hat.shape[1:])
        p_hat = None if p_hat is None else dc.reshape(p_hat, p_hat.shape[1:])
        weights = weights[0]
    return h_hat, p_hat, weights


def adapter_apply(h_hat, f, beta_a: float, adapter: Adapter) -> dc.Tensor:
    """h + Adapter(h + beta_a * f), f broadcast over token rows."""
    h_hat = dc.as_tensor(h_hat)
    inp = h_hat
    if f is not None and beta_a != 0.0:
        f = dc.as_tensor(f)
        if f.shape[-1] != h_hat.shape[-1]:
            raise InvalidArgument(f"adapter_apply: shape feature width {f.shape[-1]} != {h_hat.shape[-1]}")
        fb = dc.reshape(f, f.shape[:-1] + (1, f.shape[-1])) if f.ndim == h_hat.ndim - 1 else f
        inp = dc.add(h_hat, dc.scalar_scale(fb, beta_a))
    return dc.add(h_hat, adapter(inp))


def decompose_prompt_attention(h, p, blk: Block):
    """Check that prefix-prompted attention splits into a prompt term plus a
    rescaled prompt-free output.

    Single-head attention with the block's query/key/value maps, on raw
    (un-normalised) tokens: ``lhs`` attends over ``[p; h]`` keys directly,
    ``rhs = sum_k A_ik V p_k + (1 - sum_k A_ik) o_i`` where ``o`` is the
    prompt-free output and ``A`` the joint-softmax mass on prompt keys.
    Returns (lhs, rhs, max_abs_diff).
    """
    h = dc.as_tensor(h)
    d = h.shape[-1]
    scale = 1.0 / math.sqrt(d)
    q, kh, vh = blk.w_q(h), blk.w_k(h), blk.w_v(h)
    o = dc.matmul(dc.softmax(dc.scalar_scale(dc.matmul(q, dc.transpose(kh)), scale), -1), vh)
    if p is None or dc.as_tensor(p).shape[0] == 0:
        return o, o, 0.0
    p = dc.as_tensor(p)
    kp, vp = blk.w_k(p), blk.w_v(p)
    keys = dc.concat([kp, kh], axis=0)
    vals = dc.concat([vp, vh], axis=0)
    attn = dc.softmax(dc.scalar_scale(dc.matmul(q, dc.transpose(keys)), scale), -1)
    lhs = dc.matmul(attn, vals)
    lp = p.shape[0]
    a_prompt = attn[:, :lp]
    mass = dc.sum_reduce(a_prompt, axis=-1, keepdims=True)
    rhs = dc.add(dc.matmul(a_prompt, vp), dc.mul(dc.sub(1.0, mass), o))
    return lhs, rhs, float(np.max(np.abs(lhs.data - rhs.data)))
