"""Point Shift Prompter: hierarchical shape encoder, feature upsampling, and a
bounded per-point shift head.

Inputs are raw clouds (B, N, 3) as numpy arrays; the prompter never sees the
learnable prompt points. Outputs are the shifted cloud (a Tensor, so the
tokenizer can back-propagate into the shift head) and the global shape
feature ``f`` of width ``C_k * D_k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import pointops
from .config import ShiftPrompterConfig
from .errors import InvalidArgument
from .seeding import PROMPTER, derive_seeds


class ShiftPrompter(dc.Module):
    def __init__(self, cfg: ShiftPrompterConfig, rng: np.random.Generator):
        widths = cfg.widths_per_level
        self.encoders = []
        for j, width in enumerate(widths):
            in_dim = 3 + (3 if cfg.abs_coords else 0) + (widths[j - 1] if j else 0)
            self.encoders.append(dc.MLP([in_dim, width, width], rng))
        self.decoders = [dc.MLP([widths[j + 1] + widths[j], widths[j], widths[j]], rng)
                         for j in range(len(widths) - 1)]
        self.point_decoder = dc.MLP([widths[0], widths[0], widths[0]], rng)
        self.shift_mlp = dc.MLP([2 * widths[0], cfg.shift_hidden, 3], rng, zero_last=True)


@dataclass
class ShapeEncoding:
    centers: list[np.ndarray] = field(default_factory=list)   # per level (B, C_j, 3)
    center_idx: list[np.ndarray] = field(default_factory=list)
    neighbor_idx: list[np.ndarray] = field(default_factory=list)
    groups: list[np.ndarray] = field(default_factory=list)    # center-relative (B, C_j, K_j, 3)
    feats: list[dc.Tensor] = field(default_factory=list)      # per level (B, C_j, D_j)
    f: dc.Tensor | None = None


def pointnet_embed(groups, mlp: dc.MLP) -> dc.Tensor:
    """Shared per-point MLP followed by a max over the neighbor axis (-2)."""
    groups = dc.as_tensor(groups)
    if groups.ndim < 3:
        raise InvalidArgument(f"pointnet_embed expects (..., C, K, F), got {groups.shape}")
    if groups.shape[-1] != mlp.layers[0].in_dim:
        raise InvalidArgument(f"pointnet_embed: group width {groups.shape[-1]} != MLP input {mlp.layers[0].in_dim}")
    return dc.max_reduce(mlp(groups), axis=-2)


def _as_batch(x, seeds):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], [seeds if seeds is not None else 0], True
    if seeds is None:
        seeds = [0] * x.shape[0]
    return x, list(np.atleast_1d(seeds)), False


def encode_shape(prompter: ShiftPrompter, x, cfg: ShiftPrompterConfig, seeds=None) -> ShapeEncoding:
    """Hierarchical FPS + KNN grouping + pointnet per level; ``f`` reshapes the
    deepest level's center features."""
    xb, seeds, _ = _as_batch(x, seeds)
    b, n, _ = xb.shape
    if n < cfg.centers_per_level[0]:
        raise InvalidArgument(f"encode_shape: {n} points but C_1={cfg.centers_per_level[0]}; resample the input")
    enc = ShapeEncoding()
    pos = xb
    prev = None
    for j, (c, k) in enumerate(zip(cfg.centers_per_level, cfg.neighbors_per_level)):
        cidx = pointops.farthest_point_sample_batch(pos, c, seeds=derive_seeds(seeds, PROMPTER, j))
        cpos = np.take_along_axis(pos, cidx[..., None], axis=1)
        nidx = pointops.knn_batch(cpos, pos, k)
        npos = pos[np.arange(b)[:, None, None], nidx]
        rel = npos - cpos[:, :, None, :]
        chans = [dc.Tensor(rel)]
        if cfg.abs_coords:
            chans.append(dc.Tensor(npos))
        if prev is not None:
            chans.append(dc.gather(prev, nidx, batch_dims=1))
        feat = pointnet_embed(dc.concat(chans, axis=-1) if len(chans) > 1 else chans[0],
                              prompter.encoders[j])
        enc.centers.append(cpos)
        enc.center_idx.append(cidx)
        enc.neighbor_idx.append(nidx)
        enc.groups.append(rel)
        enc.feats.append(feat)
        pos, prev = cpos, feat
    enc.f = dc.reshape(prev, (b, prev.shape[1] * prev.shape[2]))
    return enc


def shape_feature_to_levels(f, cfg: ShiftPrompterConfig) -> dc.Tensor:
    """Inverse of the reshape that produced ``f``: (B, D) -> (B, C_k, D_k)."""
    f = dc.as_tensor(f)
    return dc.reshape(f, f.shape[:-1] + (cfg.centers_per_level[-1], cfg.widths_per_level[-1]))


def decode_pointwise(prompter: ShiftPrompter, x, enc: ShapeEncoding, cfg: ShiftPrompterConfig) -> dc.Tensor:
    """Upsample level features back to every input point: (B, N, D_1)."""
    xb = np.asarray(x, dtype=np.float64)
    if xb.ndim == 2:
        xb = xb[None]
    if len(enc.feats) != cfg.levels:
        raise InvalidArgument(f"decode_pointwise: encoding has {len(enc.feats)} levels, config {cfg.levels}")
    interp = pointops.InterpConfig(k_interp=cfg.decode_k)
    feat = enc.feats[-1]
    for j in range(cfg.levels - 2, -1, -1):
        up = pointops.interpolate_features(enc.centers[j], enc.centers[j + 1], feat, interp)
        feat = prompter.decoders[j](dc.concat([up, enc.feats[j]], axis=-1))
    up = pointops.interpolate_features(xb, enc.centers[0], feat, interp)
    return prompter.point_decoder(up)


def align_level1(x, enc: ShapeEncoding) -> dc.Tensor:
    """Level-1 encoder features of each point's nearest level-1 center."""
    xb = np.asarray(x, dtype=np.float64)
    if xb.ndim == 2:
        xb = xb[None]
    nn = pointops.knn_batch(xb, enc.centers[0], 1)[..., 0]
    return dc.gather(enc.feats[0], nn, batch_dims=1)


def shift_head(prompter: ShiftPrompter, per_point, level1_feats, x, cfg: ShiftPrompterConfig) -> dc.Tensor:
    """x + shift_scale * tanh(MLP([per_point, level1])), so |shift| <= shift_scale."""
    xb = np.asarray(x, dtype=np.float64)
    if xb.ndim == 2:
        xb = xb[None]
    if cfg.shift_scale == 0.0:
        return dc.Tensor(xb.copy())
    raw = prompter.shift_mlp(dc.concat([per_point, level1_feats], axis=-1))
    delta = dc.scalar_scale(dc.tanh(raw), cfg.shift_scale)
    return dc.add(dc.Tensor(xb), delta)


def run_prompter(prompter: ShiftPrompter, x, cfg: ShiftPrompterConfig, seeds=None,
                 use_shift: bool = True) -> tuple[dc.Tensor, dc.Tensor, ShapeEncoding]:
    """encode -> decode -> shift head. Returns (x_shifted, f, encoding), batched."""
    xb, seeds, _ = _as_batch(x, seeds)
    enc = encode_shape(prompter, xb, cfg, seeds)
    if not use_shift or cfg.shift_scale == 0.0:
        return dc.Tensor(xb.copy()), enc.f, enc
    per_point = decode_pointwise(prompter, xb, enc, cfg)
    shifted = shift_head(prompter, per_point, align_level1(xb, enc), xb, cfg)
    return shifted, enc.f, enc


def enhance_prompt_tokens(p_raw, f, beta_p: float) -> dc.Tensor:
    """p = p_raw + beta_p * f, with f broadcast over the prompt rows.

    ``p_raw`` is (L_p, D); ``f`` is (D,) or (B, D), giving (L_p, D) or (B, L_p, D).
    """
    p_raw = dc.as_tensor(p_raw)
    if f is None:
        return p_raw
    f = dc.as_tensor(f)
    if f.shape[-1] != p_raw.shape[-1]:
        raise InvalidArgument(f"enhance_prompt_tokens: prompt width {p_raw.shape[-1]} != shape feature width {f.shape[-1]}")
    if f.ndim == 1:
        return dc.add(p_raw, dc.scalar_scale(dc.reshape(f, (1, f.shape[0])), beta_p))
    scaled = dc.scalar_scale(dc.reshape(f, (f.shape[0], 1, f.shape[1])), beta_p)
    return dc.add(dc.reshape(p_raw, (1,) + p_raw.shape), scaled)
