"""The full prompted model and its forward pass.

Parameter names are stable dotted paths (``backbone.blocks.0.w_q.weight``,
``peft.2.adapter.up.bias``, ``prompter...``, ``point_prompt.points``,
``head...``); checkpoints and freeze lists are keyed by them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .backbone import PeftBlock, PointTransformer, adapter_apply, attention_block, tokenize
from .config import RunConfig
from .errors import InvalidArgument
from .prompt_core import PointPrompt, hybridize, init_point_prompt, propagate_tokens
from .seeding import INIT, derive_seed
from .shift_prompter import ShiftPrompter, enhance_prompt_tokens, run_prompter

# init stream ids, so each component's initial weights are independent of
# which other components exist
_INIT_BACKBONE, _INIT_PROMPTER, _INIT_POINTS, _INIT_PEFT, _INIT_HEAD = range(5)


class Head(dc.Module):
    def __init__(self, inputs: list[str], dim: int, hidden: int, num_classes: int, rng):
        self.inputs = list(inputs)
        in_dim = dim * len(self.inputs)
        dims = [in_dim, hidden, num_classes] if hidden else [in_dim, num_classes]
        self.mlp = dc.MLP(dims, rng)

    def __call__(self, feats: dict) -> dc.Tensor:
        missing = [k for k in self.inputs if feats.get(k) is None]
        if missing:
            raise InvalidArgument(f"head inputs unavailable: {missing}")
        parts = [feats[k] for k in self.inputs]
        return self.mlp(dc.concat(parts, axis=-1) if len(parts) > 1 else parts[0])


class GAPromptModel(dc.Module):
    def __init__(self, cfg: RunConfig, seed: int = 0):
        m = cfg.model
        self.cfg = cfg
        self.backbone = PointTransformer(m, np.random.default_rng(derive_seed(seed, INIT, _INIT_BACKBONE)))
        self.prompter = (ShiftPrompter(cfg.prompter, np.random.default_rng(derive_seed(seed, INIT, _INIT_PROMPTER)))
                         if m.use_prompter else None)
        self.point_prompt = (init_point_prompt(m.point_prompts, m.prompt_range, m.prompt_init,
                                               derive_seed(seed, INIT, _INIT_POINTS))
                             if m.point_prompts > 0 else None)
        peft_rng = np.random.default_rng(derive_seed(seed, INIT, _INIT_PEFT))
        self.peft = [PeftBlock(m, peft_rng) for _ in range(m.depth)]
        self.head = Head(cfg.head.inputs, m.embed_dim, cfg.head.hidden, m.num_classes,
                         np.random.default_rng(derive_seed(seed, INIT, _INIT_HEAD)))
        self.assign_names()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True, prefix_filter: str | None = None) -> list[str]:
        """Copy matching arrays in; returns names that were loaded."""
        params = dict(self.named_parameters())
        loaded = []
        for name, arr in state.items():
            if prefix_filter is not None and not name.startswith(prefix_filter):
                continue
            if name not in params:
                if strict:
                    raise InvalidArgument(f"checkpoint tensor {name} has no matching parameter")
                continue
            if params[name].shape != tuple(arr.shape):
                raise InvalidArgument(f"{name}: checkpoint shape {tuple(arr.shape)} != model {params[name].shape}")
            params[name].data = np.array(arr, dtype=params[name].dtype)
            loaded.append(name)
        if strict and prefix_filter is None:
            absent = sorted(set(params) - set(loaded))
            if absent:
                raise InvalidArgument(f"checkpoint is missing parameters: {absent[:5]}")
        return loaded


@dataclass
class Diagnostics:
    shape_feature: np.ndarray | None = None          # (B, D)
    x_shifted: np.ndarray | None = None              # (B, S, 3)
    max_shift: float = 0.0                           # max |x_shifted - x| over the batch
    cls_attention: list[np.ndarray] = field(default_factory=list)  # per block (B, L + L_p)


def gaprompt_forward(model: GAPromptModel, x, seeds=None) -> tuple[dc.Tensor, Diagnostics]:
    """Prompter, hybrid cloud, tokenizer, prompted blocks, head.

    ``x`` is (B, S, 3) or (S, 3); ``seeds`` gives one integer per cloud and
    drives every FPS start in the pass.
    """
    cfg = model.cfg
    m, sp, pc = cfg.model, cfg.prompter, cfg.propagation
    xb = np.asarray(x, dtype=np.float64)
    if xb.ndim == 2:
        xb = xb[None]
    if xb.ndim != 3 or xb.shape[-1] != 3:
        raise InvalidArgument(f"expected clouds of shape (B, S, 3), got {xb.shape}")
    b = xb.shape[0]
    seeds = [0] * b if seeds is None else [int(s) for s in np.atleast_1d(seeds)]
    if len(seeds) != b:
        raise InvalidArgument(f"{len(seeds)} seeds for a batch of {b}")
    if xb.shape[1] + m.point_prompts < m.n_patches:
        raise InvalidArgument(f"{xb.shape[1]} points cannot form {m.n_patches} patches")

    diag = Diagnostics()
    f = None
    if model.prompter is not None:
        x_shifted, f, _ = run_prompter(model.prompter, xb, sp, seeds, use_shift=m.use_shift)
        diag.shape_feature = f.data
    else:
        x_shifted = dc.Tensor(xb.copy())
    diag.x_shifted = x_shifted.data
    diag.max_shift = float(np.max(np.abs(x_shifted.data - xb))) if xb.size else 0.0

    cloud = hybridize(x_shifted, model.point_prompt)
    tokens = tokenize(cloud, model.backbone.tokenizer, m.n_patches, m.patch_size, seeds)

    prop_blocks = set(range(m.depth)) if pc.blocks is None else set(pc.blocks)
    p_hat = None
    for i, (blk, extra) in enumerate(zip(model.backbone.blocks, model.peft)):
        p = None
        if extra.prompt_tokens is not None:
            if f is not None and m.prompt_enhance:
                p = enhance_prompt_tokens(extra.prompt_tokens, f, sp.beta_p)
            else:
                pt = extra.prompt_tokens
                p = dc.broadcast_to(dc.reshape(pt, (1,) + pt.shape), (b,) + pt.shape)
        propagate = m.use_propagation and p is not None and i in prop_blocks
        if propagate and pc.placement == "before_attn":
            tokens = propagate_tokens(tokens, pc, p, seeds, block=i)
        h_hat, p_hat, attn = attention_block(tokens.tokens, p, blk)
        diag.cls_attention.append(attn[:, 0, :].copy())
        tokens = type(tokens)(h_hat, tokens.centers, tokens.has_cls)
        if propagate and pc.placement == "after_attn":
            tokens = propagate_tokens(tokens, pc, p, seeds, block=i)
        if extra.adapter is not None:
            cond = f if m.adapter_enhance else None
            tokens = type(tokens)(adapter_apply(tokens.tokens, cond, sp.beta_a, extra.adapter),
                                  tokens.centers, tokens.has_cls)

    h = model.backbone.norm(tokens.tokens)
    feats = {
        "cls": h[:, 0],
        "max_patch": dc.max_reduce(h[:, 1:], axis=1),
        "max_prompt": dc.max_reduce(model.backbone.norm(p_hat), axis=1) if p_hat is not None else None,
        "shape_feature": f,
    }
    return model.head(feats), diag
