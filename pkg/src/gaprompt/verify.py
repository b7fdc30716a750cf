"""Numerical self-checks shared by the CLI and the tests."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .data import generate
from .model import GAPromptModel, gaprompt_forward
from .seeding import EVAL, derive_seed
from .trainer import freeze_for_adaptation

GRADCHECK_POINTS = 32
GROUPS = ("prompter", "point_prompt", "peft.adapter", "peft.prompt_tokens", "head")


def gradcheck_config(cfg: RunConfig | None = None) -> RunConfig:
    """Shrink the point-related sizes of ``cfg`` to a 32-point cloud."""
    cfg = cfg or RunConfig()
    d = cfg.model.embed_dim
    top = cfg.prompter.centers_per_level[-1]
    return cfg.replace(
        data={"n_points": GRADCHECK_POINTS, "per_class": 2, "variant": "clean"},
        prompter={"centers_per_level": [16, top], "neighbors_per_level": [8, 4],
                  "widths_per_level": [d // top, d // top]},
        model={"n_patches": 16, "patch_size": 8},
        propagation={"centers_C": None, "neighbors_K": 4},
    )


def group_of(name: str) -> str:
    """``peft.3.adapter.up.weight`` -> ``peft.adapter``; otherwise the top-level module."""
    parts = name.split(".")
    if parts[0] == "peft" and len(parts) > 2:
        return f"peft.{parts[2]}"
    return parts[0]


def run_gradcheck(cfg: RunConfig | None = None, seed: int = 0, max_coords: int = 6,
                  step: float = 1e-5, batch: int = 2) -> dict:
    """Central-difference check of every trainable parameter in adapt mode.

    Zero-initialised trainable weights are re-drawn at small random values
    first, so every gradient path is exercised. Returns per-parameter and
    per-group max relative errors.
    """
    cfg = gradcheck_config(cfg)
    model = GAPromptModel(cfg, seed)
    freeze_for_adaptation(model, "adapt")
    rng = np.random.default_rng(derive_seed(seed, EVAL, 1))
    for _, p in model.named_parameters():
        if not p.frozen and p.data.ndim == 2 and not p.data.any():
            p.data = rng.normal(0.0, 0.1, size=p.shape)
    ds = generate(cfg.data, seed)
    samples = (ds.train + ds.test)[:batch]
    x = np.stack([s.cloud for s in samples])
    labels = np.array([s.label for s in samples])
    seeds = [derive_seed(seed, EVAL, s.sample_id) for s in samples]

    def loss_fn():
        logits, _ = gaprompt_forward(model, x, seeds)
        return dc.cross_entropy(logits, labels)

    trainable = [p for p in model.parameters() if not p.frozen]
    per_param = dc.grad_check_params(loss_fn, trainable, step=step, max_coords=max_coords, rng=rng)
    groups: dict[str, float] = {}
    for name, err in per_param.items():
        g = group_of(name)
        groups[g] = max(groups.get(g, 0.0), err)
    return {"params": per_param, "groups": groups, "max": max(per_param.values()) if per_param else 0.0}
