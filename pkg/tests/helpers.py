"""Small configurations shared by the slower tests."""
from gaprompt.config import RunConfig


def tiny_config(**sections) -> RunConfig:
    """Two 16-wide blocks on 48-point clouds; every module enabled."""
    base = RunConfig().replace(
        model={"embed_dim": 16, "depth": 2, "num_heads": 2, "n_patches": 8, "patch_size": 6,
               "tokenizer_hidden": 8, "point_prompts": 6, "prompt_tokens": 2},
        prompter={"centers_per_level": [12, 4], "neighbors_per_level": [6, 3], "widths_per_level": [8, 4],
                  "shift_hidden": 8},
        propagation={"neighbors_K": 3, "k_interp": 4},
        train={"epochs": 2, "warmup_epochs": 1, "batch_size": 4},
        data={"per_class": 4, "n_points": 48, "clutter_points": 6, "test_fraction": 0.25},
    )
    return base.replace(**sections) if sections else base
