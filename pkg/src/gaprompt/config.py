"""Configuration records and their JSON form.

Every section is a dataclass; ``RunConfig.from_dict`` validates a JSON
document against the generated schema (unknown keys rejected) and then
checks cross-field invariants. Errors carry a JSON pointer to the bad field.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import jsonschema

from .errors import InvalidArgument

GENERATORS = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "capsule", "ellipsoid")
HEAD_INPUTS = ("cls", "max_patch", "max_prompt", "shape_feature")


class ConfigError(InvalidArgument):
    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"{pointer or '(root)'}: {message}")


def _f(default, minimum=None, exclusive_minimum=None, maximum=None, min_items=None, doc=""):
    meta = {"doc": doc}
    if minimum is not None:
        meta["minimum"] = minimum
    if exclusive_minimum is not None:
        meta["exclusiveMinimum"] = exclusive_minimum
    if maximum is not None:
        meta["maximum"] = maximum
    if min_items is not None:
        meta["minItems"] = min_items
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class ShiftPrompterConfig:
    centers_per_level: list[int] = _f([128, 6], min_items=1, doc="C_j, strictly decreasing")
    neighbors_per_level: list[int] = _f([16, 8], min_items=1, doc="K_j")
    widths_per_level: list[int] = _f([32, 16], min_items=1, doc="D_j; C_k * D_k must equal embed_dim")
    shift_scale: float = _f(0.05, minimum=0.0, doc="max per-coordinate displacement")
    beta_p: float = _f(0.5, doc="prompt enhancement factor")
    beta_a: float = _f(0.5, doc="adapter enhancement factor")
    abs_coords: bool = _f(True, doc="feed absolute neighbor coordinates next to relative ones")
    decode_k: int = _f(3, minimum=1, doc="nearest centers used when upsampling features")
    shift_hidden: int = _f(32, minimum=1)

    @property
    def levels(self) -> int:
        return len(self.centers_per_level)


@dataclass
class PropagationConfig:
    variant: Literal["replacement", "permutation"] = _f("permutation")
    placement: Literal["before_attn", "after_attn"] = _f("after_attn")
    centers_C: Optional[int] = _f(None, minimum=1, doc="token centers; default L_t // 2")
    neighbors_K: int = _f(8, minimum=1)
    k_interp: int = _f(32, minimum=1)
    power: float = _f(2.0, exclusive_minimum=0.0)
    epsilon: float = _f(1e-8, exclusive_minimum=0.0)
    residual: bool = _f(False, doc="h + propagated instead of overwrite")
    metric: Literal["feature", "center3d"] = _f("feature", doc="space used for token FPS/KNN")
    blocks: Optional[list[int]] = _f(None, doc="block indices using propagation; default all")


@dataclass
class HeadConfig:
    inputs: list[Literal["cls", "max_patch", "max_prompt", "shape_feature"]] = _f(
        ["cls", "max_patch", "shape_feature"], min_items=1)
    hidden: int = _f(0, minimum=0, doc="0 means a single linear layer")


@dataclass
class ModelConfig:
    embed_dim: int = _f(96, minimum=1)
    depth: int = _f(4, minimum=1)
    num_heads: int = _f(2, minimum=1)
    mlp_ratio: float = _f(4.0, exclusive_minimum=0.0)
    n_patches: int = _f(32, minimum=1)
    patch_size: int = _f(16, minimum=1)
    tokenizer_hidden: int = _f(32, minimum=1)
    num_classes: int = _f(4, minimum=2)
    adapter_dim: Optional[int] = _f(None, minimum=1, doc="bottleneck width; default embed_dim // 8")
    use_adapters: bool = _f(True)
    point_prompts: int = _f(20, minimum=0, doc="P, learnable points; 0 disables")
    prompt_range: float = _f(1.0, exclusive_minimum=0.0, doc="r, init half-width")
    prompt_init: Literal["uniform", "cluster"] = _f("uniform")
    prompt_tokens: int = _f(4, minimum=0, doc="L_p per block; 0 disables")
    use_prompter: bool = _f(True)
    use_shift: bool = _f(True)
    prompt_enhance: bool = _f(True)
    adapter_enhance: bool = _f(True)
    use_propagation: bool = _f(True)

    @property
    def bottleneck(self) -> int:
        return self.adapter_dim or max(1, self.embed_dim // 8)


@dataclass
class TrainConfig:
    mode: Literal["pretrain", "adapt", "linear_probe"] = _f("adapt")
    lr: float = _f(5e-4, exclusive_minimum=0.0)
    weight_decay: float = _f(5e-2, minimum=0.0)
    warmup_epochs: int = _f(10, minimum=0)
    epochs: int = _f(30, minimum=0)
    batch_size: int = _f(16, minimum=1)
    beta1: float = _f(0.9, minimum=0.0, maximum=1.0)
    beta2: float = _f(0.999, minimum=0.0, maximum=1.0)
    eps: float = _f(1e-8, exclusive_minimum=0.0)
    augment: bool = _f(True, doc="random scale and translation")
    scale_low: float = _f(0.8, exclusive_minimum=0.0)
    scale_high: float = _f(1.2, exclusive_minimum=0.0)
    translate: float = _f(0.1, minimum=0.0)


@dataclass
class DatasetSpec:
    classes: list[Literal[GENERATORS]] = _f(["torus", "plane", "capsule", "ellipsoid"], min_items=2)
    per_class: int = _f(40, minimum=2)
    n_points: int = _f(256, minimum=1)
    variant: Literal["clean", "noisy", "cluttered"] = _f("cluttered")
    noise_sigma: float = _f(0.01, minimum=0.0)
    crop_fraction: float = _f(0.15, minimum=0.0, maximum=0.9)
    clutter_points: int = _f(24, minimum=0)
    test_fraction: float = _f(0.25, exclusive_minimum=0.0, maximum=0.5)
    split_seed: int = _f(0, minimum=0)


SECTIONS = {
    "model": ModelConfig,
    "prompter": ShiftPrompterConfig,
    "propagation": PropagationConfig,
    "head": HeadConfig,
    "train": TrainConfig,
    "data": DatasetSpec,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prompter: ShiftPrompterConfig = field(default_factory=ShiftPrompterConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    # -- JSON round trip --------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        validator = jsonschema.Draft7Validator(run_config_schema())
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            raise ConfigError(_pointer(err.absolute_path), err.message)
        cfg = cls(**{name: sec(**doc.get(name, {})) for name, sec in SECTIONS.items()})
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    def replace(self, **sections) -> "RunConfig":
        """Copy with some sections' fields overridden, e.g. ``model={"depth": 2}``."""
        doc = self.to_dict()
        for name, overrides in sections.items():
            doc[name].update(overrides)
        return RunConfig.from_dict(doc)

    # -- cross-field invariants ------------------------------------------
    def validate(self) -> None:
        m, sp, pc, tr = self.model, self.prompter, self.propagation, self.train
        if m.embed_dim % m.num_heads:
            raise ConfigError("/model/num_heads", "must divide embed_dim")
        if not (len(sp.centers_per_level) == len(sp.neighbors_per_level) == len(sp.widths_per_level)):
            raise ConfigError("/prompter/neighbors_per_level", "per-level lists must have equal length")
        for j in range(1, sp.levels):
            if sp.centers_per_level[j] >= sp.centers_per_level[j - 1]:
                raise ConfigError(f"/prompter/centers_per_level/{j}", "center counts must strictly decrease")
        if m.use_prompter and sp.centers_per_level[-1] * sp.widths_per_level[-1] != m.embed_dim:
            raise ConfigError("/prompter/widths_per_level", "C_k * D_k must equal model.embed_dim")
        for j, (c, k) in enumerate(zip(sp.centers_per_level, sp.neighbors_per_level)):
            ref = self.data.n_points if j == 0 else sp.centers_per_level[j - 1]
            if k > ref:
                raise ConfigError(f"/prompter/neighbors_per_level/{j}", f"K_j={k} exceeds the {ref} points available")
        if m.use_prompter and sp.centers_per_level[0] > self.data.n_points:
            raise ConfigError("/prompter/centers_per_level/0", "C_1 exceeds data.n_points")
        if m.n_patches > self.data.n_points + m.point_prompts:
            raise ConfigError("/model/n_patches", "more patches than input points")
        if m.patch_size > self.data.n_points + m.point_prompts:
            raise ConfigError("/model/patch_size", "patch larger than the cloud")
        if m.use_propagation:
            c = pc.centers_C if pc.centers_C is not None else max(1, m.n_patches // 2)
            if c > m.n_patches:
                raise ConfigError("/propagation/centers_C", "exceeds the patch-token count")
            if c < m.prompt_tokens:
                raise ConfigError("/propagation/centers_C", "must be >= model.prompt_tokens")
            if pc.neighbors_K > m.n_patches:
                raise ConfigError("/propagation/neighbors_K", "exceeds the patch-token count")
            for i, b in enumerate(pc.blocks or []):
                if not 0 <= b < m.depth:
                    raise ConfigError(f"/propagation/blocks/{i}", "block index out of range")
        if "shape_feature" in self.head.inputs and not m.use_prompter:
            raise ConfigError("/head/inputs", "shape_feature needs model.use_prompter")
        if "max_prompt" in self.head.inputs and m.prompt_tokens == 0:
            raise ConfigError("/head/inputs", "max_prompt needs model.prompt_tokens > 0")
        if len(set(self.head.inputs)) != len(self.head.inputs):
            raise ConfigError("/head/inputs", "duplicate entries")
        if tr.epochs > 0 and tr.warmup_epochs >= tr.epochs:
            raise ConfigError("/train/warmup_epochs", "must be < epochs")
        if tr.scale_low > tr.scale_high:
            raise ConfigError("/train/scale_low", "must be <= scale_high")
        if len(set(self.data.classes)) != len(self.data.classes):
            raise ConfigError("/data/classes", "duplicate class names")
        if len(self.data.classes) != m.num_classes:
            raise ConfigError("/model/num_classes", "must equal the number of data classes")


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


# -- schema generation ---------------------------------------------------

def _type_schema(tp) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        return {"anyOf": [_type_schema(inner[0]), {"type": "null"}]}
    if origin is Literal:
        values = args[0] if len(args) == 1 and isinstance(args[0], tuple) else args
        return {"enum": list(values)}
    if origin is list:
        return {"type": "array", "items": _type_schema(args[0])}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    raise TypeError(f"no schema mapping for {tp!r}")


def section_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        sch = _type_schema(hints[f.name])
        target = sch["anyOf"][0] if "anyOf" in sch else sch
        for key in ("minimum", "exclusiveMinimum", "maximum"):
            if key in f.metadata:
                (target["items"] if target.get("type") == "array" else target)[key] = f.metadata[key]
        if "minItems" in f.metadata:
            target["minItems"] = f.metadata["minItems"]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        sch["default"] = default
        if f.metadata.get("doc"):
            sch["description"] = f.metadata["doc"]
        props[f.name] = sch
    return {"type": "object", "properties": props, "additionalProperties": False}


def run_config_schema() -> dict:
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "gaprompt run configuration",
        "type": "object",
        "properties": {name: section_schema(sec) for name, sec in SECTIONS.items()},
        "additionalProperties": False,
    }


# -- profiles --------------------------------------------------------------

def toy_profile() -> RunConfig:
    """Desk-scale defaults: 4 blocks, D=96, 256-point clouds."""
    return RunConfig()


def full_scale_profile() -> RunConfig:
    """12 blocks, D=384, 2048 points, 128 patches of 32 (parameter counting only)."""
    return RunConfig(
        model=ModelConfig(embed_dim=384, depth=12, num_heads=6, n_patches=128, patch_size=32,
                          tokenizer_hidden=256),
        prompter=ShiftPrompterConfig(centers_per_level=[128, 6], neighbors_per_level=[16, 8],
                                     widths_per_level=[64, 64]),
        train=TrainConfig(epochs=400, batch_size=32, warmup_epochs=10),
        data=DatasetSpec(n_points=2048),
    )


def schema_json() -> str:
    return json.dumps(run_config_schema(), indent=2, sort_keys=True) + "\n"
