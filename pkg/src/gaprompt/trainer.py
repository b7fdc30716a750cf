"""Training loops: freezing, AdamW, warmup + cosine schedule, metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .config import RunConfig, TrainConfig
from .data import Dataset
from .errors import InvalidArgument, TrainingDiverged
from .model import GAPromptModel, gaprompt_forward
from .prompt_core import resolve_centers
from .seeding import AUGMENT, EVAL, SHUFFLE, TRAIN, derive_seed

MODES = ("pretrain", "adapt", "linear_probe")


def freeze_for_adaptation(model: GAPromptModel, mode: str = "adapt") -> list[str]:
    """Set frozen flags for ``mode``; returns the frozen parameter names.

    adapt freezes the backbone (tokenizer, blocks, final norm); linear_probe
    freezes everything except the head; pretrain freezes nothing.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown training mode {mode!r}")
    for name, p in model.named_parameters():
        if mode == "pretrain":
            p.frozen = False
        elif mode == "linear_probe":
            p.frozen = not name.startswith("head.")
        else:
            p.frozen = name.startswith("backbone.")
    return [name for name, p in model.named_parameters() if p.frozen]


class AdamW:
    """Adaptive moments with decoupled weight decay; skips frozen parameters."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0 at the last step."""
    if step < 0:
        raise InvalidArgument("step must be >= 0")
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.lr * step / warmup
    if total <= warmup:
        return cfg.lr
    frac = min(1.0, (step - warmup) / (total - warmup))
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def augment(clouds: np.ndarray, sample_ids, seed: int, epoch: int, cfg: TrainConfig) -> np.ndarray:
    """Per-sample anisotropic scaling and translation, seeded by sample id."""
    out = np.empty_like(clouds)
    for i, sid in enumerate(sample_ids):
        rng = np.random.default_rng(derive_seed(seed, AUGMENT, epoch, int(sid)))
        scale = rng.uniform(cfg.scale_low, cfg.scale_high, size=3)
        shift = rng.uniform(-cfg.translate, cfg.translate, size=3)
        out[i] = clouds[i] * scale + shift
    return out


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    max_shift: float = 0.0
    steps: int = 0
    frozen: list[str] = field(default_factory=list)

    def final(self, split: str = "test") -> dict:
        rows = [r for r in self.records if r["split"] == split]
        return rows[-1] if rows else {}


def metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def eval_seeds(seed: int, sample_ids) -> list[int]:
    return [derive_seed(seed, EVAL, int(s)) for s in sample_ids]


def evaluate(model: GAPromptModel, clouds, labels, sample_ids, seed: int = 0, batch_size: int = 16,
             on_batch: Callable | None = None) -> dict:
    """Mean cross-entropy and accuracy; seeds depend on sample ids only."""
    n = len(labels)
    if n == 0:
        return {"loss": float("nan"), "accuracy": float("nan")}
    losses, correct = [], 0
    with dc.no_grad():
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            logits, diag = gaprompt_forward(model, clouds[sl], eval_seeds(seed, sample_ids[sl]))
            if on_batch is not None:
                on_batch("eval", s // batch_size, sample_ids[sl], clouds[sl], diag)
            lab = np.asarray(labels[sl])
            losses.append(dc.cross_entropy(logits, lab).item() * len(lab))
            correct += int((logits.data.argmax(axis=1) == lab).sum())
    return {"loss": float(sum(losses) / n), "accuracy": correct / n}


def _snapshot(model, names):
    params = dict(model.named_parameters())
    return {n: params[n].data.copy() for n in names}


def _audit(model, snap) -> None:
    params = dict(model.named_parameters())
    for name, ref in snap.items():
        cur = params[name].data
        if cur.shape != ref.shape or cur.tobytes() != ref.tobytes():
            raise RuntimeError(f"frozen parameter {name} changed during training")


def train(model: GAPromptModel, dataset: Dataset, cfg: RunConfig | None = None, seed: int = 0,
          log: Callable[[str], None] | None = None, on_batch: Callable | None = None,
          mode: str | None = None) -> TrainResult:
    """Run ``cfg.train.epochs`` epochs; returns per-epoch train/test records.

    Epoch 0 is the evaluation before any update. ``log`` receives one JSON line
    per record. Frozen parameters are audited bitwise after every epoch.
    """
    cfg = cfg or model.cfg
    tc = cfg.train
    if not dataset.train:
        raise InvalidArgument("training set is empty")
    result = TrainResult()
    result.frozen = freeze_for_adaptation(model, mode or tc.mode)
    snap = _snapshot(model, result.frozen)
    xtr, ytr, idtr = Dataset.arrays(dataset.train)
    xte, yte, idte = Dataset.arrays(dataset.test)
    trainable = [p for p in model.parameters() if not p.frozen]
    opt = AdamW(trainable, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    spe = math.ceil(len(ytr) / tc.batch_size)

    def track(split, batch, ids, clouds, diag):
        result.max_shift = max(result.max_shift, diag.max_shift)
        if on_batch is not None:
            on_batch(split, batch, ids, clouds, diag)

    def emit(rec):
        result.records.append(rec)
        if log is not None:
            log(metrics_line(rec))

    def test_record(epoch):
        ev = evaluate(model, xte, yte, idte, seed, tc.batch_size, track)
        emit({"epoch": epoch, "split": "test", "loss": ev["loss"], "accuracy": ev["accuracy"]})

    test_record(0)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = np.random.default_rng(derive_seed(seed, SHUFFLE, epoch)).permutation(len(ytr))
        loss_sum, correct = 0.0, 0
        for b in range(spe):
            sel = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            clouds, labels, ids = xtr[sel], ytr[sel], idtr[sel]
            if tc.augment:
                clouds = augment(clouds, ids, seed, epoch, tc)
            model.zero_grad()
            logits, diag = gaprompt_forward(model, clouds, [derive_seed(seed, TRAIN, epoch, int(s)) for s in ids])
            track("train", b, ids, clouds, diag)
            loss = dc.cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b}", step,
                                       {"epoch": epoch, "batch": b, "sample_ids": ids.tolist(), "loss": value})
            dc.backward(loss, trainable)
            step += 1
            opt.step(lr_at(step, tc, spe))
            loss_sum += value * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        _audit(model, snap)
        emit({"epoch": epoch, "split": "train", "loss": loss_sum / len(ytr), "accuracy": correct / len(ytr)})
        test_record(epoch)
    result.steps = step
    return result


# -- accounting ---------------------------------------------------------------

def flops_estimate(cfg: RunConfig) -> int:
    """Multiply-add count x 2 for one forward pass of one cloud (matmul terms only)."""
    m, sp, pc = cfg.model, cfg.prompter, cfg.propagation
    d, n_pts = m.embed_dim, cfg.data.n_points
    total = 0
    if m.use_prompter:
        widths = sp.widths_per_level
        for j, (c, k, w) in enumerate(zip(sp.centers_per_level, sp.neighbors_per_level, widths)):
            in_dim = 3 + (3 if sp.abs_coords else 0) + (widths[j - 1] if j else 0)
            total += 2 * c * k * (in_dim * w + w * w)
        for j in range(sp.levels - 1):
            c, w = sp.centers_per_level[j], widths[j]
            total += 2 * c * ((widths[j + 1] + w) * w + w * w)
        if m.use_shift and sp.shift_scale > 0:
            w1 = widths[0]
            total += 2 * n_pts * (2 * w1 * w1 + 2 * w1 * sp.shift_hidden + sp.shift_hidden * 3)
    h = m.tokenizer_hidden
    g, k = m.n_patches, m.patch_size
    total += 2 * g * k * (3 * h + h * h + 2 * h * 2 * h + 2 * h * d)
    total += 2 * g * (3 * h + h * d)
    lp = m.prompt_tokens
    seq = 1 + g + lp
    hidden = int(d * m.mlp_ratio)
    per_block = 2 * (4 * seq * d * d + 2 * seq * seq * d + 2 * seq * d * hidden)
    if m.use_adapters:
        per_block += 2 * seq * 2 * d * m.bottleneck
    total += m.depth * per_block
    if m.use_propagation and lp > 0:
        n_blocks = m.depth if pc.blocks is None else len(pc.blocks)
        c = resolve_centers(pc, g)
        total += n_blocks * 2 * (g * c * d + g * min(pc.k_interp, c) * d)
    head_in = d * len(cfg.head.inputs)
    total += 2 * (head_in * cfg.head.hidden + cfg.head.hidden * m.num_classes if cfg.head.hidden
                  else head_in * m.num_classes)
    return int(total)


def count_trainable(model: GAPromptModel) -> dict:
    trainable = sum(p.size for p in model.parameters() if not p.frozen)
    total = model.num_parameters()
    return {"trainable": int(trainable), "total": int(total),
            "ratio": trainable / total if total else 0.0,
            "flops_estimate": flops_estimate(model.cfg)}
