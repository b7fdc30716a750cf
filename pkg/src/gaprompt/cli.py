"""Command-line entry point: ``gaprompt <command> [options]``.

Errors go to stderr as one JSON line ``{"error": kind, "message": ..., ...}``.
Exit codes: 0 ok, 1 failed check or diverged run, 2 invalid config or
arguments, 3 missing file, 4 malformed data file.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import checkpoint
from . import diffcore as dc
from .config import ConfigError, DatasetSpec, RunConfig, section_schema
from .data import Dataset, generate, load_manifest, make_sample, write_dataset
from .errors import InvalidArgument, InvalidData, TrainingDiverged
from .model import GAPromptModel, gaprompt_forward
from .seeding import EVAL, derive_seed
from .trainer import count_trainable, evaluate, freeze_for_adaptation, train
from .verify import run_gradcheck

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 1, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


# -- helpers ------------------------------------------------------------------

def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing_file", f"no such file: {path}", path=str(path))
    return p.read_text()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_json(_read_text(path))


def load_dataset_spec(path) -> DatasetSpec:
    text = _read_text(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    errors = sorted(jsonschema.Draft7Validator(section_schema(DatasetSpec)).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if errors:
        ptr = "".join(f"/{p}" for p in errors[0].absolute_path)
        raise ConfigError(ptr, errors[0].message)
    spec = DatasetSpec(**doc)
    if len(set(spec.classes)) != len(spec.classes):
        raise ConfigError("/classes", "duplicate class names")
    return spec


def _stem(out) -> Path:
    out = Path(out)
    return out.with_suffix("") if out.suffix else out


def _write_config(out, cfg: RunConfig) -> Path:
    path = Path(f"{_stem(out)}.config.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_json() + "\n")
    return path


def _metrics_writer(out):
    path = Path(f"{_stem(out)}.metrics.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", encoding="utf-8")

    def log(line: str) -> None:
        fh.write(line + "\n")

    return fh, log


def _dataset(cfg: RunConfig, data_path, seed: int) -> Dataset:
    if data_path is None:
        return generate(cfg.data, seed)
    p = Path(data_path)
    if p.is_dir():
        p = p / "manifest.json"
    _read_text(p)
    ds = load_manifest(p)
    if len(ds.classes) != cfg.model.num_classes:
        raise ConfigError("/model/num_classes", f"dataset has {len(ds.classes)} classes")
    return ds


def _save_model(model: GAPromptModel, out, seed: int, mode: str) -> None:
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    meta = {"config": model.cfg.to_dict(), "seed": seed, "mode": mode}
    checkpoint.save_tensors(out, model.state_dict(), meta)


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise CliError(EXIT_MISSING, "missing_file", f"no such file: {path}", path=str(path))
    return checkpoint.load_tensors(path)


def _model_from_checkpoint(path, cfg: RunConfig | None):
    state, meta = _load_checkpoint(path)
    if cfg is None:
        if "config" not in meta:
            raise InvalidData(f"{path}: checkpoint has no embedded config; pass --config")
        cfg = RunConfig.from_dict(meta["config"])
    model = GAPromptModel(cfg, int(meta.get("seed", 0)))
    model.load_state_dict(state)
    return model, meta


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    spec = load_dataset_spec(args.spec)
    ds = generate(spec, args.seed)
    manifest = write_dataset(ds, spec, args.out, args.seed)
    return {"manifest": str(manifest), "train": len(ds.train), "test": len(ds.test)}


def _run_training(args, cfg: RunConfig, mode: str, backbone=None) -> dict:
    cfg = cfg.replace(train={"mode": mode})
    model = GAPromptModel(cfg, args.seed)
    if backbone is not None:
        state, _ = _load_checkpoint(backbone)
        loaded = model.load_state_dict(state, strict=False, prefix_filter="backbone.")
        if not loaded:
            raise InvalidData(f"{backbone}: no backbone tensors found")
    ds = _dataset(cfg, args.data, args.seed)
    _write_config(args.out, cfg)
    fh, log = _metrics_writer(args.out)
    try:
        result = train(model, ds, cfg, args.seed, log=log)
    finally:
        fh.close()
    _save_model(model, args.out, args.seed, mode)
    final = result.final()
    acct = count_trainable(model)
    return {"checkpoint": str(args.out), "test_accuracy": final.get("accuracy"),
            "test_loss": final.get("loss"), "trainable": acct["trainable"], "ratio": acct["ratio"],
            "max_shift": result.max_shift}


def cmd_pretrain(args) -> dict:
    return _run_training(args, load_config(args.config), "pretrain")


def cmd_adapt(args) -> dict:
    cfg = load_config(args.config)
    mode = cfg.train.mode if cfg.train.mode != "pretrain" else "adapt"
    return _run_training(args, cfg, mode, backbone=args.backbone)


def cmd_eval(args) -> dict:
    cfg = load_config(args.config) if args.config else None
    if args.ckpt:
        model, _ = _model_from_checkpoint(args.ckpt, cfg)
    else:
        model = GAPromptModel(cfg or RunConfig(), args.seed)
    cfg = model.cfg
    ds = _dataset(cfg, args.data, args.seed)
    samples = {"train": ds.train, "test": ds.test, "all": ds.train + ds.test}[args.split]
    x, y, ids = Dataset.arrays(samples)
    ev = evaluate(model, x, y, ids, args.seed, cfg.train.batch_size)
    return {"split": args.split, "n": len(y), "loss": ev["loss"], "accuracy": ev["accuracy"]}


def cmd_gradcheck(args) -> dict:
    cfg = load_config(args.config) if args.config else None
    report = run_gradcheck(cfg, args.seed, max_coords=args.max_coords, step=args.step)
    out = {"max_rel_error": report["max"], "groups": report["groups"], "tolerance": GRADCHECK_TOLERANCE}
    if args.verbose:
        out["params"] = report["params"]
    if not report["max"] <= GRADCHECK_TOLERANCE:
        raise CliError(EXIT_FAIL, "gradcheck_failed",
                       f"max relative error {report['max']:.3e} exceeds {GRADCHECK_TOLERANCE}", **out)
    return out


def cmd_inspect(args) -> dict:
    cfg = load_config(args.config) if args.config else None
    model, meta = _model_from_checkpoint(args.ckpt, cfg)
    cfg = model.cfg
    freeze_for_adaptation(model, meta.get("mode", cfg.train.mode))
    table = [{"name": n, "shape": list(p.shape), "size": p.size, "frozen": p.frozen}
             for n, p in model.named_parameters()]
    acct = count_trainable(model)
    if args.data:
        ds = _dataset(cfg, args.data, args.seed)
        sample = (ds.test or ds.train)[0]
    else:
        sample = make_sample(cfg.data.classes[0], 0, 0, cfg.data, args.seed)
    with dc.no_grad():
        _, diag = gaprompt_forward(model, sample.cloud[None], [derive_seed(args.seed, EVAL, sample.sample_id)])
    csv_path = Path(args.csv) if args.csv else Path(f"{_stem(args.ckpt)}.attention.csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "query", "key", "weight"])
        for b, rows in enumerate(diag.cls_attention):
            for k, wt in enumerate(rows[0]):
                w.writerow([b, 0, k, repr(float(wt))])
    return {"parameters": table, "trainable": acct["trainable"], "total": acct["total"],
            "ratio": acct["ratio"], "flops_estimate": acct["flops_estimate"], "attention_csv": str(csv_path)}


def cmd_experiment(args) -> dict:
    from .experiment import ARMS, default_base, run_seed

    base = load_config(args.config) if args.config else default_base()
    arms = args.arms.split(",") if args.arms else list(ARMS)
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise InvalidArgument(f"unknown arms {unknown}; choose from {list(ARMS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = {}
    for s in seeds:
        res = run_seed(base, s, arms)
        out[str(s)] = {"pretrain_accuracy": res.pretrain_accuracy,
                       "arms": {k: {f.name: getattr(v, f.name) for f in dataclasses.fields(v) if f.name != "records"}
                                for k, v in res.arms.items()}}
    return out


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Report usage errors through the JSON error channel instead of exiting."""

    def error(self, message):
        raise CliError(EXIT_CONFIG, "invalid_argument", message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gaprompt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset (XYZ files + manifest)")
    p.add_argument("--spec", required=True, help="JSON document with dataset fields")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain", cmd_pretrain, "train every parameter on the configured data")
    p.add_argument("--config")
    p.add_argument("--data", help="manifest.json (or its directory); default: generate from config")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = add("adapt", cmd_adapt, "adapt a frozen backbone with the prompt modules")
    p.add_argument("--config")
    p.add_argument("--backbone", required=True, help="checkpoint holding backbone.* tensors")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "accuracy of a checkpoint (or a fresh model) on a split")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of all trainable gradients")
    p.add_argument("--config")
    p.add_argument("--max-coords", type=int, default=6, help="coordinates sampled per parameter")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--verbose", action="store_true")

    p = add("inspect", cmd_inspect, "parameter table, trainable ratio, FLOPs, attention CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--csv", help="attention export path (default <ckpt stem>.attention.csv)")

    p = add("experiment", cmd_experiment, "desk-scale pretrain + adaptation comparison")
    p.add_argument("--config")
    p.add_argument("--seeds", default="0")
    p.add_argument("--arms", help="comma list; default all")
    return ap


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc), pointer=exc.pointer)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc), path=str(exc.filename))
    except InvalidData as exc:
        return _fail(EXIT_DATA, "invalid_data", str(exc))
    except InvalidArgument as exc:
        return _fail(EXIT_CONFIG, "invalid_argument", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_FAIL, "diverged", str(exc), batch_id=exc.batch_id)
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return EXIT_OK


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
