"""Synthetic shape datasets and XYZ point-cloud files.

Each class is a parametric surface sampled with per-sample random proportions
and orientation. Clouds are normalised (centroid at the origin, max radius 1)
before any corruption. A cluttered sample loses a cap of surface points and
gains uniform background points, keeping the total at ``n_points``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import GENERATORS, DatasetSpec
from .errors import InvalidArgument, InvalidData, ParseError
from .seeding import DATA, SHUFFLE, derive_seed

VARIANTS = ("clean", "noisy", "cluttered")
_SURFACE, _CORRUPT = 0, 1


@dataclass
class ShapeSample:
    cloud: np.ndarray   # (n_points, 3)
    label: int
    variant: str
    sample_id: int
    seed: int
    shape: str = ""


@dataclass
class Dataset:
    train: list[ShapeSample]
    test: list[ShapeSample]
    classes: list[str]

    @staticmethod
    def arrays(samples: list[ShapeSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack samples into (clouds, labels, sample ids)."""
        if not samples:
            return np.zeros((0, 0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return (np.stack([s.cloud for s in samples]),
                np.array([s.label for s in samples], dtype=np.int64),
                np.array([s.sample_id for s in samples], dtype=np.int64))


# -- surface samplers ---------------------------------------------------------
# Each takes (rng, n) and returns n surface points. Centrally symmetric
# shapes draw n // 2 points and append their mirror images, so the centroid
# and the radius profile are exact.

def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _mirrored(sampler):
    def wrapped(rng, n):
        half = sampler(rng, (n + 1) // 2)
        return np.concatenate([half, -half])[:n]
    return wrapped


def _pick_faces(rng, areas, n):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


@_mirrored
def _sphere(rng, n):
    return _unit_vectors(rng, n)


@_mirrored
def _ellipsoid(rng, n):
    axes = np.array([1.0, rng.uniform(0.45, 0.7), rng.uniform(0.2, 0.4)])
    return _unit_vectors(rng, n) * axes


@_mirrored
def _cube(rng, n):
    half = np.array([1.0, rng.uniform(0.8, 1.0), rng.uniform(0.8, 1.0)])
    face_axis = _pick_faces(rng, [half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2, n) % 3
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), face_axis] = sign * half[face_axis]
    return pts


@_mirrored
def _plane(rng, n):
    half = np.array([1.0, rng.uniform(0.6, 1.0), rng.uniform(0.0, 0.02)])
    return rng.uniform(-1.0, 1.0, size=(n, 3)) * half


@_mirrored
def _cylinder(rng, n):
    r, h = rng.uniform(0.4, 0.6), rng.uniform(0.8, 1.2)
    side = _pick_faces(rng, [2 * math.pi * r * 2 * h, 2 * math.pi * r * r], n) == 0
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(side, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(side, rng.uniform(-h, h, size=n), h * rng.choice([-1.0, 1.0], size=n))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


@_mirrored
def _capsule(rng, n):
    r, h = rng.uniform(0.3, 0.45), rng.uniform(0.5, 0.8)
    body = _pick_faces(rng, [2 * math.pi * r * 2 * h, 4 * math.pi * r * r], n) == 0
    theta = rng.uniform(0, 2 * math.pi, size=n)
    cyl = np.stack([r * np.cos(theta), r * np.sin(theta), rng.uniform(-h, h, size=n)], axis=1)
    cap = _unit_vectors(rng, n) * r
    cap[:, 2] += np.sign(cap[:, 2]) * h
    return np.where(body[:, None], cyl, cap)


@_mirrored
def _torus(rng, n):
    big, small = 1.0, rng.uniform(0.25, 0.4)
    # rejection-free area weighting: accept the tube angle with prob ~ (R + r cos v)
    u = rng.uniform(0, 2 * math.pi, size=n)
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0, 2 * math.pi, size=2 * (n - filled))
        keep = cand[rng.uniform(0, big + small, size=cand.size) < big + small * np.cos(cand)]
        take = min(keep.size, n - filled)
        v[filled:filled + take] = keep[:take]
        filled += take
    ring = big + small * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)


def _cone(rng, n):
    r, h = rng.uniform(0.5, 0.8), rng.uniform(1.0, 1.5)
    slant = math.hypot(r, h)
    lateral = _pick_faces(rng, [math.pi * r * slant, math.pi * r * r], n) == 0
    theta = rng.uniform(0, 2 * math.pi, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n))   # area-uniform along the slant
    rad = np.where(lateral, r * t, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(lateral, h * (1.0 - t), 0.0)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


_SAMPLERS = {
    "sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone,
    "torus": _torus, "plane": _plane, "capsule": _capsule, "ellipsoid": _ellipsoid,
}
assert tuple(_SAMPLERS) == GENERATORS


def _random_rotation(rng) -> np.ndarray:
    """Upright orientation: a random yaw about z plus a small tilt."""
    yaw = rng.uniform(0, 2 * math.pi)
    tilt = rng.uniform(-0.1, 0.1)
    cy, sy, ct, st = math.cos(yaw), math.sin(yaw), math.cos(tilt), math.sin(tilt)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
    return rz @ rx


def normalize(cloud: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale the farthest point to radius 1."""
    cloud = np.asarray(cloud, dtype=np.float64)
    centred = cloud - cloud.mean(axis=0)
    radius = np.sqrt((centred * centred).sum(axis=1)).max()
    return centred / radius if radius > 0 else centred


def sample_surface(shape: str, n: int, seed) -> np.ndarray:
    """``n`` normalised points on a randomly proportioned, randomly rotated ``shape``."""
    if shape not in _SAMPLERS:
        raise InvalidArgument(f"unknown generator {shape!r}; expected one of {list(GENERATORS)}")
    if n < 1:
        raise InvalidArgument(f"need at least one point, got {n}")
    rng = np.random.default_rng(seed)
    pts = _SAMPLERS[shape](rng, n)
    return normalize(pts @ _random_rotation(rng).T)


def surface_count(spec: DatasetSpec) -> int:
    """Surface points to draw so that cropping and clutter land on n_points."""
    if spec.variant != "cluttered":
        return spec.n_points
    keep = spec.n_points - spec.clutter_points
    if keep < 1:
        raise InvalidArgument("clutter_points must be smaller than n_points")
    return math.ceil(keep / (1.0 - spec.crop_fraction))


def corrupt(cloud: np.ndarray, spec: DatasetSpec, seed) -> np.ndarray:
    """Apply ``spec.variant``: jitter, then (cluttered) crop a cap and add background."""
    rng = np.random.default_rng(seed)
    out = np.array(cloud, dtype=np.float64)
    if spec.variant == "clean":
        return out
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    if spec.variant == "noisy":
        return out
    keep = spec.n_points - spec.clutter_points
    if out.shape[0] > keep:
        direction = _unit_vectors(rng, 1)[0]
        order = np.argsort(out @ direction, kind="stable")
        out = out[np.sort(order[:keep])]
    if spec.clutter_points:
        out = np.concatenate([out, rng.uniform(-1.0, 1.0, size=(spec.clutter_points, 3))])
    return out


def make_sample(shape: str, label: int, sample_id: int, spec: DatasetSpec, seed: int = 0) -> ShapeSample:
    gen = GENERATORS.index(shape) if shape in GENERATORS else -1
    if gen < 0:
        raise InvalidArgument(f"unknown generator {shape!r}; expected one of {list(GENERATORS)}")
    surface_seed = derive_seed(seed, DATA, _SURFACE, gen, sample_id)
    cloud = sample_surface(shape, surface_count(spec), surface_seed)
    cloud = corrupt(cloud, spec, derive_seed(seed, DATA, _CORRUPT, gen, sample_id))
    return ShapeSample(cloud, label, spec.variant, sample_id, surface_seed, shape)


def split_indices(spec: DatasetSpec) -> tuple[list[int], list[int]]:
    """Class-balanced disjoint train/test sample ids, fixed by split_seed."""
    n_test = max(1, round(spec.per_class * spec.test_fraction))
    if n_test >= spec.per_class:
        raise InvalidArgument("test_fraction leaves no training samples")
    train, test = [], []
    for c in range(len(spec.classes)):
        perm = np.random.default_rng(derive_seed(spec.split_seed, SHUFFLE, c)).permutation(spec.per_class)
        ids = c * spec.per_class + perm
        test.extend(sorted(ids[:n_test].tolist()))
        train.extend(sorted(ids[n_test:].tolist()))
    return sorted(train), sorted(test)


def generate(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    """Deterministic train/test samples for ``spec``.

    ``seed`` drives shape sampling (default ``spec.split_seed``); each sample's
    randomness depends only on its generator, its id, and that seed.
    """
    if spec.per_class < 2:
        raise InvalidArgument("per_class must be >= 2")
    for name in spec.classes:
        if name not in _SAMPLERS:
            raise InvalidArgument(f"unknown generator {name!r}; expected one of {list(GENERATORS)}")
    if spec.variant not in VARIANTS:
        raise InvalidArgument(f"unknown variant {spec.variant!r}")
    seed = spec.split_seed if seed is None else seed
    train_ids, test_ids = split_indices(spec)

    def build(ids):
        return [make_sample(spec.classes[i // spec.per_class], i // spec.per_class, i, spec, seed) for i in ids]

    return Dataset(build(train_ids), build(test_ids), list(spec.classes))


# -- files --------------------------------------------------------------------

def write_xyz(path, cloud) -> None:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise InvalidArgument(f"write_xyz expects an N x 3 array, got {cloud.shape}")
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in cloud:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, found {len(parts)}", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ParseError(f"not a number in {line.strip()!r}", lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite coordinate", lineno)
            rows.append(vals)
    if not rows:
        raise InvalidData(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def write_dataset(ds: Dataset, spec: DatasetSpec, out_dir, seed: int | None = None) -> Path:
    """Write every sample as XYZ plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for split, samples in (("train", ds.train), ("test", ds.test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for s in samples:
            rel = f"{split}/{s.sample_id:06d}.xyz"
            write_xyz(out / rel, s.cloud)
            entries.append({"file": rel, "split": split, "sample_id": s.sample_id, "label": s.label,
                            "shape": s.shape, "variant": s.variant, "seed": s.seed})
    manifest = {"spec": asdict(spec), "seed": spec.split_seed if seed is None else seed,
                "classes": ds.classes, "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> Dataset:
    """Read a manifest written by ``write_dataset`` back into a Dataset."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidData(f"{path}: invalid manifest JSON ({exc})") from None
    for key in ("classes", "samples"):
        if key not in doc:
            raise InvalidData(f"{path}: manifest lacks {key!r}")
    train, test = [], []
    for e in doc["samples"]:
        sample = ShapeSample(read_xyz(path.parent / e["file"]), int(e["label"]), e["variant"],
                             int(e["sample_id"]), int(e["seed"]), e.get("shape", ""))
        (train if e["split"] == "train" else test).append(sample)
    return Dataset(train, test, list(doc["classes"]))
