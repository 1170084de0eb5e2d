"""
Procedural street scenes with dense depth, sparse validity, semantic labels
and instance masks, plus the on-disk dataset layout.

Layout::

    <root>/index.csv                      id,split,instances
    <root>/<split>/<id>.rgb.ppm           3 x h x w, P6
    <root>/<split>/<id>.depth.pfm         metres, float32 PFM
    <root>/<split>/<id>.valid.pgm         0 / 255
    <root>/<split>/<id>.seg.pgm           class ids
    <root>/<split>/<id>.inst<k>.pgm       0 / 255, one per instance

Colour is tied to depth on purpose: a small convnet has no monocular cues to
work with, so each class gets a colour ramp driven by the pixel's depth.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import DataFormatError
from .seeding import rng

BACKGROUND, ROAD, CAR, PERSON = range(4)
CLASS_NAMES = ("background", "road", "car", "person")
NUM_CLASSES = len(CLASS_NAMES)

DEPTH_MIN, DEPTH_MAX = 1.0, 100.0


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 5
    object_depth: tuple = (5.0, 50.0)
    sparsity: float = 0.3
    noise: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in (0, 1]")
        if self.height < 8 or self.width < 8:
            raise ValueError("scenes must be at least 8 x 8")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")
        lo, hi = self.object_depth
        if not DEPTH_MIN <= lo <= hi <= DEPTH_MAX:
            raise ValueError("object depth range must lie within [1, 100] m")


@dataclass
class Sample:
    rgb: np.ndarray  # 3 x h x w, integer-valued, [0, 255]
    depth: np.ndarray  # h x w metres
    valid: np.ndarray  # h x w {0, 1}
    seg: np.ndarray  # h x w class ids
    instances: list = field(default_factory=list)  # h x w {0, 1} masks
    instance_classes: list = field(default_factory=list)

    @property
    def shape(self):
        return self.depth.shape


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _colour(label, depth):
    """RGB for a class at a given depth; linear ramps in depth / 100."""
    u = depth / DEPTH_MAX
    if label == BACKGROUND:
        return np.stack([60 + 80 * u, 90 + 90 * u, 150 + 100 * u])
    if label == ROAD:
        v = 30 + 170 * u
        return np.stack([v, v, v + 15])
    if label == CAR:
        return np.stack([250 - 300 * u, 30 + 200 * u, 40 + 0 * u])
    return np.stack([230 - 100 * u, 200 - 250 * u, 250 - 380 * u])


def generate_scene(cfg: SceneConfig) -> Sample:
    g = rng(cfg.seed, "scene")
    h, w = cfg.height, cfg.width
    rows = np.arange(h, dtype=np.float64)

    horizon = int(round(h * g.uniform(0.3, 0.45)))
    far_road, near_road = 60.0, 2.0
    bg_depth = DEPTH_MAX - 40.0 * rows / max(horizon, 1)
    road_depth = far_road - (far_road - near_road) * (rows - horizon) / max(h - 1 - horizon, 1)
    col_depth = np.where(rows < horizon, bg_depth, road_depth)
    depth = np.repeat(col_depth[:, None], w, axis=1)
    seg = np.where(rows[:, None] < horizon, BACKGROUND, ROAD) * np.ones((1, w), dtype=np.int64)
    owner = np.full((h, w), -1, dtype=np.int64)

    n_obj = int(g.integers(cfg.min_objects, cfg.max_objects + 1))
    objs = []
    for _ in range(n_obj):
        label = CAR if g.random() < 0.6 else PERSON
        z = float(g.uniform(*cfg.object_depth))
        objs.append((z, label, g.random(), g.random()))
    # painter's order: far first, near objects occlude
    objs.sort(key=lambda o: -o[0])
    yy, xx = np.mgrid[0:h, 0:w]
    for k, (z, label, fx, fy) in enumerate(objs):
        size = max(3.0, 0.5 * h * 5.0 / z)
        if label == CAR:
            ow, oh = max(4, int(round(1.6 * size))), max(3, int(round(size)))
        else:
            ow, oh = max(2, int(round(0.5 * size))), max(4, int(round(1.3 * size)))
        # rest the object where the road is roughly at its depth, jittered
        if z >= far_road:
            base = horizon
        else:
            base = horizon + (far_road - z) / (far_road - near_road) * (h - 1 - horizon)
        base = int(np.clip(base + (fy - 0.5) * 6, oh, h - 1))
        left = int(fx * max(w - ow, 1))
        if label == CAR:
            m = (yy > base - oh) & (yy <= base) & (xx >= left) & (xx < left + ow)
        else:
            cy, cx = base - (oh - 1) / 2.0, left + (ow - 1) / 2.0
            m = ((yy - cy) / (oh / 2.0)) ** 2 + ((xx - cx) / (ow / 2.0)) ** 2 <= 1.0
        depth[m] = z
        seg[m] = label
        owner[m] = k

    depth = _f32(np.clip(depth, DEPTH_MIN, DEPTH_MAX))
    rgb = np.zeros((3, h, w))
    for label in range(NUM_CLASSES):
        m = seg == label
        if m.any():
            rgb[:, m] = _colour(label, depth[m])
    rgb += g.integers(-cfg.noise, cfg.noise + 1, size=rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255)

    instances, classes = [], []
    for k, (_, label, _, _) in enumerate(objs):
        m = owner == k
        if m.sum() >= 4:
            instances.append(m.astype(np.float64))
            classes.append(label)

    valid = sparsify(depth, cfg.sparsity, rng(cfg.seed, "sparsify"))
    return Sample(rgb, depth, valid, seg.astype(np.float64), instances, classes)


def sparsify(depth: np.ndarray, rate: float, seed) -> np.ndarray:
    """i.i.d. Bernoulli(rate) validity mask over ``depth``'s pixels.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    g = seed if isinstance(seed, np.random.Generator) else rng(seed, "sparsify")
    if rate == 1.0:
        return np.ones(np.shape(depth))
    return (g.random(np.shape(depth)) < rate).astype(np.float64)


def generate_dataset(count: int, seed: int, base: SceneConfig | None = None) -> list:
    base = base or SceneConfig()
    out = []
    for i in range(count):
        sub = int(rng(seed, "scene", i).integers(0, 2**63 - 1))
        out.append(generate_scene(replace(base, seed=sub)))
    return out


def split_indices(count: int, seed: int, val_fraction: float = 0.2) -> dict:
    """Deterministic train/validation split of ``range(count)``."""
    order = rng(seed, "split").permutation(count)
    n_val = int(round(count * val_fraction))
    return {
        "train": sorted(int(i) for i in order[n_val:]),
        "validation": sorted(int(i) for i in order[:n_val]),
    }


def check_sample(s: Sample, num_classes: int = NUM_CLASSES) -> list:
    """Invariant violations for one sample (empty list when clean)."""
    problems = []
    h, w = s.depth.shape
    if s.rgb.shape != (3, h, w):
        problems.append(f"rgb shape {s.rgb.shape}")
    if s.rgb.min() < 0 or s.rgb.max() > 255:
        problems.append("rgb outside [0, 255]")
    if s.depth.min() < DEPTH_MIN or s.depth.max() > DEPTH_MAX:
        problems.append("depth outside [1, 100]")
    if not np.isin(s.valid, (0.0, 1.0)).all():
        problems.append("valid mask not binary")
    if s.seg.min() < 0 or s.seg.max() >= num_classes:
        problems.append("segmentation label out of range")
    cover = np.zeros((h, w))
    for k, m in enumerate(s.instances):
        if not np.isin(m, (0.0, 1.0)).all():
            problems.append(f"instance {k} not binary")
        cover += m
    if (cover > 1).any():
        problems.append("instance masks overlap")
    return problems


# --------------------------------------------------------------------------
# directory layout


def write_sample(directory, sid: str, s: Sample):
    d = Path(directory)
    netpbm.write_ppm(d / f"{sid}.rgb.ppm", s.rgb)
    netpbm.write_pfm(d / f"{sid}.depth.pfm", s.depth)
    netpbm.write_pgm(d / f"{sid}.valid.pgm", s.valid * 255)
    netpbm.write_pgm(d / f"{sid}.seg.pgm", s.seg)
    for k, m in enumerate(s.instances):
        netpbm.write_pgm(d / f"{sid}.inst{k}.pgm", m * 255)


def read_sample(directory, sid: str, n_instances: int) -> Sample:
    d = Path(directory)
    rgb = netpbm.read_pnm(d / f"{sid}.rgb.ppm")
    depth = netpbm.read_pfm(d / f"{sid}.depth.pfm")
    valid = (netpbm.read_pnm(d / f"{sid}.valid.pgm") > 0).astype(np.float64)
    seg = netpbm.read_pnm(d / f"{sid}.seg.pgm")
    instances = [(netpbm.read_pnm(d / f"{sid}.inst{k}.pgm") > 0).astype(np.float64) for k in range(n_instances)]
    # instance class comes from the label map under the mask
    classes = [int(np.bincount(seg[m > 0].astype(np.int64)).argmax()) for m in instances]
    return Sample(rgb, depth, valid, seg, instances, classes)


def write_dataset(root, samples, splits: dict):
    root = Path(root)
    where = {}
    for split, idx in splits.items():
        for i in idx:
            where[i] = split
    rows = []
    for i, s in enumerate(samples):
        split = where.get(i, "train")
        (root / split).mkdir(parents=True, exist_ok=True)
        sid = f"{i:06d}"
        write_sample(root / split, sid, s)
        rows.append((sid, split, len(s.instances)))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "index.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["id", "split", "instances"])
        wr.writerows(rows)


def read_index(root) -> list:
    path = Path(root) / "index.csv"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if rd.fieldnames != ["id", "split", "instances"]:
            raise DataFormatError(f"unexpected manifest columns {rd.fieldnames}", 0)
        return [(r["id"], r["split"], int(r["instances"])) for r in rd]


def load_dataset(root, split: str | None = None, limit: int | None = None) -> list:
    """Return ``[(id, Sample)]`` for ``split`` (all splits when None)."""
    out = []
    for sid, sp, n in read_index(root):
        if split is not None and sp != split:
            continue
        out.append((sid, read_sample(Path(root) / sp, sid, n)))
        if limit is not None and len(out) >= limit:
            break
    return out


def stack(samples) -> dict:
    """Batch a list of Samples into N-leading arrays."""
    return {
        "rgb": np.stack([s.rgb for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "valid": np.stack([s.valid for s in samples]),
        "seg": np.stack([s.seg for s in samples]),
    }


def dataset_root_ok(root) -> bool:
    return os.path.isdir(root) and os.path.exists(os.path.join(root, "index.csv"))
