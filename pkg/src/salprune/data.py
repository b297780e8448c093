"""Synthetic detection data: generation, disk I/O, and balanced sample selection.

A dataset split on disk is::

    <root>/<split>/images/<sample_id>.png
    <root>/<split>/annotations.json   # sample_id -> [[x0, y0, x1, y1, class_id], ...]
    <root>/<split>/manifest.json

Boxes are pixel coordinates with origin at the top-left corner.
"""

from __future__ import annotations

import colorsys
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError

# Area-bucket edges for a 640px reference image; generation rescales them with
# the image size so the small/medium/large mix keeps its meaning at desk scale.
SMALL_EDGE = 32.0
LARGE_EDGE = 96.0
REFERENCE_IMAGE_SIZE = 640

DEFAULT_SIZE_MIX = {"small": 0.3, "medium": 0.4, "large": 0.3}

_MIN_SIDE = 5.0
_MAX_SIDE_FRAC = 0.35


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max, self.class_id]


@dataclass
class DetectionSample:
    image: np.ndarray  # HxWx3 float32 in [0, 1]
    boxes: list[BBox]
    sample_id: str


@dataclass
class DatasetManifest:
    split: str
    n_images: int
    class_counts: dict[int, int]
    image_size: int
    seed: int

    def to_json_dict(self) -> dict:
        return {
            "split": self.split,
            "n_images": self.n_images,
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "image_size": self.image_size,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetManifest":
        return cls(
            split=data["split"],
            n_images=data["n_images"],
            class_counts={int(k): v for k, v in data["class_counts"].items()},
            image_size=data["image_size"],
            seed=data["seed"],
        )


def area_bucket_edges(image_size: int) -> tuple[float, float]:
    """(small/medium, medium/large) area thresholds scaled to the image size."""
    scale = image_size / REFERENCE_IMAGE_SIZE
    return (SMALL_EDGE * scale) ** 2, (LARGE_EDGE * scale) ** 2


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _class_color(class_id: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    hue = (class_id / max(n_classes, 1) + rng.uniform(-0.06, 0.06)) % 1.0
    sat = rng.uniform(0.7, 1.0)
    val = rng.uniform(0.6, 1.0)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)


def _shape_mask(shape_idx: int, hh: int, ww: int) -> np.ndarray:
    """Boolean mask of one shape filling an hh x ww box; touches all four sides."""
    yy, xx = np.mgrid[0:hh, 0:ww]
    # normalized coordinates in [-1, 1] at pixel centers
    ny = (yy + 0.5) / hh * 2.0 - 1.0
    nx = (xx + 0.5) / ww * 2.0 - 1.0
    kind = shape_idx % 6
    if kind == 0:  # ellipse
        return nx**2 + ny**2 <= 1.0
    if kind == 1:  # rectangle
        return np.ones((hh, ww), dtype=bool)
    if kind == 2:  # upward triangle
        return np.abs(nx) <= (ny + 1.0) / 2.0
    if kind == 3:  # diamond
        return np.abs(nx) + np.abs(ny) <= 1.0
    if kind == 4:  # plus sign
        return (np.abs(nx) <= 1.0 / 3.0) | (np.abs(ny) <= 1.0 / 3.0)
    # ring
    r2 = nx**2 + ny**2
    return (r2 <= 1.0) & (r2 >= 0.25)


def _cluttered_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Cluttered background: smooth color field, tint blobs, streaks, and muted
    shape-like distractors that are not annotated."""
    coarse = rng.uniform(0.25, 0.6, size=(4, 4, 3))
    img = np.kron(coarse, np.ones((size // 4, size // 4, 1)))
    img += rng.normal(0.0, 0.03, size=img.shape)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(4, 9)):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(2, size / 8)
        blob = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r**2
        tint = rng.uniform(-0.15, 0.15, size=3)
        img[blob] = np.clip(img[blob] + tint, 0.0, 1.0)
    for _ in range(rng.integers(2, 5)):
        x0 = rng.integers(0, size)
        width = int(rng.integers(1, 3))
        shade = rng.uniform(-0.1, 0.1)
        if rng.random() < 0.5:
            img[:, x0 : x0 + width] = np.clip(img[:, x0 : x0 + width] + shade, 0, 1)
        else:
            img[x0 : x0 + width, :] = np.clip(img[x0 : x0 + width, :] + shade, 0, 1)
    # desaturated shape decoys: force the detector to use color, not outline alone
    for _ in range(rng.integers(2, 6)):
        side = int(rng.uniform(6, size / 6))
        x0 = int(rng.integers(0, size - side))
        y0 = int(rng.integers(0, size - side))
        mask = _shape_mask(int(rng.integers(0, 6)), side, side)
        gray = rng.uniform(0.2, 0.7)
        tone = np.array([gray, gray, gray]) + rng.uniform(-0.08, 0.08, size=3)
        region = img[y0 : y0 + side, x0 : x0 + side]
        region[mask] = np.clip(0.5 * region[mask] + 0.5 * tone, 0.0, 1.0)
    return np.clip(img, 0.0, 1.0)


def _sample_bucket(rng: np.random.Generator, size_mix: dict[str, float], class_id: int,
                   small_class: int) -> str:
    names = ("small", "medium", "large")
    weights = np.array([size_mix.get(n, 0.0) for n in names], dtype=np.float64)
    if class_id == small_class:
        # one class is rendered predominantly small; never widens the mix support
        weights = weights * np.array([3.0, 1.0, 0.3])
    total = weights.sum()
    if total <= 0:
        raise ConfigurationError("size_mix has no positive fraction")
    return names[int(rng.choice(3, p=weights / total))]


def _sample_box_geometry(rng: np.random.Generator, bucket: str, image_size: int
                         ) -> tuple[float, float]:
    small_edge2, large_edge2 = area_bucket_edges(image_size)
    max_area = (image_size * _MAX_SIDE_FRAC) ** 2
    min_area = _MIN_SIDE**2
    if bucket == "small":
        lo, hi = min_area, min(small_edge2, max_area)
    elif bucket == "medium":
        lo, hi = small_edge2, min(large_edge2, max_area)
    else:
        lo, hi = large_edge2, max_area
    lo = min(lo, hi * 0.999)  # degenerate guard for tiny images
    area = rng.uniform(lo, hi)
    aspect = rng.uniform(0.6, 1.6)
    w = math.sqrt(area * aspect)
    h = math.sqrt(area / aspect)
    w = min(max(w, _MIN_SIDE * 0.8), image_size * _MAX_SIDE_FRAC)
    h = min(max(h, _MIN_SIDE * 0.8), image_size * _MAX_SIDE_FRAC)
    return w, h


def _boxes_overlap(a: tuple, b: tuple) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def render_sample(rng: np.random.Generator, image_size: int, n_classes: int,
                  size_mix: dict[str, float], sample_id: str) -> DetectionSample:
    """Draw one image with 1-4 non-crowded shape instances."""
    img = _cluttered_background(rng, image_size)
    small_class = n_classes - 1
    n_objects = int(rng.integers(1, 5))
    boxes: list[BBox] = []
    placed: list[tuple] = []
    for _ in range(n_objects):
        class_id = int(rng.integers(0, n_classes))
        bucket = _sample_bucket(rng, size_mix, class_id, small_class)
        w, h = _sample_box_geometry(rng, bucket, image_size)
        for _attempt in range(12):
            x0 = rng.uniform(1.0, image_size - w - 1.0)
            y0 = rng.uniform(1.0, image_size - h - 1.0)
            cand = (x0, y0, x0 + w, y0 + h)
            if all(_boxes_overlap(cand, p) < 0.15 for p in placed):
                break
        else:
            continue  # too crowded; drop the instance
        px0, py0 = int(math.floor(x0)), int(math.floor(y0))
        px1, py1 = int(math.ceil(x0 + w)), int(math.ceil(y0 + h))
        px1 = min(px1, image_size)
        py1 = min(py1, image_size)
        mask = _shape_mask(class_id, py1 - py0, px1 - px0)
        if not mask.any():
            continue
        color = _class_color(class_id, n_classes, rng)
        region = img[py0:py1, px0:px1]
        region[mask] = color * rng.uniform(0.9, 1.0)
        # darker outline helps separate the object from similar background
        region[mask] = np.clip(region[mask], 0.0, 1.0)
        ys, xs = np.nonzero(mask)
        tight = (
            px0 + xs.min(),
            py0 + ys.min(),
            px0 + xs.max() + 1.0,
            py0 + ys.max() + 1.0,
        )
        boxes.append(BBox(float(tight[0]), float(tight[1]), float(tight[2]),
                          float(tight[3]), class_id))
        placed.append(cand)
    return DetectionSample(image=img.astype(np.float32), boxes=boxes, sample_id=sample_id)


# --------------------------------------------------------------------------
# generation entry point
# --------------------------------------------------------------------------

def _validate_size_mix(size_mix: dict[str, float]) -> dict[str, float]:
    mix = {k: float(v) for k, v in size_mix.items()}
    unknown = set(mix) - {"small", "medium", "large"}
    if unknown:
        raise ConfigurationError(f"unknown size_mix keys: {sorted(unknown)}")
    if abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ConfigurationError(f"size_mix fractions must sum to 1, got {sum(mix.values())}")
    if any(v < 0 for v in mix.values()):
        raise ConfigurationError("size_mix fractions must be nonnegative")
    return mix


def generate_shapes_dataset(out_dir: str | Path, split: str, n_images: int,
                            image_size: int = 128, n_classes: int = 3, seed: int = 0,
                            size_mix: dict[str, float] | None = None) -> DatasetManifest:
    """Write one split of the synthetic shapes dataset and return its manifest."""
    if n_images < 1:
        raise ConfigurationError(f"n_images must be >= 1, got {n_images}")
    if n_classes < 2:
        raise ConfigurationError(f"n_classes must be >= 2, got {n_classes}")
    mix = _validate_size_mix(size_mix or DEFAULT_SIZE_MIX)

    split_dir = Path(out_dir) / split
    images_dir = split_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    annotations: dict[str, list[list]] = {}
    class_counts: dict[int, int] = {c: 0 for c in range(n_classes)}
    for i in range(n_images):
        sample_id = f"{split}_{i:05d}"
        rng = np.random.default_rng([seed, i])  # per-image stream: parallel-safe
        sample = render_sample(rng, image_size, n_classes, mix, sample_id)
        arr = np.clip(np.round(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(images_dir / f"{sample_id}.png")
        annotations[sample_id] = [b.as_list() for b in sample.boxes]
        for b in sample.boxes:
            class_counts[b.class_id] += 1

    (split_dir / "annotations.json").write_text(
        json.dumps(annotations, sort_keys=True, separators=(",", ":"))
    )
    manifest = DatasetManifest(split=split, n_images=n_images, class_counts=class_counts,
                               image_size=image_size, seed=seed)
    (split_dir / "manifest.json").write_text(
        json.dumps(manifest.to_json_dict(), indent=2, sort_keys=True)
    )
    return manifest


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def load_annotations(root: str | Path, split: str) -> dict[str, list[BBox]]:
    path = Path(root) / split / "annotations.json"
    raw = json.loads(path.read_text())
    return {
        sid: [BBox(b[0], b[1], b[2], b[3], int(b[4])) for b in entries]
        for sid, entries in raw.items()
    }


def load_manifest(root: str | Path, split: str) -> DatasetManifest:
    return DatasetManifest.from_json_dict(
        json.loads((Path(root) / split / "manifest.json").read_text())
    )


def load_sample(root: str | Path, split: str, sample_id: str,
                boxes: list[BBox]) -> DetectionSample:
    path = Path(root) / split / "images" / f"{sample_id}.png"
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return DetectionSample(image=img, boxes=boxes, sample_id=sample_id)


def load_split(root: str | Path, split: str,
               sample_ids: list[str] | None = None) -> list[DetectionSample]:
    ann = load_annotations(root, split)
    ids = sample_ids if sample_ids is not None else sorted(ann)
    return [load_sample(root, split, sid, ann[sid]) for sid in ids]


# --------------------------------------------------------------------------
# class-balanced selection
# --------------------------------------------------------------------------

def imbalance_ratio(counts: dict[int, int]) -> float:
    """max/min ratio over per-class instance counts; inf when a class is missing."""
    values = list(counts.values())
    if not values:
        return math.inf
    lo, hi = min(values), max(values)
    return math.inf if lo == 0 else hi / lo


def _greedy_score(counts: dict[int, int]) -> float:
    # smoothed ratio keeps empty classes comparable while preferring coverage
    values = list(counts.values())
    return (max(values) + 1.0) / (min(values) + 1.0)


def select_class_balanced(annotations: dict[str, list[BBox]], n_samples: int,
                          seed: int = 0) -> list[str]:
    """Greedy subset whose per-class instance counts stay as even as possible."""
    ids = sorted(annotations)
    if n_samples > len(ids):
        raise ConfigurationError(
            f"n_samples {n_samples} exceeds dataset size {len(ids)}"
        )
    totals: dict[int, int] = {}
    per_image: dict[str, dict[int, int]] = {}
    for sid in ids:
        counts: dict[int, int] = {}
        for b in annotations[sid]:
            counts[b.class_id] = counts.get(b.class_id, 0) + 1
            totals[b.class_id] = totals.get(b.class_id, 0) + 1
        per_image[sid] = counts

    classes = sorted(c for c, n in totals.items() if n > 0)
    absent = sorted(c for c, n in totals.items() if n == 0)
    if absent:
        warnings.warn(f"classes {absent} have no instances; excluded from balancing")
    if not classes:
        # no instances anywhere: selection order is all that is left
        classes = []

    rng = np.random.default_rng(seed)
    order = list(ids)
    rng.shuffle(order)

    selected: list[str] = []
    running = {c: 0 for c in classes}
    remaining = set(order)
    for _ in range(n_samples):
        best_id, best_score = None, math.inf
        for sid in order:
            if sid not in remaining:
                continue
            trial = dict(running)
            for c, k in per_image[sid].items():
                if c in trial:
                    trial[c] += k
            score = _greedy_score(trial) if trial else 0.0
            if score < best_score:
                best_id, best_score = sid, score
        assert best_id is not None
        selected.append(best_id)
        remaining.discard(best_id)
        for c, k in per_image[best_id].items():
            if c in running:
                running[c] += k
    return selected


def class_counts_for(annotations: dict[str, list[BBox]], sample_ids: list[str]
                     ) -> dict[int, int]:
    counts: dict[int, int] = {}
    for sid in sample_ids:
        for b in annotations[sid]:
            counts[b.class_id] = counts.get(b.class_id, 0) + 1
    return counts
