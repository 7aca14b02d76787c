"""Procedural multi-scale scenes with exact ground truth.

Randomness comes from numpy's PCG64 bit generator seeded directly with the
scene seed, so a (config, seed) pair always rasterizes the same image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import GroundTruthBox, iou
from .tensor import Tensor

log = logging.getLogger(__name__)

SCALE_CLASSES = ("small", "medium", "large")
SHAPES = ("square", "disk", "ring")


@dataclass
class SceneConfig:
    image_size: int = 75
    # (shape, intensity band); class ids are 1-based in list order
    classes: list[tuple[str, tuple[float, float]]] = field(default_factory=lambda: [
        ("square", (0.5, 0.8)), ("disk", (0.6, 0.9)), ("ring", (0.7, 1.0))])
    small: tuple[float, float] = (0.04, 0.12)
    medium: tuple[float, float] = (0.12, 0.35)
    large: tuple[float, float] = (0.35, 0.7)
    min_objects: int = 1
    max_objects: int = 5
    noise_sigma: float = 0.05
    max_overlap: float = 0.3
    retries: int = 50

    def __post_init__(self):
        lo = 0.0
        for name in SCALE_CLASSES:
            a, b = getattr(self, name)
            if not (lo <= a < b <= 1.0):
                raise ValueError(f"scale range {name}={a, b} must be increasing and disjoint")
            lo = b
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("object count range must satisfy 0 <= min <= max")
        for shape, _ in self.classes:
            if shape not in SHAPES:
                raise ValueError(f"unknown shape {shape!r}")

    @property
    def num_classes(self) -> int:
        """Foreground classes plus background."""
        return len(self.classes) + 1

    def pixel_range(self, scale_class: str) -> tuple[int, int]:
        a, b = getattr(self, scale_class)
        n = self.image_size
        # small is closed at the bottom; medium and large are open at the bottom
        lo = math.ceil(a * n - 1e-9) if scale_class == "small" else math.floor(a * n + 1e-9) + 1
        hi = math.floor(b * n + 1e-9)
        return lo, hi

    def scale_class_of(self, size_frac: float) -> str | None:
        for name in SCALE_CLASSES:
            a, b = getattr(self, name)
            if (a <= size_frac if name == "small" else a < size_frac) and size_frac <= b:
                return name
        return None


@dataclass
class Scene:
    image: Tensor
    gts: list[GroundTruthBox]
    seed: int = 0


def _shape_mask(shape: str, s: int) -> np.ndarray:
    c = (np.arange(s) + 0.5) - s / 2.0
    d2 = c[:, None] ** 2 + c[None, :] ** 2
    r = s / 2.0
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "disk":
        return d2 <= r * r
    inner = r - max(1.0, 0.35 * r)
    return (d2 <= r * r) & (d2 > inner * inner)


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    image = rng.normal(0.0, cfg.noise_sigma, size=(n, n))
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    gts: list[GroundTruthBox] = []
    for _ in range(count):
        scale_class = SCALE_CLASSES[int(rng.integers(0, 3))]
        class_idx = int(rng.integers(0, len(cfg.classes)))
        lo, hi = cfg.pixel_range(scale_class)
        placed = None
        for _attempt in range(cfg.retries):
            s = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, n - s + 1))
            y0 = int(rng.integers(0, n - s + 1))
            box = GroundTruthBox(x0 / n, y0 / n, (x0 + s) / n, (y0 + s) / n, class_idx + 1, scale_class)
            if all(iou(box, g) <= cfg.max_overlap for g in gts):
                placed = (box, s, x0, y0)
                break
        if placed is None:
            log.info("scene %d: gave up placing a %s object after %d retries", seed, scale_class, cfg.retries)
            continue
        box, s, x0, y0 = placed
        shape, (a, b) = cfg.classes[class_idx]
        intensity = rng.uniform(a, b)
        mask = _shape_mask(shape, s)
        patch = image[y0:y0 + s, x0:x0 + s]
        patch[mask] = intensity + rng.normal(0.0, cfg.noise_sigma, size=int(mask.sum()))
        gts.append(box)
    return Scene(Tensor(image[None]), gts, seed)


def generate_dataset(cfg: SceneConfig, seed: int, count: int, split: str = "train") -> list[Scene]:
    """``count`` scenes whose seeds are derived from (seed, split)."""
    split_key = {"train": 0, "test": 1}.get(split, sum(map(ord, split)))
    seeds = np.random.SeedSequence([seed, split_key]).generate_state(count, dtype=np.uint64)
    return [generate_scene(cfg, int(s)) for s in seeds]


def large_object_mask(scene: Scene, level_shape, scale_classes=("medium", "large")) -> Tensor:
    """1 where a level cell's image footprint overlaps (positive area) a GT of the given classes."""
    h, w = level_shape[-2:]
    mask = np.zeros((1, h, w))
    for g in scene.gts:
        if g.scale_class not in scale_classes:
            continue
        # cell j spans [j/w, (j+1)/w)
        cols = [j for j in range(w) if g.xmin < (j + 1) / w and g.xmax > j / w]
        rows = [i for i in range(h) if g.ymin < (i + 1) / h and g.ymax > i / h]
        if cols and rows:
            mask[0, rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = 1.0
    return Tensor(mask)


def to_pgm(image: np.ndarray, lo: float | None = None, hi: float | None = None) -> bytes:
    """8-bit binary PGM; values linearly mapped from [lo, hi] (default: data range)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.mean(axis=0)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # exactly one whitespace byte precedes the raster
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
