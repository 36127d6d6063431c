"""Deterministic synthetic detection scenes: three shape classes on a noisy
background.

Class 0 is a filled disc, class 1 a filled triangle, class 2 a rectangle
outline.  Placement is rejection sampled so boxes stay fully inside the image
with pairwise IoU at most 0.3; labels are tight (within a pixel) around the
rendered mask of each shape.

Determinism: all randomness comes from numpy's PCG64 generator.  Image ``i``
of a dataset with seed ``s`` is produced by a generator seeded with
``splitmix64(s XOR i)``; if a scene cannot be placed within the rejection
budget it is regenerated from ``splitmix64`` of its own sub-seed.  Pixels are
quantized to the uint8 grid at generation time, so disk round trips are
exact.

Disk format per sample (index-named ``NNNNN.bwdi`` / ``NNNNN.txt``): the
image file is magic "BWDI", u32 height, u32 width, u32 channels (little
endian), then raw uint8 RGB bytes row-major; the label file holds one
``class cx cy w h`` line per object with 6-decimal fixed formatting.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .detect import GroundTruth

__all__ = [
    "SceneConfig",
    "Dataset",
    "DatasetFormatError",
    "generate",
    "save_dataset",
    "load_dataset",
    "class_histogram",
    "splitmix64",
    "CLASS_NAMES",
]

log = logging.getLogger(__name__)

CLASS_NAMES = ("disc", "triangle", "rect-outline")
MAX_PLACEMENT_ATTEMPTS = 1000
PLACEMENT_IOU_LIMIT = 0.28  # slack under the 0.3 contract for mask-tight boxes
OUTLINE_THICKNESS = 2.0
MIN_COLOR_CONTRAST = 0.3


class DatasetFormatError(ValueError):
    """Raised on malformed or truncated dataset files."""


@dataclass(frozen=True)
class SceneConfig:
    """Knobs of the scene generator; classes are fixed at three shapes."""

    size: int = 96
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 12.0
    max_size: float = 40.0
    noise: float = 0.1
    seed: int = 0

    @property
    def classes(self) -> int:
        return len(CLASS_NAMES)


@dataclass
class Dataset:
    """In-memory dataset: float32 images [n, 3, s, s] in [0, 1] plus labels."""

    images: np.ndarray
    gts: list[list[GroundTruth]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def splitmix64(x: int) -> int:
    """The SplitMix64 mixing function; used to derive per-image sub-seeds."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def _box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def _shape_mask(cls: int, cx: float, cy: float, w: float, h: float,
                orient: int, grid_x: np.ndarray, grid_y: np.ndarray) -> np.ndarray:
    if cls == 0:
        r = w / 2.0
        return (grid_x - cx) ** 2 + (grid_y - cy) ** 2 <= r * r
    if cls == 1:
        verts = np.array([(cx, cy - h / 2), (cx - w / 2, cy + h / 2),
                          (cx + w / 2, cy + h / 2)])
        for _ in range(orient):  # rotate 90 degrees about the center
            verts = np.column_stack([cx + (verts[:, 1] - cy),
                                     cy - (verts[:, 0] - cx)])
        mask = np.ones_like(grid_x, dtype=bool)
        for i in range(3):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % 3]
            cross = (x1 - x0) * (grid_y - y0) - (y1 - y0) * (grid_x - x0)
            mask &= cross <= 0  # interior side for this winding (y grows down)
        return mask
    t = OUTLINE_THICKNESS
    outer = ((np.abs(grid_x - cx) <= w / 2) & (np.abs(grid_y - cy) <= h / 2))
    inner = ((np.abs(grid_x - cx) <= w / 2 - t) & (np.abs(grid_y - cy) <= h / 2 - t))
    return outer & ~inner


def _render_scene(cfg: SceneConfig, rng: np.random.Generator):
    """One attempt at a scene; returns None if placement cannot be satisfied."""
    s = cfg.size
    coords = np.arange(s, dtype=np.float64) + 0.5
    grid_x, grid_y = np.meshgrid(coords, coords)

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    bg = rng.uniform(0.1, 0.6, size=3)
    img = np.clip(bg[None, None, :] +
                  rng.uniform(-cfg.noise / 2, cfg.noise / 2, size=(s, s, 3)), 0, 1)

    placed_boxes: list[tuple[float, float, float, float]] = []
    gts: list[GroundTruth] = []
    for _ in range(n_obj):
        cls = int(rng.integers(0, cfg.classes))
        size = float(rng.uniform(cfg.min_size, cfg.max_size))
        w = h = size
        orient = int(rng.integers(0, 4)) if cls == 1 else 0
        color = rng.uniform(0.0, 1.0, size=3)
        while np.max(np.abs(color - bg)) < MIN_COLOR_CONTRAST:
            color = rng.uniform(0.0, 1.0, size=3)
        margin_x, margin_y = w / 2 + 1, h / 2 + 1
        for attempt in range(MAX_PLACEMENT_ATTEMPTS):
            cx = float(rng.uniform(margin_x, s - margin_x))
            cy = float(rng.uniform(margin_y, s - margin_y))
            box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if all(_box_iou(box, other) <= PLACEMENT_IOU_LIMIT
                   for other in placed_boxes):
                break
        else:
            return None
        placed_boxes.append(box)
        mask = _shape_mask(cls, cx, cy, w, h, orient, grid_x, grid_y)
        img[mask] = color
        ys, xs = np.nonzero(mask)
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        gts.append(GroundTruth(
            class_id=cls,
            cx=float(f"{(x0 + x1 + 1) / 2 / s:.6f}"),
            cy=float(f"{(y0 + y1 + 1) / 2 / s:.6f}"),
            w=float(f"{(x1 - x0 + 1) / s:.6f}"),
            h=float(f"{(y1 - y0 + 1) / s:.6f}"),
        ))

    quant = np.rint(img * 255.0).astype(np.uint8)
    chw = (quant.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return chw, gts


def generate(cfg: SceneConfig, count: int) -> Dataset:
    """Render ``count`` scenes, bit-reproducible for a fixed config."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    images = np.empty((count, 3, cfg.size, cfg.size), dtype=np.float32)
    gts: list[list[GroundTruth]] = []
    for i in range(count):
        sub_seed = splitmix64((cfg.seed ^ i) & 0xFFFFFFFFFFFFFFFF)
        while True:
            result = _render_scene(cfg, np.random.Generator(np.random.PCG64(sub_seed)))
            if result is not None:
                break
            log.info("scene %d: placement budget exhausted, regenerating", i)
            sub_seed = splitmix64(sub_seed)
        images[i], img_gts = result
        gts.append(img_gts)
    return Dataset(images=images, gts=gts)


def class_histogram(ds: Dataset) -> list[int]:
    counts = [0] * len(CLASS_NAMES)
    for img_gts in ds.gts:
        for gt in img_gts:
            counts[gt.class_id] += 1
    return counts


def save_dataset(ds: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    for i in range(len(ds)):
        img = ds.images[i]
        hwc = np.rint(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        header = b"BWDI" + np.array(hwc.shape, dtype="<u4").tobytes()
        with open(os.path.join(path, f"{i:05d}.bwdi"), "wb") as fh:
            fh.write(header + hwc.tobytes())
        lines = [f"{g.class_id} {g.cx:.6f} {g.cy:.6f} {g.w:.6f} {g.h:.6f}"
                 for g in ds.gts[i]]
        with open(os.path.join(path, f"{i:05d}.txt"), "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))


def _load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != b"BWDI":
        raise DatasetFormatError(f"{path}: bad magic, not a BWDI image")
    h, w, c = np.frombuffer(blob[4:16], dtype="<u4")
    expected = 16 + int(h) * int(w) * int(c)
    if len(blob) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes for {h}x{w}x{c}, got {len(blob)}")
    hwc = np.frombuffer(blob[16:], dtype=np.uint8).reshape(int(h), int(w), int(c))
    return (hwc.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _load_labels(path) -> list[GroundTruth]:
    gts = []
    with open(path) as fh:
        for ln, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DatasetFormatError(f"{path}:{ln + 1}: expected 5 fields")
            gts.append(GroundTruth(int(parts[0]), *(float(p) for p in parts[1:])))
    return gts


def load_dataset(path) -> Dataset:
    names = sorted(f[:-5] for f in os.listdir(path) if f.endswith(".bwdi"))
    if not names:
        raise DatasetFormatError(f"no .bwdi samples under {path}")
    images = []
    gts = []
    for name in names:
        images.append(_load_image(os.path.join(path, name + ".bwdi")))
        gts.append(_load_labels(os.path.join(path, name + ".txt")))
    return Dataset(images=np.stack(images), gts=gts)
