"""Procedural panicle-like imagery for desk-scale runs and tests.

Tiles show a dark green canopy with four vertical crop rows and bright tan
ellipses (the "panicles"), one per ground-truth box.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data_model import Box, iou, save_image

BACKGROUND = np.array([38, 62, 30], dtype=np.float64)
ROW_TINT = np.array([22, 30, 10], dtype=np.float64)
PANICLE = np.array([222, 196, 120], dtype=np.float64)


def paint_panicle(img: np.ndarray, box: Box, rng: np.random.Generator) -> None:
    """Draw a textured ellipse inscribed in ``box`` onto a float HxWx3 image."""
    yy, xx = np.mgrid[box.y:box.y2, box.x:box.x2]
    cy, cx = box.y + (box.h - 1) / 2, box.x + (box.w - 1) / 2
    ry, rx = max(box.h / 2, 0.5), max(box.w / 2, 0.5)
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    texture = rng.uniform(0.85, 1.0, size=inside.shape)[..., None]
    patch = img[box.y:box.y2, box.x:box.x2]
    patch[inside] = (PANICLE * texture)[inside]


def render_scene(width: int, height: int, boxes, rng: np.random.Generator, rows: int = 4) -> np.ndarray:
    img = np.empty((height, width, 3))
    img[:] = BACKGROUND
    xs = np.arange(width)
    band = (np.sin(np.pi * rows * (xs + 0.5) / width) ** 2)[None, :, None]
    img += band * ROW_TINT
    img += rng.normal(0.0, 6.0, size=img.shape)
    for box in boxes:
        paint_panicle(img, box, rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def random_boxes(width: int, height: int, n: int, rng: np.random.Generator,
                 size_range=(6, 14), max_pair_iou: float = 0.0, attempts: int = 200) -> list[Box]:
    """Non-overlapping (by default) random boxes with a 1px gap to keep components separate."""
    boxes: list[Box] = []
    lo, hi = size_range
    for _ in range(n):
        for _ in range(attempts):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            cand = Box(int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1)), w, h)
            grown = Box(max(cand.x - 1, 0), max(cand.y - 1, 0), cand.w + 2, cand.h + 2)
            if all(iou(cand, b) <= max_pair_iou and grown.intersection(b) is None for b in boxes):
                boxes.append(cand)
                break
    return boxes


def make_toy_tiles(n: int, size: int = 64, seed: int = 0, count_range=(2, 6), size_range=(6, 14)):
    """``n`` (pixels, boxes) pairs; every tile holds at least one panicle."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(count_range[0], count_range[1] + 1))
        boxes = random_boxes(size, size, k, rng, size_range)
        out.append((render_scene(size, size, boxes, rng), boxes))
    return out


def make_toy_orthomosaic(out_dir, size: int = 256, n_panicles: int = 60, seed: int = 0,
                         name: str = "ortho", size_range=(6, 14)) -> tuple[Path, Path]:
    """Write a raster PNG and a boxes JSON in the layout ``prepare`` consumes."""
    rng = np.random.default_rng(seed)
    boxes = random_boxes(size, size, n_panicles, rng, size_range)
    pixels = render_scene(size, size, boxes, rng, rows=max(1, 4 * size // 64))
    out_dir = Path(out_dir)
    raster = save_image(pixels, out_dir / f"{name}.png")
    boxes_path = out_dir / f"{name}_boxes.json"
    boxes_path.write_text(json.dumps({raster.name: [b.to_dict() for b in boxes]}))
    return raster, boxes_path
