"""Fit per-tile box statistics and sample random label maps that match them."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import (
    Box,
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    boxes_to_labelmap,
    iou,
    load_image,
    load_labelmap,
    save_labelmap,
    save_manifest,
)
from .seeds import entry_rng

log = logging.getLogger(__name__)


@dataclass
class BoxDistribution:
    count_hist: dict[int, float]
    size_samples: list[tuple[int, int]]
    tile_size: int

    def __post_init__(self):
        self.count_hist = {int(k): float(v) for k, v in self.count_hist.items()}
        self.size_samples = [(int(w), int(h)) for w, h in self.size_samples]
        if not self.count_hist:
            raise ValueError("count histogram is empty")
        if abs(sum(self.count_hist.values()) - 1.0) > 1e-9:
            raise ValueError("count histogram must sum to 1")
        if any(k < 0 for k in self.count_hist):
            raise ValueError("box counts must be non-negative")
        for w, h in self.size_samples:
            if not (1 <= w <= self.tile_size and 1 <= h <= self.tile_size):
                raise ValueError(f"size sample {(w, h)} outside [1, {self.tile_size}]")
        if max(self.count_hist) > 0 and not self.size_samples:
            raise ValueError("nonzero counts need at least one size sample")

    def to_dict(self) -> dict:
        return {
            "tile_size": self.tile_size,
            "counts": {str(k): v for k, v in sorted(self.count_hist.items())},
            "sizes": [list(s) for s in self.size_samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoxDistribution":
        return cls({int(k): v for k, v in d["counts"].items()}, [tuple(s) for s in d["sizes"]], int(d["tile_size"]))

    def save(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()) + "\n")
        return path

    @classmethod
    def load(cls, path: os.PathLike | str) -> "BoxDistribution":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SamplerConfig:
    max_pair_iou: float = 0.1
    size_jitter: float = 0.05
    max_placement_attempts: int = 100
    seed: int = 0
    # Optional crop-row constraint: box centres fall inside one of
    # ``row_bands`` vertical strips, each using the central ``band_fill``
    # fraction of its width. 0 disables it.
    row_bands: int = 0
    band_fill: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.max_pair_iou < 1.0:
            raise ValueError("max_pair_iou must lie in [0, 1)")
        if not 0.0 <= self.size_jitter < 1.0:
            raise ValueError("size_jitter must lie in [0, 1)")
        if self.max_placement_attempts < 1:
            raise ValueError("max_placement_attempts must be >= 1")
        if self.row_bands < 0 or not 0.0 < self.band_fill <= 1.0:
            raise ValueError("bad row-band settings")


def _infer_tile_size(manifest: DatasetManifest) -> int:
    for e in manifest.entries:
        if e.image is not None:
            return load_image(manifest.resolve(e.image)).shape[0]
        if e.labelmap is not None:
            return load_labelmap(manifest.resolve(e.labelmap)).height
    raise ValueError("cannot infer tile size: manifest references no files")


def fit_distribution(manifest: DatasetManifest, tile_size: int | None = None) -> BoxDistribution:
    if not manifest.entries or not any(e.boxes for e in manifest.entries):
        raise ValueError("cannot fit a box distribution to a manifest without boxes")
    if tile_size is None:
        tile_size = _infer_tile_size(manifest)
    counts = Counter(len(e.boxes) for e in manifest.entries)
    n = len(manifest.entries)
    hist = {k: v / n for k, v in sorted(counts.items())}
    sizes = [(b.w, b.h) for e in manifest.entries for b in e.boxes]
    return BoxDistribution(hist, sizes, tile_size)


def _draw_count(dist: BoxDistribution, rng: np.random.Generator) -> int:
    keys = np.array(sorted(dist.count_hist))
    probs = np.array([dist.count_hist[k] for k in keys])
    return int(rng.choice(keys, p=probs / probs.sum()))


def _draw_size(dist: BoxDistribution, cfg: SamplerConfig, rng: np.random.Generator) -> tuple[int, int]:
    w, h = dist.size_samples[rng.integers(len(dist.size_samples))]
    jw, jh = rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=2)
    t = dist.tile_size
    return int(np.clip(round(w * (1 + jw)), 1, t)), int(np.clip(round(h * (1 + jh)), 1, t))


def _draw_position(w: int, h: int, tile: int, cfg: SamplerConfig, rng: np.random.Generator) -> tuple[int, int]:
    y = int(rng.integers(0, tile - h + 1))
    if cfg.row_bands == 0:
        return int(rng.integers(0, tile - w + 1)), y
    band_w = tile / cfg.row_bands
    band = rng.integers(cfg.row_bands)
    half = 0.5 * cfg.band_fill * band_w
    cx = (band + 0.5) * band_w + rng.uniform(-half, half)
    x = int(np.clip(round(cx - w / 2), 0, tile - w))
    return x, y


def sample_boxes(dist: BoxDistribution, cfg: SamplerConfig, rng: np.random.Generator) -> list[Box]:
    """Rejection-sample a layout. Boxes that find no free spot are dropped.

    Sizes are clipped to the tile, so the first box always fits and a
    non-zero draw never comes back empty.
    """
    target = _draw_count(dist, rng)
    placed: list[Box] = []
    for _ in range(target):
        w, h = _draw_size(dist, cfg, rng)
        for _attempt in range(cfg.max_placement_attempts):
            x, y = _draw_position(w, h, dist.tile_size, cfg, rng)
            cand = Box(x, y, w, h)
            if all(iou(cand, other) <= cfg.max_pair_iou for other in placed):
                placed.append(cand)
                break
        else:
            log.warning("could not place a %dx%d box after %d attempts; dropping it",
                        w, h, cfg.max_placement_attempts)
    return placed


def sample_labelmap(
    dist: BoxDistribution,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    tile_id: str = "",
) -> tuple[LabelMap, list[Box]]:
    """Draw one random layout and its rasterized label map.

    Without an explicit ``rng`` the draw is seeded from ``cfg.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    boxes = sample_boxes(dist, cfg, rng)
    return boxes_to_labelmap(boxes, dist.tile_size, dist.tile_size, tile_id), boxes


def generate_random_manifest(
    dist: BoxDistribution,
    cfg: SamplerConfig,
    n: int,
    out_dir: os.PathLike | str,
    prefix: str = "rand",
) -> DatasetManifest:
    """Write ``n`` random label maps plus ``manifest.json`` into ``out_dir``.

    Image paths stay null until a generator fills them in. Entry ``i`` draws
    from its own substream of ``cfg.seed``.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    out_dir = Path(out_dir)
    lm_dir = out_dir / "labelmaps"
    try:
        lm_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {lm_dir}: {exc}") from exc
    entries = []
    for i in range(n):
        entry_id = f"{prefix}_{i:05d}"
        lm, boxes = sample_labelmap(dist, cfg, entry_rng(cfg.seed, i), entry_id)
        rel = Path("labelmaps") / f"{entry_id}.png"
        try:
            save_labelmap(lm, out_dir / rel)
        except OSError as exc:
            raise OSError(f"cannot write {out_dir / rel}: {exc}") from exc
        entries.append(ManifestEntry(entry_id, image=None, labelmap=rel.as_posix(), boxes=boxes))
    manifest = DatasetManifest(entries, split="train", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
