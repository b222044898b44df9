"""Detector adapters.

Any detector that can write the detections JSON format plugs in through
:class:`DetectionsFileDetector`. :class:`StubDetector` is a threshold-and-
components stand-in for desk-scale pipeline runs on bright-blob imagery.
"""

from __future__ import annotations

import os
from typing import Protocol

import numpy as np
from scipy import ndimage

from .data_model import Box, DatasetManifest, ImageTile, load_image
from .evaluation import Detection, average_precision, load_detections, match_detections, pr_curve

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class Detector(Protocol):
    def fit(self, manifest: DatasetManifest) -> "Detector": ...

    def detect(self, tile: ImageTile) -> list[Detection]: ...


def stub_detect(tile: ImageTile, threshold: float = 0.5, min_area: int = 4) -> list[Detection]:
    """Components of pixels brighter than ``threshold`` (mean channel / 255).

    Score is the component's mean brightness.
    """
    intensity = tile.pixels.astype(np.float64).mean(axis=2) / 255.0
    labelled, n = ndimage.label(intensity > threshold, structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    means = ndimage.mean(intensity, labelled, index=np.arange(1, n + 1))
    sizes = ndimage.sum(np.ones_like(intensity), labelled, index=np.arange(1, n + 1))
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labelled)):
        if sizes[k] < min_area:
            continue
        box = Box(sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start)
        dets.append(Detection(tile.id, box, float(np.clip(means[k], 0.0, 1.0))))
    return dets


def load_tiles(manifest: DatasetManifest) -> list[tuple[ImageTile, list[Box]]]:
    out = []
    for e in manifest.entries:
        if e.image is None:
            raise ValueError(f"entry {e.id!r} has no image")
        out.append((ImageTile(e.id, load_image(manifest.resolve(e.image))), list(e.boxes)))
    return out


class StubDetector:
    """Brightness-threshold detector whose threshold is tuned on a training set.

    ``fit`` picks the grid threshold with the best AP@0.5 over the training
    tiles (ties go to the lower threshold), so detectors fitted on different
    training sets can differ.
    """

    def __init__(self, threshold: float = 0.5, min_area: int = 4,
                 grid: tuple[float, ...] = tuple(np.round(np.arange(0.30, 0.81, 0.05), 2))):
        self.threshold = threshold
        self.min_area = min_area
        self.grid = grid

    def fit(self, manifest: DatasetManifest) -> "StubDetector":
        tiles = load_tiles(manifest)
        gts = {t.id: boxes for t, boxes in tiles}
        if not any(gts.values()):
            return self
        best, best_ap = self.threshold, -1.0
        for thr in self.grid:
            dets = [d for t, _ in tiles for d in stub_detect(t, thr, self.min_area)]
            ap = average_precision(pr_curve(match_detections(dets, gts, 0.5)))
            if ap > best_ap + 1e-12:
                best, best_ap = float(thr), ap
        self.threshold = best
        return self

    def detect(self, tile: ImageTile) -> list[Detection]:
        return stub_detect(tile, self.threshold, self.min_area)


class DetectionsFileDetector:
    """Replays detections produced elsewhere (e.g. by an external YOLO run)."""

    def __init__(self, path: os.PathLike | str):
        self.path = path
        self._by_image: dict[str, list[Detection]] = {}
        for d in load_detections(path):
            self._by_image.setdefault(d.image_id, []).append(d)

    def fit(self, manifest: DatasetManifest) -> "DetectionsFileDetector":
        return self

    def detect(self, tile: ImageTile) -> list[Detection]:
        return list(self._by_image.get(tile.id, []))


def run_detector(detector: Detector, manifest: DatasetManifest):
    """Detect on every tile of ``manifest``; return ``(detections, ground truth by id)``."""
    dets, gts = [], {}
    for tile, boxes in load_tiles(manifest):
        found = detector.detect(tile)
        for d in found:
            if not d.box.within(tile.width, tile.height):
                raise ValueError(f"detection {d} lies outside tile {tile.id}")
        dets.extend(found)
        gts[tile.id] = boxes
    return dets, gts
