"""Raster and box types, label-map conversion, tiling, manifests and PNG I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_TILE_SIZE = 1024
DEFAULT_MIN_CLIP_FRACTION = 0.3
SPLITS = ("train", "test")


class BoxOutOfBoundsError(ValueError):
    """A box does not fit inside the raster it is drawn on."""


class ManifestError(ValueError):
    """Base class for manifest problems."""


class MalformedManifestError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    def __init__(self, path: os.PathLike | str):
        super().__init__(f"manifest references missing file: {path}")
        self.path = str(path)


@dataclass(frozen=True)
class Box:
    """Half-open integer pixel rectangle ``[x, x+w) x [y, y+h)``."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise ValueError(f"box coordinate {name}={value!r} is not an integer")
            object.__setattr__(self, name, int(value))
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box must have w, h >= 1, got {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def within(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def intersection(self, other: "Box") -> "Box | None":
        x1, y1 = max(self.x, other.x), max(self.y, other.y)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return Box(x1, y1, x2 - x1, y2 - y1)

    def shifted(self, dx: int, dy: int) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def to_dict(self) -> dict[str, int]:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Box":
        return cls(d["x"], d["y"], d["w"], d["h"])


def iou(a: Box, b: Box) -> float:
    """Intersection over union on the pixel grid; 0.0 for disjoint boxes."""
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    i = inter.area
    return i / (a.area + b.area - i)


def sort_boxes(boxes: Iterable[Box]) -> list[Box]:
    return sorted(boxes, key=lambda b: (b.y, b.x, b.h, b.w))


@dataclass
class ImageTile:
    id: str
    pixels: np.ndarray
    source: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"tile {self.id!r}: expected HxWx3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"tile {self.id!r}: expected uint8 pixels, got {px.dtype}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class LabelMap:
    values: np.ndarray
    tile_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("label map values must be 0 or 1")
        self.values = v.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.tile_id == other.tile_id and np.array_equal(self.values, other.values)


def boxes_to_labelmap(boxes: Sequence[Box], width: int, height: int, tile_id: str = "") -> LabelMap:
    """Rasterize boxes: 1 inside any box, 0 elsewhere."""
    values = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        if not box.within(width, height):
            raise BoxOutOfBoundsError(f"{box} lies outside the {width}x{height} raster")
        values[box.y:box.y2, box.x:box.x2] = 1
    return LabelMap(values, tile_id)


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def labelmap_to_boxes(label_map: LabelMap | np.ndarray) -> list[Box]:
    """Tight bounding box of each 4-connected component, ordered by (y, x)."""
    values = label_map.values if isinstance(label_map, LabelMap) else np.asarray(label_map)
    labelled, n = ndimage.label(values, structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    boxes = [
        Box(sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start)
        for sl in ndimage.find_objects(labelled)
    ]
    return sort_boxes(boxes)


def crop_tiles(
    raster: np.ndarray,
    tile_size: int,
    boxes: Sequence[Box],
    min_clip_fraction: float = DEFAULT_MIN_CLIP_FRACTION,
    source: str = "raster",
) -> list[tuple[ImageTile, list[Box]]]:
    """Cut a raster into a non-overlapping grid of square tiles.

    Edge tiles that would run past the raster are zero-padded, so every raster
    pixel lands in exactly one tile. Each box is clipped to every tile it
    touches and kept there only if the clipped part covers at least
    ``min_clip_fraction`` of the original box area.
    """
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"raster must be HxWx3, got shape {raster.shape}")
    height, width = raster.shape[:2]
    if tile_size < 1:
        raise ValueError("tile_size must be positive")
    if tile_size > height or tile_size > width:
        raise ValueError(f"tile_size {tile_size} exceeds raster size {width}x{height}")
    for box in boxes:
        if not box.within(width, height):
            raise BoxOutOfBoundsError(f"{box} lies outside the {width}x{height} raster")

    n_rows = -(-height // tile_size)
    n_cols = -(-width // tile_size)
    out = []
    for r in range(n_rows):
        for c in range(n_cols):
            y0, x0 = r * tile_size, c * tile_size
            pixels = np.zeros((tile_size, tile_size, 3), dtype=np.uint8)
            patch = raster[y0:y0 + tile_size, x0:x0 + tile_size]
            pixels[: patch.shape[0], : patch.shape[1]] = patch
            frame = Box(x0, y0, tile_size, tile_size)
            kept = []
            for box in boxes:
                clipped = box.intersection(frame)
                if clipped is not None and clipped.area >= min_clip_fraction * box.area:
                    kept.append(clipped.shifted(-x0, -y0))
            tile = ImageTile(f"{source}_r{r:03d}_c{c:03d}", pixels, source=f"{source}@{x0},{y0}")
            out.append((tile, sort_boxes(kept)))
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    image: str | None = None
    labelmap: str | None = None
    boxes: list[Box] = field(default_factory=list)
    provenance: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "id": self.id,
            "image": self.image,
            "labelmap": self.labelmap,
            "boxes": [b.to_dict() for b in self.boxes],
        }
        if self.provenance is not None:
            d["provenance"] = self.provenance
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ManifestEntry":
        return cls(
            id=str(d["id"]),
            image=d.get("image"),
            labelmap=d.get("labelmap"),
            boxes=[Box.from_dict(b) for b in d.get("boxes", [])],
            provenance=d.get("provenance"),
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    # Directory relative paths are resolved against; not serialized.
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise MalformedManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DuplicateIdError(f"duplicate manifest id {e.id!r}")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_dict(self) -> dict[str, Any]:
        return {"split": self.split, "entries": [e.to_dict() for e in self.entries]}


def check_disjoint(train: DatasetManifest, test: DatasetManifest) -> None:
    overlap = set(train.ids) & set(test.ids)
    if overlap:
        raise DuplicateIdError(f"train and test share ids: {sorted(overlap)[:5]}")


def save_manifest(manifest: DatasetManifest, path: os.PathLike | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
    return path


def load_manifest(path: os.PathLike | str, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "split" not in raw or not isinstance(raw.get("entries"), list):
        raise MalformedManifestError(f"{path}: expected an object with 'split' and an 'entries' list")
    try:
        entries = [ManifestEntry.from_dict(e) for e in raw["entries"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifestError(f"{path}: bad entry ({exc})") from exc
    manifest = DatasetManifest(entries, split=raw["split"], root=path.parent)
    if check_files:
        for e in manifest.entries:
            for ref in (e.image, e.labelmap):
                p = manifest.resolve(ref)
                if p is not None and not p.is_file():
                    raise MissingFileError(p)
    return manifest


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def save_image(pixels: np.ndarray, path: os.PathLike | str) -> Path:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("image must be uint8 HxWx3")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")
    return path


def load_image(path: os.PathLike | str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_raster(path: os.PathLike | str) -> np.ndarray:
    """Like :func:`load_image` but without Pillow's pixel-count guard (orthomosaics are large)."""
    previous = Image.MAX_IMAGE_PIXELS
    Image.MAX_IMAGE_PIXELS = None
    try:
        return load_image(path)
    finally:
        Image.MAX_IMAGE_PIXELS = previous


def save_labelmap(label_map: LabelMap, path: os.PathLike | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(label_map.values * np.uint8(255), mode="L").save(path, format="PNG")
    return path


def load_labelmap(path: os.PathLike | str, tile_id: str = "") -> LabelMap:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: label map must be 8-bit grayscale, got mode {im.mode}")
        raw = np.asarray(im, dtype=np.uint8)
    if not np.isin(raw, (0, 255)).all():
        raise ValueError(f"{path}: label map values must be 0 or 255")
    return LabelMap((raw // 255).astype(np.uint8), tile_id)


def entry_labelmap(manifest: DatasetManifest, entry: ManifestEntry, width: int, height: int) -> LabelMap:
    """The entry's stored label map, or one rasterized from its boxes."""
    if entry.labelmap is not None:
        return load_labelmap(manifest.resolve(entry.labelmap), entry.id)
    return boxes_to_labelmap(entry.boxes, width, height, entry.id)
