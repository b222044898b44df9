"""Detection matching, AP / COCO-style mAP and per-image counting errors."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data_model import Box, iou, sort_boxes

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def sort_key(self):
        b = self.box
        return (-self.score, self.image_id, b.x, b.y, b.w, b.h)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, **self.box.to_dict(), "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(str(d["image_id"]), Box(d["x"], d["y"], d["w"], d["h"]), float(d["score"]))


def save_detections(dets: Iterable[Detection], path: os.PathLike | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([d.to_dict() for d in dets], indent=1) + "\n")
    return path


def load_detections(path: os.PathLike | str) -> list[Detection]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError(f"{path}: detections file must hold a JSON list")
    return [Detection.from_dict(d) for d in raw]


@dataclass
class MatchResult:
    detections: list[Detection]  # in sweep order
    is_tp: list[bool]
    fn_per_image: dict[str, int]
    n_gt: int

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return sum(self.fn_per_image.values())


def match_detections(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]], iou_threshold: float) -> MatchResult:
    """Greedy score-ordered matching, one ground-truth box per detection.

    Detections are visited by descending score (ties: image id, then box
    coordinates). Each takes the unmatched ground truth of its image with the
    highest IoU, provided that IoU reaches ``iou_threshold``; IoU ties go to
    the first box in (y, x) order.
    """
    order = sorted(dets, key=Detection.sort_key)
    gt_sorted = {k: sort_boxes(v) for k, v in gts.items()}
    used = {k: [False] * len(v) for k, v in gt_sorted.items()}
    is_tp = []
    for d in order:
        boxes = gt_sorted.get(d.image_id, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(boxes):
            if used[d.image_id][j]:
                continue
            v = iou(d.box, g)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_threshold:
            used[d.image_id][best] = True
            is_tp.append(True)
        else:
            is_tp.append(False)
    fn = {k: u.count(False) for k, u in used.items()}
    return MatchResult(order, is_tp, fn, sum(len(v) for v in gt_sorted.values()))


@dataclass
class PRCurve:
    points: list[tuple[float, float]]  # (recall, precision) in sweep order
    iou_threshold: float

    @property
    def recalls(self) -> list[float]:
        return [r for r, _ in self.points]

    @property
    def precisions(self) -> list[float]:
        return [p for _, p in self.points]


def pr_curve(match: MatchResult, iou_threshold: float | None = None) -> PRCurve:
    if match.n_gt == 0:
        raise ValueError("precision/recall undefined without ground-truth boxes")
    points, tp = [], 0
    for k, hit in enumerate(match.is_tp, start=1):
        tp += hit
        points.append((tp / match.n_gt, tp / k))
    return PRCurve(points, iou_threshold if iou_threshold is not None else float("nan"))


def average_precision(match: MatchResult | PRCurve, interpolate: bool = True) -> float:
    """Sum of recall increments times precision over the confidence sweep.

    With ``interpolate`` each precision is replaced by the best precision at
    any later point of the sweep (all-point envelope); otherwise raw values
    are used. Recall starts from 0.
    """
    curve = match if isinstance(match, PRCurve) else pr_curve(match)
    if not curve.points:
        return 0.0
    recalls = np.array(curve.recalls)
    precisions = np.array(curve.precisions)
    if interpolate:
        precisions = np.maximum.accumulate(precisions[::-1])[::-1]
    deltas = np.diff(np.concatenate([[0.0], recalls]))
    return float(np.sum(deltas * precisions))


def counting_metrics(gt_counts: Sequence[int], pred_counts: Sequence[int], with_mape: bool = True):
    """Return ``(mape_percent, mae, rmse)``; MAPE is ``None`` when not requested."""
    c = np.asarray(gt_counts, dtype=np.float64)
    p = np.asarray(pred_counts, dtype=np.float64)
    if c.shape != p.shape or c.ndim != 1:
        raise ValueError("ground-truth and predicted counts must be equal-length 1-D sequences")
    if c.size == 0:
        raise ValueError("need at least one image")
    e = c - p
    mae = float(np.mean(np.abs(e)))
    rmse = float(math.sqrt(np.mean(e ** 2)))
    mape = None
    if with_mape:
        if np.any(c == 0):
            raise ZeroDivisionError("MAPE is undefined for images with zero ground-truth objects")
        mape = float(100.0 * np.mean(np.abs(e) / c))
    return mape, mae, rmse


@dataclass
class EvalReport:
    map_50_95: float
    ap_per_iou: list[float]
    mape: float | None
    mae: float
    rmse: float
    per_image: list[dict]
    n_images: int
    pr_curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map_50_95": self.map_50_95,
            "ap_per_iou": self.ap_per_iou,
            "mape": self.mape,
            "mae": self.mae,
            "rmse": self.rmse,
            "n_images": self.n_images,
            "per_image": self.per_image,
            "pr_curves": {k: [list(p) for p in v] for k, v in self.pr_curves.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        curves = {k: [tuple(p) for p in v] for k, v in d.get("pr_curves", {}).items()}
        return cls(d["map_50_95"], d["ap_per_iou"], d["mape"], d["mae"], d["rmse"],
                   d["per_image"], d["n_images"], curves)

    def save(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path


def coco_map(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]],
             thresholds: Sequence[float] = IOU_THRESHOLDS, interpolate: bool = True):
    """AP at each IoU threshold, their mean (as a percentage) and the PR curves."""
    aps, curves = [], {}
    for t in thresholds:
        m = match_detections(dets, gts, t)
        curve = pr_curve(m, t)
        aps.append(average_precision(curve, interpolate))
        curves[f"{t:.2f}"] = curve.points
    return 100.0 * float(np.mean(aps)), aps, curves


def evaluate(dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]], count_threshold: float = 0.25) -> EvalReport:
    """Full report: detection mAP plus counting errors.

    Predicted count per image = detections scoring at least ``count_threshold``.
    MAPE is left ``None`` if any image has no ground-truth objects.
    """
    if not gts:
        raise ValueError("no ground-truth images to evaluate")
    unknown = {d.image_id for d in dets} - set(gts)
    if unknown:
        raise ValueError(f"detections for unknown images: {sorted(unknown)[:5]}")
    map_50_95, aps, curves = coco_map(dets, gts)
    ids = sorted(gts)
    gt_counts = [len(gts[i]) for i in ids]
    pred_counts = [sum(1 for d in dets if d.image_id == i and d.score >= count_threshold) for i in ids]
    with_mape = all(c > 0 for c in gt_counts)
    mape, mae, rmse = counting_metrics(gt_counts, pred_counts, with_mape)
    per_image = [
        {"image_id": i, "gt_count": c, "pred_count": p, "error": c - p}
        for i, c, p in zip(ids, gt_counts, pred_counts)
    ]
    return EvalReport(map_50_95, aps, mape, mae, rmse, per_image, len(ids), curves)
