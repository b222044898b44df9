"""Pipeline stages behind the command-line interface.

Each ``cmd_*`` function reads a :class:`PipelineConfig`, writes its outputs
under ``config.out`` and refuses to overwrite existing outputs unless
``force`` is set. All randomness is derived from ``config.seed`` through
:func:`panicle_synth.seeds.derive_seed`.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data_model import (
    Box,
    DatasetManifest,
    ManifestEntry,
    boxes_to_labelmap,
    crop_tiles,
    load_labelmap,
    load_manifest,
    load_raster,
    load_image,
    save_image,
    save_labelmap,
    save_manifest,
)
from .detectors import DetectionsFileDetector, StubDetector, run_detector
from .evaluation import EvalReport, evaluate
from .plotting import plot_loss_history, plot_metric_comparison, plot_pr_curves, plot_sample_grid
from .sampler import BoxDistribution, SamplerConfig, fit_distribution, generate_random_manifest
from .seeds import derive_seed
from .trainer import MODELS, TrainConfig, Trainer, generate_synthetic_set, merge_for_augmentation, read_checkpoint

log = logging.getLogger(__name__)

CACHE_ENV = "PANICLE_SYNTH_CACHE"
ARMS = ("real", "pix2pixhd", "spade")
TABLE_METRICS = (("mAP@[.5,.95]", "map_50_95"), ("MAPE", "mape"), ("MAE", "mae"), ("RMSE", "rmse"))


class UserError(Exception):
    """Bad input or configuration; the CLI maps it to exit code 1."""


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    prepare: dict[str, Any] = field(default_factory=dict)
    sampler: dict[str, Any] = field(default_factory=dict)
    n_synthetic: int = 1000
    train: dict[str, dict[str, Any]] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=dict)
    train_manifest: str | None = None
    test_manifest: str | None = None

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UserError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(d))
        if base_dir is not None:
            cfg._rebase(base_dir)
        return cfg

    @classmethod
    def load(cls, path: os.PathLike | str) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise UserError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UserError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, path.parent)

    def _rebase(self, base: Path):
        """Resolve relative input paths against the config file's directory."""

        def fix(p):
            return p if p is None or Path(p).is_absolute() else str(base / p)

        self.train_manifest = fix(self.train_manifest)
        self.test_manifest = fix(self.test_manifest)
        if "rasters" in self.prepare:
            self.prepare["rasters"] = [fix(p) for p in self.prepare["rasters"]]
        if "boxes" in self.prepare:
            self.prepare["boxes"] = fix(self.prepare["boxes"])
        dets = self.eval.get("detections")
        if isinstance(dets, dict):
            self.eval["detections"] = {k: fix(v) for k, v in dets.items()}
        elif isinstance(dets, str):
            self.eval["detections"] = fix(dets)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**{**self.sampler, "seed": derive_seed(self.seed, "sampler")})

    def train_config(self, model: str) -> TrainConfig:
        if model not in MODELS:
            raise UserError(f"unknown model {model!r}; choose from {MODELS}")
        params = {"model": model, **self.train.get(model, {})}
        params["seed"] = derive_seed(self.seed, f"train/{model}")
        return TrainConfig(**params)


def _claim(path: Path, force: bool) -> Path:
    """Make ``path`` available for fresh output."""
    if path.exists():
        if not force:
            raise UserError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    return path


def _manifest(path: str | os.PathLike | None, what: str) -> DatasetManifest:
    if path is None:
        raise UserError(f"no {what} manifest given")
    try:
        return load_manifest(path)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def split_entries(entries: list, train_ratio: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle, then the first ``round(train_ratio * n)`` entries train."""
    if not 0.0 <= train_ratio <= 1.0:
        raise UserError("train_ratio must lie in [0, 1]")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_train = int(round(train_ratio * len(entries)))
    shuffled = [entries[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def _read_boxes_file(path) -> dict[str, list[Box]]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UserError(f"cannot read boxes file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UserError(f"{path}: expected an object mapping raster names to box lists")
    return {k: [Box.from_dict(b) for b in v] for k, v in raw.items()}


def cmd_prepare(cfg: PipelineConfig, force: bool = False) -> tuple[DatasetManifest, DatasetManifest]:
    p = cfg.prepare
    rasters = p.get("rasters") or []
    if not rasters or "boxes" not in p:
        raise UserError("prepare needs 'rasters' and 'boxes'")
    tile_size = int(p.get("tile_size", 1024))
    ratio = float(p.get("train_ratio", 0.8))
    min_clip = float(p.get("min_clip_fraction", 0.3))
    boxes_by_raster = _read_boxes_file(p["boxes"])
    out = _claim(cfg.out_dir / "data", force)

    entries = []
    for raster_path in rasters:
        raster_path = Path(raster_path)
        try:
            raster = load_raster(raster_path)
        except OSError as exc:
            raise UserError(f"cannot read raster {raster_path}: {exc}") from exc
        key = raster_path.name if raster_path.name in boxes_by_raster else raster_path.stem
        if key not in boxes_by_raster:
            raise UserError(f"boxes file has no entry for raster {raster_path.name}")
        try:
            tiles = crop_tiles(raster, tile_size, boxes_by_raster[key], min_clip, source=raster_path.stem)
        except ValueError as exc:
            raise UserError(str(exc)) from exc
        for tile, boxes in tiles:
            img_rel = Path("tiles") / f"{tile.id}.png"
            lm_rel = Path("labelmaps") / f"{tile.id}.png"
            save_image(tile.pixels, out / img_rel)
            save_labelmap(boxes_to_labelmap(boxes, tile_size, tile_size, tile.id), out / lm_rel)
            entries.append(ManifestEntry(tile.id, img_rel.as_posix(), lm_rel.as_posix(), boxes,
                                         provenance=f"real:{tile.source}"))
    train, test = split_entries(entries, ratio, derive_seed(cfg.seed, "split"))
    if not test:
        log.warning("train_ratio %.2f leaves the test manifest empty", ratio)
    train_m = DatasetManifest(train, "train", root=out)
    test_m = DatasetManifest(test, "test", root=out)
    save_manifest(train_m, out / "train.json")
    save_manifest(test_m, out / "test.json")
    return train_m, test_m


# ---------------------------------------------------------------------------
# sampler stages
# ---------------------------------------------------------------------------

def cmd_fit_sampler(cfg: PipelineConfig, manifest_path=None, force: bool = False) -> BoxDistribution:
    manifest = _manifest(manifest_path or cfg.train_manifest or cfg.out_dir / "data" / "train.json", "training")
    try:
        dist = fit_distribution(manifest, cfg.prepare.get("tile_size"))
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    out = _claim(cfg.out_dir / "sampler" / "distribution.json", force)
    dist.save(out)
    return dist


def cmd_sample(cfg: PipelineConfig, distribution_path=None, n: int | None = None, force: bool = False) -> DatasetManifest:
    path = Path(distribution_path or cfg.out_dir / "sampler" / "distribution.json")
    if not path.is_file():
        raise UserError(f"box distribution not found: {path}")
    dist = BoxDistribution.load(path)
    out = _claim(cfg.out_dir / "random", force)
    return generate_random_manifest(dist, cfg.sampler_config(), cfg.n_synthetic if n is None else n, out)


# ---------------------------------------------------------------------------
# GAN stages
# ---------------------------------------------------------------------------

def _manifest_digest(manifest: DatasetManifest) -> str:
    h = hashlib.sha256()
    for e in manifest.entries:
        h.update(e.id.encode())
        for ref in (e.image, e.labelmap):
            if ref is not None:
                h.update(Path(manifest.resolve(ref)).read_bytes())
    return h.hexdigest()


def cmd_train(cfg: PipelineConfig, model: str, manifest_path=None, force: bool = False) -> Path:
    """Train one GAN; returns the final checkpoint path.

    When ``$PANICLE_SYNTH_CACHE`` is set, checkpoints are cached there keyed by
    the training config and the training data, and reused on a hit.
    """
    tcfg = cfg.train_config(model)
    manifest = _manifest(manifest_path or cfg.train_manifest or cfg.out_dir / "data" / "train.json", "training")
    out = _claim(cfg.out_dir / "models" / model, force)
    cache_dir = os.environ.get(CACHE_ENV)
    cached = None
    if cache_dir:
        key = hashlib.sha256((json.dumps(asdict(tcfg), sort_keys=True) + _manifest_digest(manifest)).encode())
        cached = Path(cache_dir) / f"{model}-{key.hexdigest()[:24]}.pt"
    if cached is not None and cached.is_file():
        out.mkdir(parents=True)
        shutil.copyfile(cached, out / "final.pt")
        history = read_checkpoint(out / "final.pt")["history"]
        (out / "train_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in history))
    else:
        try:
            trainer = Trainer.from_manifest(manifest, tcfg, checkpoint_dir=out, log_path=out / "train_log.jsonl")
        except ValueError as exc:
            raise UserError(str(exc)) from exc
        history = trainer.train().history
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(out / "final.pt", cached)
    plot_loss_history(history, out / "loss_history.png", title=model)
    return out / "final.pt"


def cmd_generate(cfg: PipelineConfig, model: str, checkpoint=None, random_manifest=None,
                 force: bool = False) -> DatasetManifest:
    ckpt = Path(checkpoint or cfg.out_dir / "models" / model / "final.pt")
    if not ckpt.is_file():
        raise UserError(f"checkpoint not found: {ckpt}")
    rand = _manifest(random_manifest or cfg.out_dir / "random" / "manifest.json", "random label-map")
    out = _claim(cfg.out_dir / "synthetic" / model, force)
    try:
        synth = generate_synthetic_set(ckpt, rand, out, seed=derive_seed(cfg.seed, f"generate/{model}"))
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    preview = synth.entries[:4]
    if preview:
        plot_sample_grid([load_labelmap(synth.resolve(e.labelmap)).values for e in preview],
                         [load_image(synth.resolve(e.image)) for e in preview], out / "samples.png")
    return synth


def cmd_merge(cfg: PipelineConfig, real_path=None, synthetic_path=None, name: str = "merged",
              force: bool = False) -> DatasetManifest:
    real = _manifest(real_path or cfg.train_manifest or cfg.out_dir / "data" / "train.json", "real")
    synth = _manifest(synthetic_path, "synthetic")
    try:
        merged = merge_for_augmentation(real, synth)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    out = _claim(cfg.out_dir / "merged" / f"{name}.json", force)
    save_manifest(merged, out)
    return merged


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _detector(cfg: PipelineConfig, arm: str, fit_manifest: DatasetManifest | None):
    dets = cfg.eval.get("detections")
    if isinstance(dets, dict):
        if arm not in dets:
            raise UserError(f"no detections file configured for arm {arm!r}")
        return DetectionsFileDetector(dets[arm]), {"kind": "file", "path": str(dets[arm])}
    if isinstance(dets, str):
        return DetectionsFileDetector(dets), {"kind": "file", "path": dets}
    det = StubDetector(threshold=float(cfg.eval.get("threshold", 0.5)), min_area=int(cfg.eval.get("min_area", 4)))
    if fit_manifest is not None:
        det.fit(fit_manifest)
    return det, {"kind": "stub", "threshold": det.threshold, "min_area": det.min_area}


def write_report_files(report: EvalReport, out: Path, title: str = "") -> None:
    """JSON report, per-image CSV and a PR figure at IoU 0.50."""
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    with (out / "per_image.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["image_id", "gt_count", "pred_count", "error"])
        w.writeheader()
        w.writerows(report.per_image)
    plot_pr_curves({title or "detector": report.pr_curves.get("0.50", [])}, out / "pr_curve.png")


def cmd_evaluate(cfg: PipelineConfig, test_path=None, fit_path=None, name: str = "eval",
                 force: bool = False) -> EvalReport:
    test = _manifest(test_path or cfg.test_manifest or cfg.out_dir / "data" / "test.json", "test")
    fit = _manifest(fit_path, "fit") if fit_path else None
    det, _ = _detector(cfg, name, fit)
    out = _claim(cfg.out_dir / "eval" / name, force)
    try:
        dets, gts = run_detector(det, test)
        report = evaluate(dets, gts, float(cfg.eval.get("count_threshold", 0.25)))
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    write_report_files(report, out, name)
    return report


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def cmd_experiment(cfg: PipelineConfig, force: bool = False) -> dict[str, Any]:
    """Real-only vs real+pix2pixHD vs real+SPADE on one shared test manifest.

    Returns the report dict; ``report["failures"]`` is non-empty when an arm
    failed, in which case the other arms are still reported.
    """
    _claim(cfg.out_dir / "experiment", force)
    if cfg.train_manifest is None or cfg.test_manifest is None:
        cmd_prepare(cfg, force)
        train_path, test_path = cfg.out_dir / "data" / "train.json", cfg.out_dir / "data" / "test.json"
    else:
        train_path, test_path = Path(cfg.train_manifest), Path(cfg.test_manifest)
    train = _manifest(train_path, "training")
    test = _manifest(test_path, "test")
    if not test.entries:
        raise UserError("test manifest is empty")

    cmd_fit_sampler(cfg, train_path, force)
    cmd_sample(cfg, force=force)
    training_sets: dict[str, DatasetManifest | None] = {"real": train}
    failures: dict[str, str] = {}
    for model in MODELS:
        try:
            ckpt = cmd_train(cfg, model, train_path, force)
            cmd_generate(cfg, model, ckpt, force=force)
            merged = cmd_merge(cfg, train_path, cfg.out_dir / "synthetic" / model / "manifest.json", model, force)
            training_sets[model] = merged
        except Exception as exc:  # noqa: BLE001 - one arm's failure must not sink the others
            log.exception("arm %s failed", model)
            failures[model] = f"{type(exc).__name__}: {exc}"
            training_sets[model] = None

    arms: dict[str, Any] = {}
    count_threshold = float(cfg.eval.get("count_threshold", 0.25))
    for arm in ARMS:
        if training_sets.get(arm) is None:
            arms[arm] = {"status": "failed", "error": failures.get(arm, "not run")}
            continue
        try:
            det, det_info = _detector(cfg, arm, training_sets[arm])
            dets, gts = run_detector(det, test)
            report = evaluate(dets, gts, count_threshold)
            write_report_files(report, cfg.out_dir / "experiment" / arm, arm)
            arms[arm] = {"status": "ok", "train_size": len(training_sets[arm]), "detector": det_info,
                         "test_ids": sorted(gts), **report.to_dict()}
        except Exception as exc:  # noqa: BLE001
            log.exception("evaluation of arm %s failed", arm)
            failures[arm] = f"{type(exc).__name__}: {exc}"
            arms[arm] = {"status": "failed", "error": failures[arm]}

    comparison = [
        {"metric": label, **{arm: arms[arm].get(key) if arms[arm]["status"] == "ok" else None for arm in ARMS}}
        for label, key in TABLE_METRICS
    ]
    result = {
        "config": cfg.to_dict(),
        "test_manifest": str(test_path),
        "test_ids": sorted(test.ids),
        "arms": arms,
        "comparison": comparison,
        "failures": failures,
    }
    exp = cfg.out_dir / "experiment"
    exp.mkdir(parents=True, exist_ok=True)
    (exp / "report.json").write_text(json.dumps(result, indent=1) + "\n")
    with (exp / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *ARMS])
        for row in comparison:
            w.writerow([row["metric"], *(_fmt(row[a]) for a in ARMS)])
    plot_metric_comparison([(row["metric"], {a: row[a] for a in ARMS}) for row in comparison],
                           exp / "metrics.png")
    plot_pr_curves({a: arms[a]["pr_curves"]["0.50"] for a in ARMS if arms[a]["status"] == "ok"},
                   exp / "pr_curves.png")
    return result
