"""Alternating D/G training, checkpoints, collapse monitoring and synthesis."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .data_model import (
    DatasetManifest,
    ManifestEntry,
    entry_labelmap,
    load_image,
    load_labelmap,
    save_image,
    save_manifest,
)
from .generators import Pix2PixHDGenConfig, Pix2PixHDGenerator, SpadeGenConfig, SpadeGenerator
from .layers import MultiScaleDiscConfig, MultiScaleDiscriminator
from .objectives import LossWeights, discriminator_losses, generator_losses

log = logging.getLogger(__name__)

MODELS = ("pix2pixhd", "spade")
CHECKPOINT_FORMAT = "panicle-synth/checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "pix2pixhd"
    epochs: int = 200
    lr: float = 0.0002
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 1
    resolution: int = 1024
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint
    collapse_std_threshold: float = 0.01
    lambda_fm: float = 10.0
    generator_mode: str = "non_saturating"
    phase_a_fraction: float = 0.5  # pix2pixhd: share of epochs spent on G1 alone
    lr_decay: bool = False  # linear decay to zero over the second half of training
    max_steps: int | None = None
    generator: dict[str, Any] = field(default_factory=dict)
    discriminator: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.phase_a_fraction < 1.0:
            raise ValueError("phase_a_fraction must lie in [0, 1)")
        self.adam_betas = tuple(self.adam_betas)

    def generator_config(self):
        if self.model == "pix2pixhd":
            return Pix2PixHDGenConfig(**{"output_resolution": self.resolution, **self.generator})
        return SpadeGenConfig(**{"output_resolution": self.resolution, **self.generator})

    def discriminator_config(self) -> MultiScaleDiscConfig:
        defaults = {"norm": "spade" if self.model == "spade" else "instance"}
        return MultiScaleDiscConfig(**{**defaults, **self.discriminator})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def desk_config(model: str, **overrides) -> TrainConfig:
    """Reduced-width 64 px configuration that trains on a CPU in minutes."""
    if model == "pix2pixhd":
        gen = {"base_channels": 16, "n_downsamples_global": 2, "n_resblocks_global": 2, "n_resblocks_local": 1}
    else:
        gen = {"num_spade_blocks": 5, "base_channels": 8, "latent_dim": 16, "spade_hidden": 16}
    disc = {"num_scales": 2, "layers_per_disc": 2, "base_channels": 16, "spade_hidden": 16}
    params = dict(model=model, epochs=63, resolution=64, max_steps=500, generator=gen, discriminator=disc)
    params.update(overrides)
    return TrainConfig(**params)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)
    collapse_flags: list[tuple[int, float]] = field(default_factory=list)


def pixel_std(batch: torch.Tensor) -> torch.Tensor:
    """Per-image standard deviation over all pixels and channels."""
    return batch.detach().flatten(1).std(dim=1, unbiased=False)


def monitor_collapse(batch: torch.Tensor, threshold: float = 0.01) -> bool:
    """True when the mean per-image pixel std falls strictly below ``threshold``."""
    return bool(pixel_std(batch).mean() < threshold)


def build_generator(cfg: TrainConfig):
    gcfg = cfg.generator_config()
    return Pix2PixHDGenerator(gcfg) if cfg.model == "pix2pixhd" else SpadeGenerator(gcfg)


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def load_pairs(manifest: DatasetManifest, resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack every (mask, image) pair as ``(N,1,H,W)`` floats and ``(N,3,H,W)`` in [-1, 1]."""
    masks, images = [], []
    for e in manifest.entries:
        if e.image is None:
            raise ValueError(f"entry {e.id!r} has no image; training needs image/label-map pairs")
        px = load_image(manifest.resolve(e.image))
        if px.shape[:2] != (resolution, resolution):
            raise ValueError(f"entry {e.id!r} is {px.shape[1]}x{px.shape[0]}, expected {resolution}px")
        lm = entry_labelmap(manifest, e, resolution, resolution)
        masks.append(torch.from_numpy(lm.values.astype(np.float32))[None])
        images.append(image_to_tensor(px))
    if not masks:
        raise ValueError("training manifest is empty")
    return torch.stack(masks), torch.stack(images)


class Trainer:
    """Owns both networks, their optimizers and the seeded random state."""

    def __init__(self, cfg: TrainConfig, masks: torch.Tensor, images: torch.Tensor,
                 checkpoint_dir: os.PathLike | str | None = None, log_path: os.PathLike | str | None = None):
        self.cfg = cfg
        self.masks, self.images = masks, images
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_path = Path(log_path) if log_path else None
        self.weights = LossWeights(cfg.lambda_fm, cfg.generator_mode)
        torch.manual_seed(cfg.seed)
        self.G = build_generator(cfg)
        self.D = MultiScaleDiscriminator(cfg.discriminator_config())
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.state = TrainState()
        self.eval_latent_seed = cfg.seed + 1

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, cfg: TrainConfig, **kwargs) -> "Trainer":
        masks, images = load_pairs(manifest, cfg.resolution)
        return cls(cfg, masks, images, **kwargs)

    # -- schedule ---------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.masks) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch
        return total if self.cfg.max_steps is None else min(total, self.cfg.max_steps)

    @property
    def phase_a_epochs(self) -> int:
        if self.cfg.model != "pix2pixhd":
            return 0
        return int(self.cfg.epochs * self.cfg.phase_a_fraction)

    def coarse(self, epoch: int) -> bool:
        return epoch < self.phase_a_epochs

    def _batch(self, step: int):
        epoch, b = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.masks))
        idx = torch.from_numpy(perm[b * self.cfg.batch_size:(b + 1) * self.cfg.batch_size])
        return epoch, self.masks[idx], self.images[idx]

    def _set_lr(self, epoch: int):
        if not self.cfg.lr_decay:
            return
        half = self.cfg.epochs // 2
        frac = 1.0 if epoch < half else max(0.0, 1.0 - (epoch - half) / max(1, self.cfg.epochs - half))
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = self.cfg.lr * frac

    # -- forward ------------------------------------------------------------

    def generate(self, masks: torch.Tensor, coarse: bool = False, images: torch.Tensor | None = None,
                 generator: torch.Generator | None = None) -> torch.Tensor:
        generator = generator or self.rng
        if self.cfg.model == "pix2pixhd":
            return self.G(masks, coarse=coarse)
        latent = None
        if self.G.encoder is not None and images is not None:
            _, latent = self.G.encode(images, generator)
        return self.G(masks, latent, generator)

    def step(self) -> dict[str, Any]:
        """One discriminator update followed by one generator update on the same batch."""
        epoch, masks, reals = self._batch(self.state.step)
        self._set_lr(epoch)
        coarse = self.coarse(epoch)
        fake = self.generate(masks, coarse=coarse, images=reals)
        skip = 0
        if coarse:
            masks, reals, skip = F.avg_pool2d(masks, 2), F.avg_pool2d(reals, 2), 1

        self.opt_d.zero_grad(set_to_none=True)
        out_real = self.D(reals, masks, skip)
        gan_d, _ = discriminator_losses(out_real, self.D(fake.detach(), masks, skip))
        self._check_finite("gan_d", gan_d)
        gan_d.backward()
        self.opt_d.step()

        self.opt_g.zero_grad(set_to_none=True)
        with torch.no_grad():
            out_real = self.D(reals, masks, skip)
        total_g, gan_g, fm, _, _ = generator_losses(out_real, self.D(fake, masks, skip), self.weights)
        self._check_finite("total_g", total_g)
        total_g.backward()
        self.opt_g.step()

        std = float(pixel_std(fake).mean())
        flagged = std < self.cfg.collapse_std_threshold
        if flagged:
            self.state.collapse_flags.append((epoch, std))
        record = {
            "step": self.state.step,
            "epoch": epoch,
            "phase": "A" if coarse else "B",
            "gan_g": gan_g.item(),
            "gan_d": gan_d.item(),
            "fm": fm.item(),
            "total_g": total_g.item(),
            "pixel_std": std,
            "collapse_flag": flagged,
        }
        self.state.history.append(record)
        self.state.step += 1
        self.state.epoch = self.state.step // self.steps_per_epoch
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def _check_finite(self, name: str, value: torch.Tensor):
        if torch.isfinite(value).all():
            return
        where = ""
        if self.checkpoint_dir is not None:
            where = f"; diagnostic checkpoint at {self.save_checkpoint(self.checkpoint_dir / 'diverged.pt')}"
        raise TrainingDivergedError(f"{name} is not finite at step {self.state.step}{where}")

    def train(self) -> TrainState:
        every = self.cfg.checkpoint_every
        while self.state.step < self.total_steps:
            self.step()
            at_epoch_end = self.state.step % self.steps_per_epoch == 0
            if every and at_epoch_end and self.checkpoint_dir is not None and self.state.epoch % every == 0:
                self.save_checkpoint(self.checkpoint_dir / f"epoch_{self.state.epoch:04d}.pt")
        if self.checkpoint_dir is not None:
            self.save_checkpoint(self.checkpoint_dir / "final.pt")
        return self.state

    @torch.no_grad()
    def eval_l1(self) -> float:
        """Mean absolute error between full-resolution outputs and the training targets."""
        gen = torch.Generator().manual_seed(self.eval_latent_seed)
        fake = self.generate(self.masks, coarse=False, images=self.images, generator=gen)
        return float((fake - self.images).abs().mean())

    # -- checkpoints --------------------------------------------------------

    def checkpoint(self) -> dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "train_config": asdict(self.cfg),
            "generator_config": asdict(self.G.cfg),
            "discriminator_config": asdict(self.D.cfg),
            "g_state": self.G.state_dict(),
            "d_state": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "epoch": self.state.epoch,
            "step": self.state.step,
            "rng_state": self.rng.get_state(),
            "history": self.state.history,
            "collapse_flags": self.state.collapse_flags,
        }

    def save_checkpoint(self, path: os.PathLike | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.checkpoint(), path)
        return path

    @classmethod
    def resume(cls, path: os.PathLike | str, masks: torch.Tensor, images: torch.Tensor, **kwargs) -> "Trainer":
        ckpt = read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["train_config"]), masks, images, **kwargs)
        trainer.G.load_state_dict(ckpt["g_state"])
        trainer.D.load_state_dict(ckpt["d_state"])
        trainer.opt_g.load_state_dict(ckpt["opt_g"])
        trainer.opt_d.load_state_dict(ckpt["opt_d"])
        trainer.rng.set_state(ckpt["rng_state"])
        trainer.state = TrainState(ckpt["epoch"], ckpt["step"], list(ckpt["history"]),
                                   [tuple(f) for f in ckpt["collapse_flags"]])
        return trainer


def read_checkpoint(path: os.PathLike | str) -> dict[str, Any]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a panicle-synth checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def load_generator(path: os.PathLike | str):
    """Rebuild the generator stored in a checkpoint, in eval mode."""
    ckpt = read_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt["train_config"])
    gen = build_generator(cfg)
    gen.load_state_dict(ckpt["g_state"])
    gen.eval()
    return cfg, gen


def train(manifest: DatasetManifest, cfg: TrainConfig, checkpoint_dir=None, log_path=None) -> TrainState:
    return Trainer.from_manifest(manifest, cfg, checkpoint_dir=checkpoint_dir, log_path=log_path).train()


@torch.no_grad()
def generate_synthetic_set(checkpoint: os.PathLike | str, random_manifest: DatasetManifest,
                           out_dir: os.PathLike | str, seed: int = 0, prefix: str | None = None) -> DatasetManifest:
    """Render one image per random label map; boxes carry over unchanged.

    Entry ``i`` of a SPADE checkpoint draws its latent from a generator seeded
    with ``(seed, i)``.
    """
    cfg, gen = load_generator(checkpoint)
    prefix = prefix or cfg.model
    out_dir = Path(out_dir)
    res = cfg.resolution
    entries = []
    for i, e in enumerate(random_manifest.entries):
        if e.labelmap is None:
            raise ValueError(f"entry {e.id!r} has no label map")
        lm = load_labelmap(random_manifest.resolve(e.labelmap), e.id)
        if lm.values.shape != (res, res):
            raise ValueError(f"label map {e.id!r} is {lm.width}x{lm.height}, checkpoint expects {res}px")
        mask = torch.from_numpy(lm.values.astype(np.float32))[None, None]
        if cfg.model == "pix2pixhd":
            out = gen(mask)
        else:
            rng = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            out = gen(mask, None, rng)
        new_id = f"{prefix}_{e.id}"
        img_rel = Path("images") / f"{new_id}.png"
        lm_rel = Path("labelmaps") / f"{new_id}.png"
        save_image(tensor_to_image(out[0]), out_dir / img_rel)
        (out_dir / lm_rel).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(random_manifest.resolve(e.labelmap), out_dir / lm_rel)
        entries.append(ManifestEntry(new_id, img_rel.as_posix(), lm_rel.as_posix(), list(e.boxes),
                                     provenance=f"synthetic:{cfg.model}"))
    manifest = DatasetManifest(entries, split="train", root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def _tile_size(manifest: DatasetManifest) -> int | None:
    for e in manifest.entries:
        if e.image is not None:
            return load_image(manifest.resolve(e.image)).shape[0]
    return None


def merge_for_augmentation(real: DatasetManifest, synthetic: DatasetManifest) -> DatasetManifest:
    """Concatenate real and synthetic training entries; paths become absolute."""
    collision = set(real.ids) & set(synthetic.ids)
    if collision:
        raise ValueError(f"real and synthetic manifests share ids: {sorted(collision)[:5]}")
    if synthetic.entries:
        a, b = _tile_size(real), _tile_size(synthetic)
        if a is not None and b is not None and a != b:
            raise ValueError(f"tile size mismatch: real {a}px vs synthetic {b}px")
    merged = []
    for manifest, default in ((real, "real"), (synthetic, "synthetic")):
        for e in manifest.entries:
            merged.append(ManifestEntry(
                e.id,
                str(manifest.resolve(e.image).resolve()) if e.image else None,
                str(manifest.resolve(e.labelmap).resolve()) if e.labelmap else None,
                list(e.boxes),
                provenance=e.provenance or default,
            ))
    return DatasetManifest(merged, split="train")
