"""Adversarial and feature-matching losses, summed over discriminator scales."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_fm: float = 10.0
    # "non_saturating" trains G on -log D(s, G(s)); "literal" minimizes log(1 - D(s, G(s))).
    generator_mode: str = "non_saturating"

    def __post_init__(self):
        if self.lambda_fm < 0:
            raise ValueError("lambda_fm must be non-negative")
        if self.generator_mode not in ("non_saturating", "literal"):
            raise ValueError(f"unknown generator_mode {self.generator_mode!r}")


@dataclass
class ScaleLoss:
    gan_g: torch.Tensor
    gan_d: torch.Tensor
    fm: torch.Tensor


@dataclass
class LossBreakdown:
    gan_g: torch.Tensor
    gan_d: torch.Tensor
    fm: torch.Tensor
    total_g: torch.Tensor
    per_scale: list[ScaleLoss] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        return {
            "gan_g": self.gan_g.item(),
            "gan_d": self.gan_d.item(),
            "fm": self.fm.item(),
            "total_g": self.total_g.item(),
        }


def gan_loss(real_logits, fake_logits, side: str, literal: bool = False) -> torch.Tensor:
    """Logistic GAN loss averaged over batch and patch locations.

    ``side="discriminator"``: ``-(mean log D(real) + mean log(1 - D(fake)))``.
    ``side="generator"``: ``-mean log D(fake)``, or with ``literal=True`` the
    minimax form ``mean log(1 - D(fake))``. Uses softplus identities,
    ``-log sigmoid(t) = softplus(-t)``, for stability.
    """
    if side == "discriminator":
        return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    if side == "generator":
        if literal:
            return -F.softplus(fake_logits).mean()
        return F.softplus(-fake_logits).mean()
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def feature_matching_loss(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the mean absolute feature difference.

    Real features are detached, so no gradient reaches the discriminator.
    """
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"layer count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    if not real_feats:
        raise ValueError("need at least one feature layer")
    total = None
    for i, (r, f) in enumerate(zip(real_feats, fake_feats)):
        if r.shape != f.shape:
            raise ValueError(f"layer {i}: shape {tuple(r.shape)} vs {tuple(f.shape)}")
        term = (r.detach() - f).abs().mean()
        total = term if total is None else total + term
    return total


def discriminator_losses(disc_real, disc_fake) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Discriminator loss summed over scales, from per-scale (logits, feats) outputs."""
    per = [gan_loss(r[0], f[0], "discriminator") for r, f in zip(disc_real, disc_fake)]
    return torch.stack(per).sum(), per


def generator_losses(disc_real, disc_fake, weights: LossWeights):
    """Return ``(total_g, gan_g, fm, per_scale_gan, per_scale_fm)``.

    ``disc_fake`` must come from a discriminator pass on the non-detached fake.
    """
    literal = weights.generator_mode == "literal"
    gan = [gan_loss(None, f[0], "generator", literal) for f in disc_fake]
    fm = [feature_matching_loss(r[1], f[1]) for r, f in zip(disc_real, disc_fake)]
    gan_g = torch.stack(gan).sum()
    fm_total = torch.stack(fm).sum()
    return gan_g + weights.lambda_fm * fm_total, gan_g, fm_total, gan, fm


def composite_losses(generate, disc, masks, real_images, weights: LossWeights, skip_scales: int = 0) -> LossBreakdown:
    """Every term of the multi-scale objective for one batch.

    ``generate`` maps masks to fake images at the resolution of
    ``real_images``; ``masks`` must already match that resolution for the
    discriminator. The discriminator term sees a detached fake.
    """
    fake = generate(masks)
    if fake.shape != real_images.shape:
        raise ValueError(f"fake {tuple(fake.shape)} vs real {tuple(real_images.shape)}")
    out_real = disc(real_images, masks, skip_scales)
    out_fake_d = disc(fake.detach(), masks, skip_scales)
    out_fake_g = disc(fake, masks, skip_scales)
    gan_d, per_d = discriminator_losses(out_real, out_fake_d)
    total_g, gan_g, fm, per_g, per_fm = generator_losses(out_real, out_fake_g, weights)
    per_scale = [ScaleLoss(g, d, f) for g, d, f in zip(per_g, per_d, per_fm)]
    return LossBreakdown(gan_g, gan_d, fm, total_g, per_scale)
