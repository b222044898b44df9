"""Conditional generators: coarse-to-fine (global + local enhancer) and SPADE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBlock, ResnetBlock, SpadeResBlock, instance_normalize


@dataclass
class Pix2PixHDGenConfig:
    base_channels: int = 32
    n_downsamples_global: int = 4
    n_resblocks_global: int = 9
    n_resblocks_local: int = 3
    output_resolution: int = 1024
    label_channels: int = 1

    def __post_init__(self):
        factor = 2 ** (self.n_downsamples_global + 1)
        if self.output_resolution % factor:
            raise ValueError(f"output_resolution {self.output_resolution} must be divisible by {factor}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")


@dataclass
class SpadeGenConfig:
    num_spade_blocks: int = 7
    base_channels: int = 64
    latent_dim: int = 256
    use_image_encoder: bool = False
    output_resolution: int = 1024
    spade_hidden: int = 128
    label_channels: int = 1

    def __post_init__(self):
        if self.num_spade_blocks < 3:
            raise ValueError("num_spade_blocks must be >= 3 (head + two middle blocks)")
        if self.output_resolution % 2**self.num_upsamples:
            raise ValueError(
                f"output_resolution {self.output_resolution} must be divisible by 2^{self.num_upsamples}"
            )

    @property
    def num_upsamples(self) -> int:
        return self.num_spade_blocks - 2

    @property
    def initial_size(self) -> int:
        return self.output_resolution // 2**self.num_upsamples


@dataclass
class EncoderOutput:
    mean: torch.Tensor
    log_variance: torch.Tensor


def _check_mask(mask: torch.Tensor, resolution: int, label_channels: int):
    if mask.dim() != 4 or mask.shape[1] != label_channels:
        raise ValueError(f"mask must be N x {label_channels} x H x W, got {tuple(mask.shape)}")
    if tuple(mask.shape[2:]) != (resolution, resolution):
        raise ValueError(f"mask is {tuple(mask.shape[2:])}, generator expects {resolution}x{resolution}")


class _NormAct(nn.Module):
    def forward(self, x):
        return F.relu(instance_normalize(x))


class GlobalGenerator(nn.Module):
    """Encoder / residual trunk / decoder at half the output resolution."""

    def __init__(self, in_ch: int, channels: int, n_down: int, n_blocks: int):
        super().__init__()
        layers = [ConvBlock(in_ch, channels, 7)]
        ch = channels
        for _ in range(n_down):
            layers.append(ConvBlock(ch, ch * 2, 3, stride=2, padding_mode="zeros"))
            ch *= 2
        layers += [ResnetBlock(ch) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1), _NormAct()]
            ch //= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh())
        self.out_channels = ch

    def forward(self, mask, return_features=False):
        feats = self.features(mask)
        return feats if return_features else self.head(feats)


class Pix2PixHDGenerator(nn.Module):
    """Global generator G1 (half resolution) plus local enhancer G2 (full resolution).

    In fine mode G1's last feature map is added to G2's downsampled stream;
    in coarse mode G1 runs alone on the 2x-pooled mask.
    """

    def __init__(self, cfg: Pix2PixHDGenConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.global_gen = GlobalGenerator(cfg.label_channels, 2 * c, cfg.n_downsamples_global, cfg.n_resblocks_global)
        self.local_down = nn.Sequential(
            ConvBlock(cfg.label_channels, c, 7),
            ConvBlock(c, 2 * c, 3, stride=2, padding_mode="zeros"),
        )
        self.local_up = nn.Sequential(
            *[ResnetBlock(2 * c) for _ in range(cfg.n_resblocks_local)],
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            _NormAct(),
            nn.ReflectionPad2d(3),
            nn.Conv2d(c, 3, 7),
            nn.Tanh(),
        )

    def forward(self, mask: torch.Tensor, coarse: bool = False) -> torch.Tensor:
        _check_mask(mask, self.cfg.output_resolution, self.cfg.label_channels)
        low = F.avg_pool2d(mask, 2)
        if coarse:
            return self.global_gen(low)
        g1 = self.global_gen(low, return_features=True)
        return self.local_up(self.local_down(mask) + g1)


def pix2pixhd_generate(mask: torch.Tensor, gen: Pix2PixHDGenerator, coarse: bool = False) -> torch.Tensor:
    return gen(mask, coarse=coarse)


class StyleEncoder(nn.Module):
    """Maps an RGB image to the mean and log-variance of a latent Gaussian."""

    def __init__(self, latent_dim: int, channels: int = 32, n_down: int = 4):
        super().__init__()
        layers = [ConvBlock(3, channels, 3, stride=2, act="lrelu", padding_mode="zeros")]
        ch = channels
        for _ in range(n_down - 1):
            layers.append(ConvBlock(ch, min(ch * 2, 8 * channels), 3, stride=2, act="lrelu", padding_mode="zeros"))
            ch = min(ch * 2, 8 * channels)
        self.body = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(4))
        self.fc_mean = nn.Linear(ch * 16, latent_dim)
        self.fc_logvar = nn.Linear(ch * 16, latent_dim)

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        h = self.body(image).flatten(1)
        return EncoderOutput(self.fc_mean(h), self.fc_logvar(h))


class SpadeGenerator(nn.Module):
    """Stack of SPADE residual blocks upsampling from a coarse start tensor.

    Blocks are head, middle_0, middle_1, then ``num_spade_blocks - 3`` up
    blocks that halve the channel count. The start tensor is a learned
    constant plus a linear projection of the latent vector.
    """

    def __init__(self, cfg: SpadeGenConfig):
        super().__init__()
        self.cfg = cfg
        n_up_blocks = cfg.num_spade_blocks - 3
        top = cfg.base_channels * 2**n_up_blocks
        s = cfg.initial_size
        self.top_channels = top
        self.const = nn.Parameter(torch.zeros(1, top, s, s))
        self.fc = nn.Linear(cfg.latent_dim, top * s * s)
        blocks = [SpadeResBlock(top, top, cfg.spade_hidden, cfg.label_channels) for _ in range(3)]
        ch = top
        for _ in range(n_up_blocks):
            blocks.append(SpadeResBlock(ch, ch // 2, cfg.spade_hidden, cfg.label_channels))
            ch //= 2
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(ch, 3, 3, padding=1)
        self.encoder = StyleEncoder(cfg.latent_dim) if cfg.use_image_encoder else None

    def sample_latent(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        dtype = self.const.dtype
        return torch.randn(batch, self.cfg.latent_dim, generator=generator, dtype=dtype)

    def encode(self, image: torch.Tensor, generator: torch.Generator | None = None):
        """Return ``(EncoderOutput, latent)`` with ``latent = mean + exp(logvar / 2) * noise``."""
        if self.encoder is None:
            raise RuntimeError("image encoder is disabled in this generator's config")
        enc = self.encoder(image)
        noise = torch.randn(enc.mean.shape, generator=generator, dtype=enc.mean.dtype)
        return enc, enc.mean + torch.exp(0.5 * enc.log_variance) * noise

    def forward(self, mask: torch.Tensor, latent: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        cfg = self.cfg
        _check_mask(mask, cfg.output_resolution, cfg.label_channels)
        n = mask.shape[0]
        if latent is None:
            latent = self.sample_latent(n, generator)
        if latent.dim() != 2 or latent.shape[1] != cfg.latent_dim or latent.shape[0] != n:
            raise ValueError(f"latent must be {n} x {cfg.latent_dim}, got {tuple(latent.shape)}")
        s = cfg.initial_size
        x = self.const + self.fc(latent).view(n, self.top_channels, s, s)
        head, mid0, mid1, *ups = self.blocks
        x = F.interpolate(head(x, mask), scale_factor=2, mode="nearest")
        x = mid1(mid0(x, mask), mask)
        for block in ups:
            x = block(F.interpolate(x, scale_factor=2, mode="nearest"), mask)
        x = self.to_rgb(F.leaky_relu(x, 0.2))
        return torch.tanh(x)


def spade_generate(mask, gen: SpadeGenerator, latent=None, generator=None):
    return gen(mask, latent, generator)


def encode_style(image, gen: SpadeGenerator, generator=None):
    return gen.encode(image, generator)


def config_dict(cfg) -> dict:
    return asdict(cfg)
