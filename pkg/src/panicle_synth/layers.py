"""Building blocks shared by both GANs.

Patch discriminator architecture (``layers_per_disc = L``, ``base_channels = c``):

=========  ======  ======  ===================  ===========  ====================
block      kernel  stride  padding              norm         out channels
=========  ======  ======  ===================  ===========  ====================
0          4       2       1                    none         c
1 .. L-2   4       2       1                    cfg.norm     min(c * 2^i, 8c)
L-1        4       1       (1, 2) "same"        cfg.norm     min(c * 2^(L-1), 8c)
logits     4       1       (1, 2) "same"        none         1
=========  ======  ======  ===================  ===========  ====================

With ``L == 1`` block 0 is the stride-1 block. Every hidden block ends in
LeakyReLU(0.2). The stride-1 layers keep their spatial size, so the logit map
is exactly ``H / 2^(L-1)`` and doubling the input doubles the logit map. For
L = 4 the receptive field is 70 px and a 256 px input gives 32x32 logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NORMS = ("instance", "spade", "none")


@dataclass
class TensorSpec:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError(f"tensor dims must be >= 1: {self}")


@dataclass
class SpadeLayerConfig:
    norm_channels: int
    label_channels: int = 1
    hidden_channels: int = 128
    kernel: int = 3
    epsilon: float = 1e-5

    def __post_init__(self):
        if min(self.norm_channels, self.label_channels, self.hidden_channels, self.kernel) < 1:
            raise ValueError("SPADE channel counts and kernel must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class MultiScaleDiscConfig:
    num_scales: int = 3
    layers_per_disc: int = 4
    base_channels: int = 64
    in_channels: int = 4
    norm: str = "instance"
    spade_hidden: int = 32

    def __post_init__(self):
        if self.num_scales < 1 or self.layers_per_disc < 1 or self.base_channels < 1:
            raise ValueError("num_scales, layers_per_disc and base_channels must be >= 1")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")


def instance_normalize(x: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel standardization over the spatial dims, no affine."""
    if x.dim() != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"expected an NCHW tensor, got shape {tuple(x.shape)}")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + epsilon)


class InstanceNorm(nn.Module):
    def __init__(self, epsilon: float = 1e-5):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, x):
        return instance_normalize(x, self.epsilon)


def resize_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour downsample of ``mask`` to the spatial size of ``like``.

    Only exact integer reductions (same factor on both axes) are accepted.
    """
    if mask.shape[0] != like.shape[0]:
        raise ValueError(f"batch mismatch: mask {mask.shape[0]} vs features {like.shape[0]}")
    mh, mw = mask.shape[2:]
    h, w = like.shape[2:]
    if (mh, mw) == (h, w):
        return mask
    if mh % h or mw % w or mh // h != mw // w:
        raise ValueError(f"mask {mh}x{mw} cannot be aligned to features {h}x{w}")
    return F.interpolate(mask, size=(h, w), mode="nearest")


class SpadeLayer(nn.Module):
    """Spatially-adaptive denormalization: ``gamma(mask) * norm(x) + beta(mask)``.

    The gamma head's bias starts at 1 so a fresh layer is close to plain
    instance normalization.
    """

    def __init__(self, cfg: SpadeLayerConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.kernel // 2
        self.shared = nn.Sequential(
            nn.Conv2d(cfg.label_channels, cfg.hidden_channels, cfg.kernel, padding=pad),
            nn.ReLU(),
        )
        self.gamma = nn.Conv2d(cfg.hidden_channels, cfg.norm_channels, cfg.kernel, padding=pad)
        self.beta = nn.Conv2d(cfg.hidden_channels, cfg.norm_channels, cfg.kernel, padding=pad)
        nn.init.ones_(self.gamma.bias)

    def modulation(self, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        actv = self.shared(mask)
        return self.gamma(actv), self.beta(actv)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.norm_channels:
            raise ValueError(f"expected {self.cfg.norm_channels} channels, got {x.shape[1]}")
        mask = resize_mask(mask, x)
        gamma, beta = self.modulation(mask)
        return gamma * instance_normalize(x, self.cfg.epsilon) + beta


def spade_forward(x: torch.Tensor, mask: torch.Tensor, layer: SpadeLayer) -> torch.Tensor:
    return layer(x, mask)


class ConvBlock(nn.Module):
    """conv -> optional instance norm -> activation."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, norm=True, act="relu", padding_mode="reflect"):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, padding_mode=padding_mode)
        self.norm = InstanceNorm() if norm else nn.Identity()
        self.act = {"relu": nn.ReLU(), "lrelu": nn.LeakyReLU(0.2), "none": nn.Identity()}[act]

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResnetBlock(nn.Module):
    """Residual block: x + (conv3 -> IN -> ReLU -> conv3 -> IN), reflection padded."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            ConvBlock(channels, channels, 3, act="relu"),
            ConvBlock(channels, channels, 3, act="none"),
        )

    def forward(self, x):
        return x + self.body(x)


class SpadeResBlock(nn.Module):
    """Residual block whose normalizations are SPADE layers fed by the mask."""

    def __init__(self, fin: int, fout: int, spade_hidden: int = 128, label_channels: int = 1):
        super().__init__()
        fmid = min(fin, fout)

        def spade(ch):
            return SpadeLayer(SpadeLayerConfig(ch, label_channels, spade_hidden))

        self.norm_0 = spade(fin)
        self.conv_0 = nn.Conv2d(fin, fmid, 3, padding=1)
        self.norm_1 = spade(fmid)
        self.conv_1 = nn.Conv2d(fmid, fout, 3, padding=1)
        self.learned_shortcut = fin != fout
        if self.learned_shortcut:
            self.norm_s = spade(fin)
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)

    def forward(self, x, mask):
        shortcut = self.conv_s(self.norm_s(x, mask)) if self.learned_shortcut else x
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, mask), 0.2))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, mask), 0.2))
        return shortcut + dx


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

def receptive_field(layers_per_disc: int) -> int:
    rf = 4  # logits conv
    rf += 3  # last hidden block, stride 1
    for _ in range(layers_per_disc - 1):
        rf = (rf - 1) * 2 + 4
    return rf


class _DiscBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, norm, spade_hidden, act=True):
        super().__init__()
        if stride == 2:
            self.pad = nn.Identity()
            self.conv = nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1)
        else:
            self.pad = nn.ZeroPad2d((1, 2, 1, 2))
            self.conv = nn.Conv2d(in_ch, out_ch, 4, stride=1)
        self.norm_kind = norm
        if norm == "instance":
            self.norm = InstanceNorm()
        elif norm == "spade":
            self.norm = SpadeLayer(SpadeLayerConfig(out_ch, 1, spade_hidden))
        self.act = act

    def forward(self, x, mask):
        x = self.conv(self.pad(x))
        if self.norm_kind == "instance":
            x = self.norm(x)
        elif self.norm_kind == "spade":
            x = self.norm(x, _pool_to(mask, x))
        return F.leaky_relu(x, 0.2) if self.act else x


def _pool_to(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # strided blocks halve exactly, so the factor is always an integer
    factor = mask.shape[2] // like.shape[2]
    return F.avg_pool2d(mask, factor) if factor > 1 else mask


class PatchDiscriminator(nn.Module):
    """Fully convolutional patch discriminator returning logits and hidden features."""

    def __init__(self, cfg: MultiScaleDiscConfig):
        super().__init__()
        self.cfg = cfg
        L, c = cfg.layers_per_disc, cfg.base_channels
        blocks = []
        ch_in = cfg.in_channels
        for i in range(L):
            ch_out = min(c * 2**i, 8 * c)
            stride = 1 if i == L - 1 else 2
            norm = "none" if i == 0 else cfg.norm
            blocks.append(_DiscBlock(ch_in, ch_out, stride, norm, cfg.spade_hidden))
            ch_in = ch_out
        self.blocks = nn.ModuleList(blocks)
        self.logits = _DiscBlock(ch_in, 1, 1, "none", cfg.spade_hidden, act=False)
        self.receptive_field = receptive_field(L)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[2:]
        if min(h, w) < self.receptive_field:
            raise ValueError(f"input {h}x{w} is smaller than the {self.receptive_field}px receptive field")
        stride_product = 2 ** (self.cfg.layers_per_disc - 1)
        if h % stride_product or w % stride_product:
            raise ValueError(f"input {h}x{w} not divisible by the stride product {stride_product}")
        mask = x[:, -1:]
        feats = []
        for block in self.blocks:
            x = block(x, mask)
            feats.append(x)
        return self.logits(x, mask), feats


def patch_discriminator_forward(img_and_mask: torch.Tensor, disc: PatchDiscriminator):
    return disc(img_and_mask)


class MultiScaleDiscriminator(nn.Module):
    """One patch discriminator per scale; scale k sees the input average-pooled by 2^(k-1)."""

    def __init__(self, cfg: MultiScaleDiscConfig):
        super().__init__()
        self.cfg = cfg
        self.discs = nn.ModuleList(PatchDiscriminator(cfg) for _ in range(cfg.num_scales))

    def forward(self, img: torch.Tensor, mask: torch.Tensor, skip_scales: int = 0):
        """Run every scale from ``skip_scales + 1`` up.

        ``skip_scales`` states that the inputs are already downsampled by
        ``2^skip_scales`` (the half-resolution phase of the coarse-to-fine
        generator), so the finest discriminators are left out.
        """
        if img.shape[2:] != mask.shape[2:]:
            raise ValueError(f"image {tuple(img.shape[2:])} and mask {tuple(mask.shape[2:])} differ in size")
        if not 0 <= skip_scales < self.cfg.num_scales:
            raise ValueError("skip_scales out of range")
        n_pool = self.cfg.num_scales - 1 - skip_scales
        h, w = img.shape[2:]
        if h % 2**n_pool or w % 2**n_pool:
            raise ValueError(f"input {h}x{w} cannot be halved {n_pool} times")
        x = torch.cat([img, mask], dim=1)
        out = []
        for k, disc in enumerate(self.discs[skip_scales:]):
            if k > 0:
                x = F.avg_pool2d(x, 2)
            out.append(disc(x))
        return out


def multiscale_forward(img, mask, disc: MultiScaleDiscriminator, skip_scales: int = 0):
    return disc(img, mask, skip_scales)
