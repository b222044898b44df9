import math

import pytest
import torch

from oracles import grad_check
from panicle_synth.layers import MultiScaleDiscConfig, MultiScaleDiscriminator
from panicle_synth.objectives import (
    LossWeights,
    composite_losses,
    discriminator_losses,
    feature_matching_loss,
    gan_loss,
    generator_losses,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def _reference_d(r, f):
    return -(torch.log(torch.sigmoid(r)).mean() + torch.log(1 - torch.sigmoid(f)).mean())


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (3, 1, 7, 5)])
def test_uninformative_point(shape):
    z = torch.zeros(shape, dtype=torch.float64)
    assert abs(gan_loss(z, z, "discriminator").item() - 2 * math.log(2)) < 1e-12


def test_perfect_discriminator_limit():
    r = torch.full((2, 1, 3, 3), 40.0, dtype=torch.float64)
    assert gan_loss(r, -r, "discriminator").item() < 1e-15


def test_matches_elementwise_reference():
    r = torch.randn(2, 1, 6, 6, dtype=torch.float64) * 3
    f = torch.randn(2, 1, 6, 6, dtype=torch.float64) * 3
    assert abs(gan_loss(r, f, "discriminator").item() - _reference_d(r, f).item()) < 1e-9
    g_ref = -torch.log(torch.sigmoid(f)).mean()
    assert abs(gan_loss(r, f, "generator").item() - g_ref.item()) < 1e-9
    lit_ref = torch.log(1 - torch.sigmoid(f)).mean()
    assert abs(gan_loss(r, f, "generator", literal=True).item() - lit_ref.item()) < 1e-9


def test_extreme_logits_stay_finite():
    big = torch.tensor([[1e4, -1e4]], dtype=torch.float32)
    for side in ("discriminator", "generator"):
        assert torch.isfinite(gan_loss(big, big, side))


def test_unknown_side():
    with pytest.raises(ValueError):
        gan_loss(torch.zeros(1), torch.zeros(1), "critic")


def test_fm_zero_on_identical():
    feats = [torch.randn(1, 2, 4, 4), torch.randn(1, 3, 2, 2)]
    assert feature_matching_loss(feats, [f.clone() for f in feats]).item() == 0.0


def test_fm_hand_example():
    assert feature_matching_loss([torch.tensor([2.0, 0.0])], [torch.tensor([0.0, 0.0])]).item() == 1.0


def test_fm_homogeneous():
    r = [torch.randn(2, 3, 4, 4, dtype=torch.float64) for _ in range(3)]
    f = [torch.randn(2, 3, 4, 4, dtype=torch.float64) for _ in range(3)]
    base = feature_matching_loss(r, f).item()
    for c in (-2.5, 0.5, 3.0):
        scaled = feature_matching_loss([c * t for t in r], [c * t for t in f]).item()
        assert scaled == pytest.approx(abs(c) * base, rel=1e-12)


def test_fm_mismatch_errors():
    with pytest.raises(ValueError):
        feature_matching_loss([torch.zeros(2)], [torch.zeros(3)])
    with pytest.raises(ValueError):
        feature_matching_loss([torch.zeros(2)], [])


def test_fm_does_not_reach_real_branch():
    r = torch.randn(4, requires_grad=True)
    f = torch.randn(4, requires_grad=True)
    feature_matching_loss([r], [f]).backward()
    assert r.grad is None and f.grad is not None


def test_loss_gradients():
    r = torch.randn(2, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    f = torch.randn(2, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: gan_loss(r, f, "discriminator"), [r, f]) < 1e-4
    assert grad_check(lambda: gan_loss(r, f, "generator"), [f]) < 1e-4
    assert grad_check(lambda: gan_loss(r, f, "generator", literal=True), [f]) < 1e-4
    a = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    b = torch.randn(2, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: feature_matching_loss([a, a[:, :2]], [b, b[:, :2] * 2]), [b]) < 1e-4


def test_lambda_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(lambda_fm=-1)


def _setup(num_scales, size=64):
    cfg = MultiScaleDiscConfig(num_scales=num_scales, layers_per_disc=2, base_channels=4)
    disc = MultiScaleDiscriminator(cfg).double()
    conv = torch.nn.Conv2d(1, 3, 3, padding=1).double()
    masks = (torch.rand(2, 1, size, size) > 0.5).double()
    reals = torch.rand(2, 3, size, size, dtype=torch.float64) * 2 - 1
    return disc, (lambda m: torch.tanh(conv(m))), masks, reals


def test_single_scale_reduces_to_components():
    disc, gen, masks, reals = _setup(1)
    out = composite_losses(gen, disc, masks, reals, LossWeights(10.0))
    fake = gen(masks)
    ((rl, rf),) = disc(reals, masks)
    ((fl, ff),) = disc(fake, masks)
    assert out.gan_g.item() == pytest.approx(gan_loss(rl, fl, "generator").item(), abs=1e-12)
    assert out.gan_d.item() == pytest.approx(gan_loss(rl, fl, "discriminator").item(), abs=1e-12)
    assert out.fm.item() == pytest.approx(feature_matching_loss(rf, ff).item(), abs=1e-12)
    assert out.total_g.item() == pytest.approx(out.gan_g.item() + 10 * out.fm.item(), abs=1e-9)


def test_lambda_zero_and_linearity():
    disc, gen, masks, reals = _setup(3)
    zero = composite_losses(gen, disc, masks, reals, LossWeights(0.0))
    ten = composite_losses(gen, disc, masks, reals, LossWeights(10.0))
    assert torch.equal(zero.total_g, zero.gan_g)
    slope = (ten.total_g - zero.total_g).item() / 10
    assert slope == pytest.approx(ten.fm.item(), abs=1e-9)
    assert ten.fm.item() >= 0


def test_per_scale_sums():
    disc, gen, masks, reals = _setup(3)
    out = composite_losses(gen, disc, masks, reals, LossWeights(10.0))
    assert len(out.per_scale) == 3
    assert abs(sum(s.gan_g.item() for s in out.per_scale) - out.gan_g.item()) < 1e-9
    assert abs(sum(s.gan_d.item() for s in out.per_scale) - out.gan_d.item()) < 1e-9
    assert abs(sum(s.fm.item() for s in out.per_scale) - out.fm.item()) < 1e-9
    assert set(out.summary()) == {"gan_g", "gan_d", "fm", "total_g"}


def test_discriminator_step_reduces_its_loss():
    disc, gen, masks, reals = _setup(2)
    with torch.no_grad():
        fake = gen(masks)

    def d_loss():
        return discriminator_losses(disc(reals, masks), disc(fake, masks))[0]

    before = d_loss()
    disc.zero_grad()
    before.backward()
    with torch.no_grad():
        for p in disc.parameters():
            p -= 1e-3 * p.grad
    assert d_loss().item() < before.item()


def test_generator_losses_literal_mode():
    disc, gen, masks, reals = _setup(1)
    out_r, out_f = disc(reals, masks), disc(gen(masks), masks)
    total, gan, fm, _, _ = generator_losses(out_r, out_f, LossWeights(0.0, "literal"))
    assert gan.item() == pytest.approx(-torch.nn.functional.softplus(out_f[0][0]).mean().item(), abs=1e-12)
    assert total.item() == gan.item()
