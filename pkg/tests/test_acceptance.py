"""Acceptance suite: one test per criterion, run at the stated tolerances.

The terminal summary prints a PASS/FAIL line per criterion id.
"""

import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import ks_2samp

from conftest import toy_experiment_config, write_toy_manifest
from oracles import brute_ap, brute_pr, grad_check, greedy_replay, hand_counting, per_pixel_mask, union_area
from panicle_synth.data_model import (
    Box,
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    boxes_to_labelmap,
    iou,
    labelmap_to_boxes,
    load_image,
    save_labelmap,
)
from panicle_synth.evaluation import (
    IOU_THRESHOLDS,
    Detection,
    average_precision,
    coco_map,
    counting_metrics,
    match_detections,
    pr_curve,
)
from panicle_synth.layers import (
    ConvBlock,
    MultiScaleDiscConfig,
    MultiScaleDiscriminator,
    ResnetBlock,
    SpadeLayer,
    SpadeLayerConfig,
    instance_normalize,
)
from panicle_synth.objectives import LossWeights, composite_losses, feature_matching_loss, gan_loss
from panicle_synth.pipeline import PipelineConfig, cmd_experiment
from panicle_synth.sampler import SamplerConfig, fit_distribution, sample_labelmap
from panicle_synth.trainer import (
    Trainer,
    desk_config,
    generate_synthetic_set,
    image_to_tensor,
    monitor_collapse,
    pixel_std,
)

criterion = pytest.mark.criterion


# -- C1 -----------------------------------------------------------------------

@criterion("C1", "published detection/counting table is shipped as fixture metadata only")
def test_published_table_is_metadata(published_table):
    metrics = published_table["metrics"]
    assert metrics == ["map_50_95", "mape", "mae", "rmse"]
    rows = {arm: [vals[k] for k in metrics] for arm, vals in published_table["arms"].items()}
    assert rows == {"real": [72.4, 11.6, 8.0, 9.6], "pix2pixhd": [78.9, 7.2, 4.6, 5.6], "spade": [79, 9.7, 5.5, 6.5]}
    assert published_table["train_images"] == {"real": 400, "pix2pixhd": 1400, "spade": 1400}
    assert published_table["test_images"] == 100
    assert "metadata only" in published_table["_note"].lower()


# -- C2 -----------------------------------------------------------------------

def _random_instance(rng, canvas=24):
    gts, dets = {}, []
    for i in range(int(rng.integers(1, 11))):
        img = f"im{i}"
        boxes = []
        for _ in range(rng.integers(0, 7)):
            w, h = (int(v) for v in rng.integers(2, 8, 2))
            boxes.append(Box(int(rng.integers(0, canvas - w)), int(rng.integers(0, canvas - h)), w, h))
        gts[img] = boxes
        for b in boxes:
            if rng.random() < 0.8:
                dx, dy, dw, dh = (int(v) for v in rng.integers(-2, 3, 4))
                box = Box(max(0, b.x + dx), max(0, b.y + dy), max(1, b.w + dw), max(1, b.h + dh))
                dets.append(Detection(img, box, float(np.round(rng.random(), 1))))
        for _ in range(rng.integers(0, 3)):
            w, h = (int(v) for v in rng.integers(2, 8, 2))
            box = Box(int(rng.integers(0, canvas - w)), int(rng.integers(0, canvas - h)), w, h)
            dets.append(Detection(img, box, float(np.round(rng.random(), 1))))
    if not any(gts.values()):
        gts["im0"] = [Box(0, 0, 3, 3)]
    return dets, gts


@criterion("C2", "mAP/AP/precision/recall match brute force within 1e-9; counting within 1e-12; < 30 s")
def test_metric_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(200):
        dets, gts = _random_instance(rng)
        tdets = [(d.image_id, (d.box.x, d.box.y, d.box.w, d.box.h), d.score) for d in dets]
        tgts = {k: [(b.x, b.y, b.w, b.h) for b in v] for k, v in gts.items()}
        ref_aps = []
        for thr in IOU_THRESHOLDS:
            m = match_detections(dets, gts, thr)
            flags, n_gt = greedy_replay(tdets, tgts, thr)
            assert m.is_tp == flags and m.n_gt == n_gt
            ref_pr = brute_pr(flags, n_gt)
            got_pr = pr_curve(m).points
            assert len(got_pr) == len(ref_pr)
            for (r, p), (rr, pp) in zip(got_pr, ref_pr):
                assert abs(r - rr) < 1e-9 and abs(p - pp) < 1e-9
            ref_ap = brute_ap(flags, n_gt)
            assert abs(average_precision(m) - ref_ap) < 1e-9
            assert abs(average_precision(m, interpolate=False) - brute_ap(flags, n_gt, envelope=False)) < 1e-9
            ref_aps.append(ref_ap)
        got_map, got_aps, _ = coco_map(dets, gts)
        assert max(abs(a - b) for a, b in zip(got_aps, ref_aps)) < 1e-9
        assert abs(got_map - 100.0 * sum(ref_aps) / len(ref_aps)) < 1e-9

        n = int(rng.integers(1, 11))
        counts = [int(v) for v in rng.integers(1, 40, n)]
        preds = [int(v) for v in rng.integers(0, 50, n)]
        got, ref = counting_metrics(counts, preds), hand_counting(counts, preds)
        assert all(abs(a - b) < 1e-12 for a, b in zip(got, ref))
    assert time.perf_counter() - start < 30


# -- C3 -----------------------------------------------------------------------

def _separated_boxes(rng, canvas=32, max_boxes=6):
    """Boxes with at least one clear pixel between any two, so each is its own component."""
    boxes = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        for _attempt in range(50):
            w, h = (int(v) for v in rng.integers(1, 10, 2))
            x, y = int(rng.integers(0, canvas - w + 1)), int(rng.integers(0, canvas - h + 1))
            clear = all(x + w < b[0] or b[0] + b[2] < x or y + h < b[1] or b[1] + b[3] < y for b in boxes)
            if clear:
                boxes.append((x, y, w, h))
                break
    return boxes


@criterion("C3", "1000 separated box sets round-trip through label maps; union area matches per-pixel oracle; < 30 s")
def test_labelmap_round_trip():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    canvas = 32
    for _ in range(1000):
        tuples = _separated_boxes(rng, canvas)
        boxes = [Box(*t) for t in tuples]
        back = labelmap_to_boxes(boxes_to_labelmap(boxes, canvas, canvas))
        assert back == sorted(boxes, key=lambda b: (b.y, b.x))
    for _ in range(200):
        tuples = []
        for _ in range(int(rng.integers(1, 7))):
            w, h = (int(v) for v in rng.integers(1, 14, 2))
            tuples.append((int(rng.integers(0, canvas - w + 1)), int(rng.integers(0, canvas - h + 1)), w, h))
        mask = boxes_to_labelmap([Box(*t) for t in tuples], canvas, canvas).values
        np.testing.assert_array_equal(mask, per_pixel_mask(tuples, canvas, canvas))
        assert int(mask.sum()) == union_area(tuples)
    assert time.perf_counter() - start < 30


# -- C4 -----------------------------------------------------------------------

def _gradient_cases():
    torch.manual_seed(0)
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    mask = (torch.rand(2, 1, 8, 8) > 0.5).double()
    target = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    spade = SpadeLayer(SpadeLayerConfig(4, hidden_channels=4)).double()
    conv = ConvBlock(4, 4, 3, act="lrelu").double()
    res = ResnetBlock(4).double()
    real = torch.randn(2, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    fake = torch.randn(2, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    feats = [torch.randn(2, 4, 8, 8, dtype=torch.float64), torch.randn(2, 4, 4, 4, dtype=torch.float64)]
    gen_feats = torch.randn(2, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    return {
        "spade layer": (lambda: (spade(x, mask) * target).sum(), [x, spade.shared[0].weight, spade.gamma.weight]),
        "instance norm": (lambda: (instance_normalize(x) * target).sum(), [x]),
        "conv block": (lambda: (conv(x) * target).sum(), [x, conv.conv.weight]),
        "residual block": (lambda: (res(x) * target).sum(), [x, res.body[0].conv.weight]),
        "discriminator loss": (lambda: gan_loss(real, fake, "discriminator"), [real, fake]),
        "generator loss": (lambda: gan_loss(real, fake, "generator"), [fake]),
        "feature matching": (lambda: feature_matching_loss(feats, [gen_feats, gen_feats[:, :, ::2, ::2] * 2]),
                             [gen_feats]),
    }


@criterion("C4", "central-difference gradient checks at float64, relative error < 1e-4, tensors <= 2x4x8x8; < 2 min")
def test_gradient_checks():
    start = time.perf_counter()
    errors = {}
    for name, (fn, tensors) in _gradient_cases().items():
        assert all(t.numel() <= 2 * 4 * 8 * 8 and t.dtype == torch.float64 for t in tensors)
        errors[name] = grad_check(fn, tensors)
    assert max(errors.values()) < 1e-4, errors
    assert time.perf_counter() - start < 120


# -- C5 -----------------------------------------------------------------------

@criterion("C5", "loss identities: 2 ln 2 at D=0.5, feature matching 0 and 1.0, total_g linear in lambda")
def test_loss_identities():
    zero = torch.zeros(2, 1, 5, 5, dtype=torch.float64)
    assert abs(gan_loss(zero, zero, "discriminator").item() - 2 * math.log(2)) <= 1e-9

    torch.manual_seed(1)
    feats = [torch.randn(1, 3, 4, 4), torch.randn(1, 2, 2, 2)]
    assert feature_matching_loss(feats, [f.clone() for f in feats]).item() == 0.0
    assert feature_matching_loss([torch.tensor([2.0, 0.0])], [torch.tensor([0.0, 0.0])]).item() == 1.0

    disc = MultiScaleDiscriminator(MultiScaleDiscConfig(num_scales=2, layers_per_disc=2, base_channels=4)).double()
    conv = torch.nn.Conv2d(1, 3, 3, padding=1).double()
    masks = (torch.rand(1, 1, 32, 32) > 0.5).double()
    reals = torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    totals = {lam: composite_losses(lambda m: torch.tanh(conv(m)), disc, masks, reals, LossWeights(lam))
              for lam in (0.0, 1.0, 10.0, 25.0)}
    base = totals[0.0]
    for lam, out in totals.items():
        assert abs(out.total_g.item() - (base.gan_g.item() + lam * base.fm.item())) < 1e-9


# -- C6 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    manifest = write_toy_manifest(root / "data", n=8)
    runs = {}
    start = time.perf_counter()
    for model in ("pix2pixhd", "spade"):
        trainer = Trainer.from_manifest(manifest, desk_config(model), checkpoint_dir=root / model)
        before = trainer.eval_l1()
        trainer.train()
        runs[model] = (trainer, before, trainer.eval_l1())
    return runs, time.perf_counter() - start, root


@criterion("C6", "desk overfit: both GANs on 8 toy tiles within 500 steps halve L1 with no collapse; < 10 min")
def test_desk_overfit(overfit_runs):
    runs, elapsed, root = overfit_runs
    for model, (trainer, before, after) in runs.items():
        assert trainer.state.step <= 500
        assert after <= 0.5 * before, f"{model}: L1 {before:.4f} -> {after:.4f}"
        assert not trainer.state.collapse_flags
        assert not any(h["collapse_flag"] for h in trainer.state.history)
        with torch.no_grad():
            fake = trainer.generate(trainer.masks, images=trainer.images,
                                    generator=torch.Generator().manual_seed(0))
        assert (pixel_std(fake) > 0.01).all(), model
    assert elapsed < 600


def test_trained_generators_respond_to_their_inputs(overfit_runs):
    runs, _, root = overfit_runs
    p2p, _, _ = runs["pix2pixhd"]
    m0 = torch.zeros(1, 1, 64, 64)
    m1 = m0.clone()
    m1[..., 20:34, 10:20] = 1
    with torch.no_grad():
        assert not torch.equal(p2p.G(m0), p2p.G(m1))
        spade, _, _ = runs["spade"]
        z = spade.G.sample_latent(2, torch.Generator().manual_seed(5))
        pair = spade.G(m1.repeat(2, 1, 1, 1), z)
        assert (pair[0] - pair[1]).abs().max() > 1e-4
        assert not torch.equal(spade.G(m0, z[:1]), spade.G(m1, z[:1]))


def test_overfit_outputs_pass_collapse_monitor(overfit_runs, tmp_path):
    runs, _, root = overfit_runs
    masks = runs["spade"][0].masks
    rand = DatasetManifest([], "train", root=tmp_path)
    for i in range(4):
        save_labelmap(LabelMap(masks[i, 0].numpy().astype(np.uint8)), tmp_path / f"lm{i}.png")
        rand.entries.append(ManifestEntry(f"r{i}", None, f"lm{i}.png", labelmap_to_boxes(masks[i, 0].numpy())))
    for model in runs:
        out = generate_synthetic_set(root / model / "final.pt", rand, tmp_path / model)
        imgs = torch.stack([image_to_tensor(load_image(out.resolve(e.image))) for e in out.entries])
        assert not monitor_collapse(imgs)


# -- C7 -----------------------------------------------------------------------

@criterion("C7", "collapse monitor flags an all-black batch and passes uniform noise")
def test_collapse_monitor():
    assert monitor_collapse(torch.full((4, 3, 64, 64), -1.0))
    noise = torch.rand(4, 3, 64, 64, generator=torch.Generator().manual_seed(3)) * 2 - 1
    assert not monitor_collapse(noise)


# -- C8 -----------------------------------------------------------------------

def _corpus(rng, n_tiles=200, tile=128):
    count_choices, count_p = [2, 3, 4, 5, 6, 8, 10], [0.05, 0.15, 0.25, 0.2, 0.15, 0.12, 0.08]
    entries = []
    for i in range(n_tiles):
        boxes = []
        for _ in range(int(rng.choice(count_choices, p=count_p))):
            while True:
                w, h = int(rng.integers(8, 25)), int(rng.integers(6, 21))
                cand = Box(int(rng.integers(0, tile - w + 1)), int(rng.integers(0, tile - h + 1)), w, h)
                if all(iou(cand, b) <= 0.1 for b in boxes):
                    boxes.append(cand)
                    break
        entries.append(ManifestEntry(f"c{i}", None, None, boxes))
    return DatasetManifest(entries, "train")


@criterion("C8", "sampler fidelity over 10000 draws: KS < 0.05 on sizes, count TV < 0.05, constraints hold")
def test_sampler_fidelity():
    dist = fit_distribution(_corpus(np.random.default_rng(11)), tile_size=128)
    cfg = SamplerConfig(seed=5)
    widths, heights, counts = [], [], Counter()
    for i in range(10_000):
        lm, boxes = sample_labelmap(dist, cfg, np.random.default_rng([cfg.seed, i]))
        counts[len(boxes)] += 1
        for b in boxes:
            assert b.within(128, 128)
            widths.append(b.w)
            heights.append(b.h)
        for a_idx in range(len(boxes)):
            for b_idx in range(a_idx + 1, len(boxes)):
                assert iou(boxes[a_idx], boxes[b_idx]) <= 0.1
    fitted_w = [w for w, _ in dist.size_samples]
    fitted_h = [h for _, h in dist.size_samples]
    ks_w = ks_2samp(widths, fitted_w).statistic
    ks_h = ks_2samp(heights, fitted_h).statistic
    keys = set(counts) | set(dist.count_hist)
    tv = 0.5 * sum(abs(counts[k] / 10_000 - dist.count_hist.get(k, 0.0)) for k in keys)
    assert ks_w < 0.05 and ks_h < 0.05, (ks_w, ks_h)
    assert tv < 0.05, tv


# -- C9 -----------------------------------------------------------------------

def _snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion("C9", "three-arm experiment on toy data reports all four metrics and reruns bit-identically; < 15 min")
def test_end_to_end_experiment(tmp_path):
    start = time.perf_counter()
    cfg = PipelineConfig.from_dict(toy_experiment_config(tmp_path))
    first = cmd_experiment(cfg)
    snap = _snapshot(cfg.out_dir)
    second = cmd_experiment(cfg, force=True)
    assert not first["failures"]
    for arm in ("real", "pix2pixhd", "spade"):
        report = first["arms"][arm]
        assert report["status"] == "ok"
        for key in ("map_50_95", "mape", "mae", "rmse"):
            assert isinstance(report[key], float) and math.isfinite(report[key])
        assert report["test_ids"] == first["test_ids"]
    assert first["arms"]["pix2pixhd"]["train_size"] == first["arms"]["real"]["train_size"] + 16
    assert second == first
    assert _snapshot(cfg.out_dir) == snap
    for name in ("report.json", "comparison.csv", "metrics.png", "pr_curves.png"):
        assert (cfg.out_dir / "experiment" / name).is_file()
    assert time.perf_counter() - start < 900


# -- C10 ----------------------------------------------------------------------

@criterion("C10", "save, load and one step equals one uninterrupted step, bit-exact losses")
@pytest.mark.parametrize("model,split_at", [("pix2pixhd", 1), ("pix2pixhd", 4), ("spade", 3)])
def test_checkpoint_determinism(tmp_path, model, split_at):
    manifest = write_toy_manifest(tmp_path / "data", n=2)
    cfg = desk_config(model, epochs=4, max_steps=None)
    trainer = Trainer.from_manifest(manifest, cfg)
    for _ in range(split_at):
        trainer.step()
    path = trainer.save_checkpoint(tmp_path / "mid.pt")
    straight = [trainer.step() for _ in range(2)]
    resumed = Trainer.resume(path, trainer.masks, trainer.images)
    again = [resumed.step() for _ in range(2)]
    assert again == straight
    for a, b in zip(trainer.G.state_dict().values(), resumed.G.state_dict().values()):
        assert torch.equal(a, b)
