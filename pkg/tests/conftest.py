import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from panicle_synth.data_model import (  # noqa: E402
    DatasetManifest,
    ManifestEntry,
    boxes_to_labelmap,
    save_image,
    save_labelmap,
    save_manifest,
)
from panicle_synth.toydata import make_toy_tiles  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, text = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else "FAIL"
        prev = _criteria.get(cid)
        if prev is None or prev[0] == "PASS":
            _criteria[cid] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c.lstrip("C"))):
        status, text = _criteria[cid]
        terminalreporter.write_line(f"{cid:>4} {status}  {text}")


def write_toy_manifest(root: Path, n: int = 8, size: int = 64, seed: int = 0, split: str = "train",
                       prefix: str = "toy") -> DatasetManifest:
    entries = []
    for i, (pixels, boxes) in enumerate(make_toy_tiles(n, size, seed)):
        tid = f"{prefix}_{i:03d}"
        save_image(pixels, root / "tiles" / f"{tid}.png")
        save_labelmap(boxes_to_labelmap(boxes, size, size, tid), root / "labelmaps" / f"{tid}.png")
        entries.append(ManifestEntry(tid, f"tiles/{tid}.png", f"labelmaps/{tid}.png", boxes))
    manifest = DatasetManifest(entries, split, root=root)
    save_manifest(manifest, root / f"{split}.json")
    return manifest


@pytest.fixture
def toy_manifest(tmp_path):
    return write_toy_manifest(tmp_path)


@pytest.fixture(scope="session")
def published_table():
    return json.loads((FIXTURES / "published_table1.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def toy_experiment_config(root: Path, seed: int = 0, epochs: int = 12, n_synthetic: int = 16) -> dict:
    """A complete three-arm experiment on a procedural 256 px orthomosaic, desk-sized."""
    from panicle_synth.toydata import make_toy_orthomosaic
    from panicle_synth.trainer import desk_config

    raster, boxes = make_toy_orthomosaic(root / "inputs", size=256, n_panicles=80, seed=seed)
    train = {}
    for model in ("pix2pixhd", "spade"):
        d = desk_config(model)
        train[model] = {"epochs": epochs, "resolution": 64, "generator": d.generator,
                        "discriminator": d.discriminator}
    return {
        "seed": seed,
        "out": str(root / "run"),
        "prepare": {"rasters": [str(raster)], "boxes": str(boxes), "tile_size": 64, "train_ratio": 0.5},
        "n_synthetic": n_synthetic,
        "train": train,
    }
