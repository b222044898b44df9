"""``panicle-synth`` command line.

Exit codes: 0 success, 1 user error, 2 internal error (including a failed
experiment arm).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .data_model import ManifestError
from .pipeline import (
    ARMS,
    PipelineConfig,
    UserError,
    cmd_evaluate,
    cmd_experiment,
    cmd_fit_sampler,
    cmd_generate,
    cmd_merge,
    cmd_prepare,
    cmd_sample,
    cmd_train,
)
from .toydata import make_toy_orthomosaic
from .trainer import MODELS

log = logging.getLogger("panicle_synth")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output root (overrides config)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="panicle-synth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="tile rasters into train/test manifests")
    p.add_argument("--rasters", nargs="+")
    p.add_argument("--boxes")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--train-ratio", type=float)

    p = sub.add_parser("fit-sampler", parents=[common], help="fit box statistics on a training manifest")
    p.add_argument("--manifest")

    p = sub.add_parser("sample", parents=[common], help="write random label maps")
    p.add_argument("--distribution")
    p.add_argument("--n", type=int)

    p = sub.add_parser("train", parents=[common], help="train one GAN")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--manifest")

    p = sub.add_parser("generate", parents=[common], help="render synthetic tiles from random label maps")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--random-manifest")

    p = sub.add_parser("merge", parents=[common], help="combine real and synthetic training manifests")
    p.add_argument("--real")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--name", default="merged")

    p = sub.add_parser("evaluate", parents=[common], help="score a detector on a test manifest")
    p.add_argument("--manifest")
    p.add_argument("--detections", help="detections JSON from an external detector")
    p.add_argument("--fit-manifest", help="training manifest used to tune the stub detector")
    p.add_argument("--name", default="eval")

    sub.add_parser("experiment", parents=[common], help="run the three-arm augmentation comparison")

    p = sub.add_parser("toy-data", parents=[common], help="write a procedural orthomosaic and its boxes")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--panicles", type=int, default=60)
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def run(args) -> int:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "prepare":
        for key, val in (("rasters", args.rasters), ("boxes", args.boxes),
                         ("tile_size", args.tile_size), ("train_ratio", args.train_ratio)):
            if val is not None:
                cfg.prepare[key] = val
        train, test = cmd_prepare(cfg, args.force)
        print(f"train: {len(train)} tiles, test: {len(test)} tiles -> {cfg.out_dir / 'data'}")
    elif cmd == "fit-sampler":
        dist = cmd_fit_sampler(cfg, args.manifest, args.force)
        print(f"fitted {len(dist.size_samples)} box sizes, counts {sorted(dist.count_hist)}")
    elif cmd == "sample":
        m = cmd_sample(cfg, args.distribution, args.n, args.force)
        print(f"wrote {len(m)} random label maps -> {cfg.out_dir / 'random'}")
    elif cmd == "train":
        print(cmd_train(cfg, args.model, args.manifest, args.force))
    elif cmd == "generate":
        m = cmd_generate(cfg, args.model, args.checkpoint, args.random_manifest, args.force)
        print(f"wrote {len(m)} synthetic tiles -> {cfg.out_dir / 'synthetic' / args.model}")
    elif cmd == "merge":
        m = cmd_merge(cfg, args.real, args.synthetic, args.name, args.force)
        print(f"merged manifest with {len(m)} entries")
    elif cmd == "evaluate":
        if args.detections:
            cfg.eval["detections"] = args.detections
        report = cmd_evaluate(cfg, args.manifest, args.fit_manifest, args.name, args.force)
        print(json.dumps({k: v for k, v in report.to_dict().items() if k in ("map_50_95", "mape", "mae", "rmse")}))
    elif cmd == "experiment":
        result = cmd_experiment(cfg, args.force)
        print(f"{'metric':<14}" + "".join(f"{arm:>12}" for arm in ARMS))
        for row in result["comparison"]:
            cells = "".join(f"{'failed' if row[arm] is None else format(row[arm], '.2f'):>12}" for arm in ARMS)
            print(f"{row['metric']:<14}{cells}")
        if result["failures"]:
            print(f"failed arms: {result['failures']}", file=sys.stderr)
            return 2
    elif cmd == "toy-data":
        raster, boxes = make_toy_orthomosaic(cfg.out_dir, args.size, args.panicles, seed=cfg.seed)
        print(f"{raster}\n{boxes}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UserError, ManifestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
