"""Command-line entry point.

Subcommands: synth, mask, pretrain, train, infer, eval,
export-features. Every artifact-writing run drops a run_manifest.txt
beside its outputs recording the resolved configuration and seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import masks as mask_ops
from .data import (
    load_image,
    read_manifest,
    save_image,
    save_mask_image,
    write_detections,
    write_keyvalue,
)
from .features import export_features
from .fusion import INFER_MODES, infer
from .metrics import evaluate
from .pretrain import PretrainConfig, pretrain
from .synth import SceneSpec, generate_dataset
from .training import TrainConfig, build_model_from_checkpoint, train

logger = logging.getLogger(__name__)


def _write_run_manifest(out_dir: Path, subcommand: str, values: dict) -> None:
    record = {"subcommand": subcommand, "tool_version": __version__}
    record.update(values)
    write_keyvalue(out_dir / "run_manifest.txt", record)


def _train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            if isinstance(value, str) and isinstance(getattr(config, f.name), tuple):
                elem = int if f.name == "backbone_widths" else float
                value = tuple(elem(v) for v in value.split(","))
            overrides[f.name] = value
    return dataclasses.replace(config, **overrides) if overrides else config


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, action="store_const", const=True, default=None)
        elif isinstance(f.default, tuple):
            parser.add_argument(flag, type=str, default=None, metavar="V1,V2,...")
        elif isinstance(f.default, int):
            parser.add_argument(flag, type=int, default=None)
        elif isinstance(f.default, float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermalign",
        description="RGB-to-thermal detector adaptation with masked background fusion",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=100)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--crown-count", type=str, default="8,16")
    p.add_argument("--crown-radius", type=str, default="8,20")
    p.add_argument("--shadow-fraction", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.015)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("mask", help="generate FG/BG masks for RGB images")
    p.add_argument("--out", required=True)
    p.add_argument("--polarity", choices=["fg_one", "bg_one"], default="fg_one")
    p.add_argument("--dump-intermediate", action="store_true",
                   help="also write marker and elevation maps")
    p.add_argument("inputs", nargs="+", help="RGB image path(s)")

    p = sub.add_parser("pretrain", help="bootstrap the baseline RGB detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--include-difficult", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="model config (flat key=value file)")

    p = sub.add_parser("train", help="run self-supervised adaptation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-checkpoint", help="baseline checkpoint directory")
    _add_train_flags(p)

    p = sub.add_parser("infer", help="detect crowns on image pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="detections CSV path")
    p.add_argument("--mode", choices=INFER_MODES, default="fused")
    p.add_argument("--rgb")
    p.add_argument("--thermal")
    p.add_argument("--manifest")
    p.add_argument("--overlay-dir", help="write detection overlays here")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="compute AP50/AR100/shadowed metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--mode", choices=INFER_MODES, default="fused")
    p.add_argument("--coverage-of", choices=["prediction", "gt"], default="prediction")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-features", help="dump pooled pyramid features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SceneSpec(
        height=args.height,
        width=args.width,
        crown_count=tuple(int(v) for v in args.crown_count.split(",")),
        crown_radius=tuple(float(v) for v in args.crown_radius.split(",")),
        shadow_fraction=args.shadow_fraction,
        noise=args.noise,
        seed=args.seed,
    )
    counts = {k: v for k, v in
              (("train", args.train), ("val", args.val), ("test", args.test)) if v > 0}
    manifests = generate_dataset(spec, counts, args.out, force=args.force)
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "synth", {
        "seed": args.seed, "counts": ",".join(f"{k}:{v}" for k, v in counts.items()),
        "outputs": ";".join(str(m) for m in manifests.values()),
    })
    for split, manifest in manifests.items():
        print(f"{split}: {manifest}")
    return 0


def _cmd_mask(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    polarity = mask_ops.Polarity(args.polarity)
    for input_path in args.inputs:
        rgb = load_image(input_path)
        stem = Path(input_path).stem
        mask = mask_ops.foreground_mask(rgb)
        if polarity is mask_ops.Polarity.BG_ONE:
            mask = mask_ops.invert(mask)
        save_mask_image(out_dir / f"{stem}_mask.png", mask)
        if args.dump_intermediate:
            gray = mask_ops.rgb_to_grayscale(rgb)
            markers = mask_ops.intensity_markers(gray)
            elevation = mask_ops.sobel_elevation(gray)
            save_image(out_dir / f"{stem}_markers.png", markers.astype(np.float32) / 2.0)
            peak = float(elevation.max()) or 1.0
            save_image(out_dir / f"{stem}_elevation.png", elevation / peak)
    _write_run_manifest(out_dir, "mask", {
        "polarity": args.polarity, "inputs": ";".join(args.inputs),
    })
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    config = PretrainConfig(
        batch_size=args.batch_size, iterations=args.iterations,
        lr=args.lr, include_difficult=args.include_difficult, seed=args.seed,
    )
    model_config = TrainConfig.from_file(args.config) if args.config else None
    out_dir = Path(args.out)
    checkpoint = pretrain(args.manifest, config, out_dir, model_config)
    _write_run_manifest(out_dir, "pretrain", {
        "seed": args.seed, "manifest": args.manifest, "checkpoint": str(checkpoint),
    })
    print(checkpoint)
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _train_config_from_args(args)
    out_dir = Path(args.out)
    checkpoint = train(args.manifest, config, out_dir, init_checkpoint=args.init_checkpoint)
    manifest_values = {"manifest": args.manifest, "checkpoint": str(checkpoint)}
    manifest_values.update(config.to_dict())
    _write_run_manifest(out_dir, "train", manifest_values)
    print(checkpoint)
    return 0


def _overlay(rgb: np.ndarray, boxes: np.ndarray, path: Path) -> None:
    from PIL import Image, ImageDraw

    img = Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    for x1, y1, x2, y2 in boxes:
        draw.rectangle((float(x1), float(y1), float(x2), float(y2)), outline=(255, 40, 40))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def _cmd_infer(args: argparse.Namespace) -> int:
    detector, config = build_model_from_checkpoint(args.checkpoint)
    weights = config.fusion_weights()
    if args.manifest:
        records = read_manifest(args.manifest)
        pairs = [(r.pair_id, r.rgb_path, r.thermal_path) for r in records]
    elif args.rgb:
        if args.mode != "rgb_only" and not args.thermal:
            raise ValueError("--thermal is required unless --mode rgb_only")
        pairs = [(Path(args.rgb).stem, Path(args.rgb),
                  Path(args.thermal) if args.thermal else None)]
    else:
        raise ValueError("provide --manifest or --rgb/--thermal")
    results = []
    for pair_id, rgb_path, thermal_path in pairs:
        rgb = load_image(rgb_path)
        thermal = load_image(thermal_path) if thermal_path else None
        boxes, scores = infer(detector, rgb, thermal, mode=args.mode, weights=weights)
        results.append((pair_id, boxes, scores))
        if args.overlay_dir:
            _overlay(rgb, boxes, Path(args.overlay_dir) / f"{pair_id}_overlay.png")
    out_path = Path(args.out)
    write_detections(out_path, results)
    _write_run_manifest(out_path.parent, "infer", {
        "checkpoint": args.checkpoint, "mode": args.mode,
        "seed": args.seed, "detections": str(out_path),
    })
    print(out_path)
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    detector, config = build_model_from_checkpoint(args.checkpoint)
    report = evaluate(
        detector, args.manifest, mode=args.mode,
        weights=config.fusion_weights(), coverage_of=args.coverage_of,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = "\n".join(report.summary_lines()) + "\n"
    (out_dir / f"report_{args.mode}.txt").write_text(text)
    import csv as _csv

    with open(out_dir / f"report_{args.mode}.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["mode", "ap50", "ar100", "shadowed_rate", "images", "gt", "difficult"])
        writer.writerow([
            report.mode, f"{report.ap50:.4f}", f"{report.ar100:.4f}",
            f"{report.shadowed_rate:.4f}", report.num_images,
            report.num_gt, report.num_difficult,
        ])
    _write_run_manifest(out_dir, "eval", {
        "checkpoint": args.checkpoint, "manifest": args.manifest,
        "mode": args.mode, "seed": args.seed,
    })
    print(text, end="")
    return 0


def _cmd_export_features(args: argparse.Namespace) -> int:
    detector, _ = build_model_from_checkpoint(args.checkpoint)
    rows = export_features(detector, args.manifest, args.out)
    _write_run_manifest(Path(args.out).parent, "export-features", {
        "checkpoint": args.checkpoint, "manifest": args.manifest,
        "rows": rows, "seed": args.seed,
    })
    print(f"{args.out}: {rows} rows")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "mask": _cmd_mask,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "export-features": _cmd_export_features,
}


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.subcommand](args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
