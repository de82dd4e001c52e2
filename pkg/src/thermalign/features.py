"""Pooled pyramid-feature export for adaptation diagnostics.

One CSV row per image, branch, and pyramid level holding the global
average pooled feature vector. Projecting or probing those vectors
(e.g. to check whether the two branches have become indistinguishable)
is left to external tools.
"""
from __future__ import annotations

import csv
from pathlib import Path

import torch

from .data import load_image, read_manifest
from .detector import TwoBranchDetector, image_to_tensor


def export_features(
    detector: TwoBranchDetector,
    manifest_path: str | Path,
    out_path: str | Path,
) -> int:
    """Write pooled per-level features for both branches; returns row count."""
    records = read_manifest(manifest_path)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    detector.eval()
    rows = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        width = detector.config.fpn_channels
        writer.writerow(
            ["image_id", "branch", "level"] + [f"v_{i + 1}" for i in range(width)]
        )
        with torch.no_grad():
            for rec in records:
                pyramids = {
                    "rgb": detector.rgb(image_to_tensor(load_image(rec.rgb_path))),
                    "thermal": detector.thermal(
                        image_to_tensor(load_image(rec.thermal_path))
                    ),
                }
                for branch, pyramid in pyramids.items():
                    for level, fmap in enumerate(pyramid, start=1):
                        pooled = fmap.mean(dim=(-2, -1)).flatten().tolist()
                        writer.writerow(
                            [rec.pair_id, branch, level]
                            + [f"{v:.6g}" for v in pooled]
                        )
                        rows += 1
    return rows
