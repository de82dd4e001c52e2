"""Inference-time fusion of RGB and thermal pyramid features.

Background pixels, where the RGB modality carries little information,
take a weighted average of the two branches' features; foreground pixels
keep the RGB features untouched. The fused pyramid replaces the RGB one
in front of the shared detection heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import masks as mask_ops
from .anchors import postprocess, pyramid_anchors
from .detector import TwoBranchDetector, image_to_tensor

THERMAL_WEIGHT_DEFAULT = 5.0
LEVEL_SCALES_DEFAULT = (1.0, 1.0, 0.5, 0.2, 0.2)

INFER_MODES = ("rgb_only", "thermal_only", "fused")


@dataclass(frozen=True)
class FusionWeights:
    """Thermal weight plus per-level scales, index 1 = largest map.

    The scales taper off toward coarser levels; with the defaults every
    product thermal_weight * scale stays >= 1, i.e. background pixels
    weight thermal features at least as much as RGB ones.
    """

    thermal_weight: float = THERMAL_WEIGHT_DEFAULT
    level_scales: tuple[float, ...] = LEVEL_SCALES_DEFAULT


def fuse_level(
    f_rgb: torch.Tensor,
    f_thermal: torch.Tensor,
    bg_mask: torch.Tensor,
    thermal_weight: float,
    level_scale: float,
) -> torch.Tensor:
    """Weighted average on background pixels, exact RGB on foreground.

    bg_mask is BG_ONE (1 = background) at the level's spatial dims. For
    a background pixel the result is
    (rgb + thermal * w) / (1 + w) with w = thermal_weight * level_scale.
    """
    if f_rgb.shape != f_thermal.shape:
        raise ValueError(f"feature shapes differ: {f_rgb.shape} vs {f_thermal.shape}")
    if f_rgb.shape[-2:] != bg_mask.shape[-2:]:
        raise ValueError(f"mask dims {bg_mask.shape} do not match features {f_rgb.shape}")
    w = thermal_weight * level_scale
    mask = bg_mask.to(bool)
    while mask.dim() < f_rgb.dim():
        mask = mask.unsqueeze(-3)
    averaged = (f_rgb + f_thermal * w) / (1.0 + w)
    return torch.where(mask, averaged, f_rgb)


def fuse_pyramid(
    pyr_rgb: list[torch.Tensor],
    pyr_thermal: list[torch.Tensor],
    bg_masks: list[torch.Tensor],
    weights: FusionWeights = FusionWeights(),
) -> list[torch.Tensor]:
    """Level-wise fusion of two five-level pyramids."""
    if not (len(pyr_rgb) == len(pyr_thermal) == len(bg_masks) == len(weights.level_scales)):
        raise ValueError("pyramids, masks, and level scales must all have equal length")
    return [
        fuse_level(f_rgb, f_th, mask, weights.thermal_weight, scale)
        for f_rgb, f_th, mask, scale in zip(
            pyr_rgb, pyr_thermal, bg_masks, weights.level_scales
        )
    ]


def infer(
    detector: TwoBranchDetector,
    rgb: np.ndarray,
    thermal: np.ndarray | None,
    mode: str = "fused",
    weights: FusionWeights = FusionWeights(),
) -> tuple[np.ndarray, np.ndarray]:
    """Run one registered pair through the detector in the given mode.

    Modes: "rgb_only" and "thermal_only" feed a single branch's pyramid
    to the shared heads; "fused" blends background features per
    fuse_pyramid using a mask generated from the RGB image. The thermal
    image may be omitted in rgb_only mode. Returns (boxes (N, 4),
    scores (N,)).
    """
    if mode not in INFER_MODES:
        raise ValueError(f"unknown inference mode {mode!r}")
    if thermal is None:
        if mode != "rgb_only":
            raise ValueError(f"mode {mode!r} needs a thermal image")
    elif rgb.shape[:2] != thermal.shape[:2]:
        raise ValueError(
            f"pair is not registered: rgb {rgb.shape[:2]} vs thermal {thermal.shape[:2]}"
        )
    image_hw = rgb.shape[:2]
    was_training = detector.training
    detector.eval()
    try:
        with torch.no_grad():
            if mode == "rgb_only":
                pyramid = detector.rgb(image_to_tensor(rgb))
            elif mode == "thermal_only":
                pyramid = detector.thermal(image_to_tensor(thermal))
            else:
                pyr_rgb = detector.rgb(image_to_tensor(rgb))
                pyr_th = detector.thermal(image_to_tensor(thermal))
                level_dims = [tuple(f.shape[-2:]) for f in pyr_rgb]
                bg = mask_ops.pyramid_masks(rgb, level_dims, mask_ops.Polarity.BG_ONE)
                bg_masks = [torch.from_numpy(m) for m in bg]
                pyramid = fuse_pyramid(pyr_rgb, pyr_th, bg_masks, weights)
            cls_maps, reg_maps = detector.heads(pyramid)
            level_dims = [tuple(f.shape[-2:]) for f in pyramid]
            anchors = pyramid_anchors(
                level_dims, detector.config.anchor_ratios, detector.config.anchor_scale
            )
            return postprocess(cls_maps, reg_maps, anchors, image_hw, detector.config)
    finally:
        detector.train(was_training)
