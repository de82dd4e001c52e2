"""Foreground-masked L2 alignment between the two branches' pyramids.

This is the self-supervision signal: feature maps of regions visible in
both modalities are pulled together, standing in for the detection loss
that unlabeled data cannot provide.
"""
from __future__ import annotations

import torch

ALIGN_WEIGHTS_DEFAULT = (1.0, 1.0, 0.5, 0.05, 0.01)


def masked_l2(
    f_rgb: torch.Tensor,
    f_thermal: torch.Tensor,
    fg_mask: torch.Tensor,
    average_over: str = "masked",
) -> torch.Tensor:
    """Mean squared difference over foreground pixels and channels.

    fg_mask is an FG_ONE bool tensor of shape (H, W) or (B, H, W). An
    empty mask contributes zero loss rather than NaN; blank tiles occur
    in real flight data. With average_over="all" the sum is divided by
    the full element count instead of the masked count.
    """
    if f_rgb.shape != f_thermal.shape:
        raise ValueError(f"feature shapes differ: {f_rgb.shape} vs {f_thermal.shape}")
    if f_rgb.shape[-2:] != fg_mask.shape[-2:]:
        raise ValueError(f"mask dims {fg_mask.shape} do not match features {f_rgb.shape}")
    mask = fg_mask.to(f_rgb.dtype)
    while mask.dim() < f_rgb.dim():
        mask = mask.unsqueeze(-3)  # broadcast over the channel axis
    channels = f_rgb.shape[-3]
    if average_over == "masked":
        denom = mask.sum() * channels
    elif average_over == "all":
        denom = torch.as_tensor(float(f_rgb.numel()), dtype=f_rgb.dtype)
    else:
        raise ValueError(f"unknown average_over mode {average_over!r}")
    if denom == 0:
        return f_rgb.new_zeros(())
    return (((f_rgb - f_thermal) ** 2) * mask).sum() / denom


def pyramid_alignment_loss(
    pyr_rgb: list[torch.Tensor],
    pyr_thermal: list[torch.Tensor],
    fg_masks: list[torch.Tensor],
    weights: tuple[float, ...] = ALIGN_WEIGHTS_DEFAULT,
    average_over: str = "masked",
) -> tuple[torch.Tensor, list[float]]:
    """Weighted sum of per-level masked L2 losses, index 1 = largest map.

    Larger maps get higher weight. Returns the scalar loss and the
    unweighted per-level values for logging.
    """
    if not (len(pyr_rgb) == len(pyr_thermal) == len(fg_masks) == len(weights)):
        raise ValueError("pyramids, masks, and weights must all have equal length")
    total = None
    per_level: list[float] = []
    for f_rgb, f_th, mask, weight in zip(pyr_rgb, pyr_thermal, fg_masks, weights):
        level = masked_l2(f_rgb, f_th, mask, average_over)
        per_level.append(float(level.detach()))
        term = weight * level
        total = term if total is None else total + term
    return total, per_level
