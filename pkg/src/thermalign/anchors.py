"""Anchor geometry, box coding, NMS, and detection postprocessing."""
from __future__ import annotations

import numpy as np
import torch

from .detector import ModelConfig, PYRAMID_STRIDES


def anchor_grid(
    level_hw: tuple[int, int],
    stride: int,
    ratios: tuple[float, ...] = (0.7, 1.0, 1.4),
    scale: float = 4.0,
) -> torch.Tensor:
    """Anchors for one level as an (H*W*A, 4) xyxy tensor.

    One base size per level (stride * scale) with area-preserving aspect
    ratios; ratio is height/width. Anchor order matches the head output
    layout: rows vary slowest, then columns, then ratios.
    """
    h, w = level_hw
    base = stride * scale
    sizes = [(base * np.sqrt(r), base / np.sqrt(r)) for r in ratios]  # (ah, aw)
    cy = (np.arange(h, dtype=np.float32) + 0.5) * stride
    cx = (np.arange(w, dtype=np.float32) + 0.5) * stride
    out = np.empty((h, w, len(ratios), 4), dtype=np.float32)
    for k, (ah, aw) in enumerate(sizes):
        out[:, :, k, 0] = cx[None, :] - aw / 2
        out[:, :, k, 1] = cy[:, None] - ah / 2
        out[:, :, k, 2] = cx[None, :] + aw / 2
        out[:, :, k, 3] = cy[:, None] + ah / 2
    return torch.from_numpy(out.reshape(-1, 4))


def pyramid_anchors(
    level_dims: list[tuple[int, int]],
    ratios: tuple[float, ...],
    scale: float,
) -> list[torch.Tensor]:
    return [
        anchor_grid(hw, stride, ratios, scale)
        for hw, stride in zip(level_dims, PYRAMID_STRIDES)
    ]


def encode_boxes(gt: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Regression targets (dx, dy, dw, dh) mapping anchors onto GT boxes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    gw = (gt[:, 2] - gt[:, 0]).clamp(min=1e-6)
    gh = (gt[:, 3] - gt[:, 1]).clamp(min=1e-6)
    gx = gt[:, 0] + gw / 2
    gy = gt[:, 1] + gh / 2
    return torch.stack(
        [(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1
    )


def decode_boxes(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Inverse of encode_boxes, with the usual exp clamp for stability."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = torch.exp(deltas[:, 2].clamp(max=4.0)) * aw
    h = torch.exp(deltas[:, 3].clamp(max=4.0)) * ah
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_boxes(boxes: torch.Tensor, image_hw: tuple[int, int]) -> torch.Tensor:
    h, w = image_hw
    return torch.stack(
        [
            boxes[:, 0].clamp(0, w),
            boxes[:, 1].clamp(0, h),
            boxes[:, 2].clamp(0, w),
            boxes[:, 3].clamp(0, h),
        ],
        dim=1,
    )


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; returns kept indices in descending score order."""
    order = torch.argsort(scores, descending=True, stable=True)
    keep = []
    areas = (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)
    while order.numel() > 0:
        i = order[0].item()
        keep.append(i)
        if order.numel() == 1:
            break
        rest = order[1:]
        x1 = torch.maximum(boxes[i, 0], boxes[rest, 0])
        y1 = torch.maximum(boxes[i, 1], boxes[rest, 1])
        x2 = torch.minimum(boxes[i, 2], boxes[rest, 2])
        y2 = torch.minimum(boxes[i, 3], boxes[rest, 3])
        inter = (x2 - x1).clamp(min=0) * (y2 - y1).clamp(min=0)
        iou = inter / (areas[i] + areas[rest] - inter).clamp(min=1e-12)
        order = rest[iou <= iou_threshold]
    return torch.as_tensor(keep, dtype=torch.long)


def flatten_level(cls_map: torch.Tensor, reg_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(A, H, W) logits and (4A, H, W) deltas -> (H*W*A,) and (H*W*A, 4).

    Flattening order (rows, columns, ratios) mirrors anchor_grid, so row
    i of the result corresponds to anchor i.
    """
    a = cls_map.shape[0]
    logits = cls_map.permute(1, 2, 0).reshape(-1)
    deltas = reg_map.reshape(a, 4, *reg_map.shape[-2:]).permute(2, 3, 0, 1).reshape(-1, 4)
    return logits, deltas


def postprocess(
    cls_maps: list[torch.Tensor],
    reg_maps: list[torch.Tensor],
    anchors: list[torch.Tensor],
    image_hw: tuple[int, int],
    config: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw head maps for one image -> (boxes (N, 4), scores (N,)) arrays.

    Decodes deltas, clips to the image, drops scores below the score
    threshold, runs greedy NMS, and keeps at most the configured number
    of detections sorted by descending score.
    """
    all_boxes, all_scores = [], []
    for cls_map, reg_map, level_anchors in zip(cls_maps, reg_maps, anchors):
        if cls_map.dim() == 4:
            cls_map, reg_map = cls_map[0], reg_map[0]
        logits, deltas = flatten_level(cls_map, reg_map)
        scores = torch.sigmoid(logits)
        keep = scores >= config.score_threshold
        if keep.any():
            boxes = decode_boxes(deltas[keep], level_anchors[keep])
            all_boxes.append(clip_boxes(boxes, image_hw))
            all_scores.append(scores[keep])
    if not all_boxes:
        return np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.float32)

    boxes = torch.cat(all_boxes)
    scores = torch.cat(all_scores)
    valid = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
    boxes, scores = boxes[valid], scores[valid]
    if boxes.numel() == 0:
        return np.zeros((0, 4), dtype=np.float32), np.zeros(0, dtype=np.float32)

    kept = nms(boxes, scores, config.nms_threshold)[: config.max_detections]
    return boxes[kept].numpy(), scores[kept].numpy()
