"""Supervised bootstrap of the baseline RGB detector.

The adaptation phase assumes an RGB branch that already detects crowns,
playing the role of an off-the-shelf pretrained detector. This module
trains that baseline on annotated synthetic scenes with the usual
one-stage recipe (focal classification loss plus smooth-L1 box
regression on IoU-assigned anchors). Difficult (shadowed) boxes are
excluded by default so the baseline never learns them, mirroring an
RGB-only detector's blind spot.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .anchors import encode_boxes, flatten_level, pyramid_anchors
from .checkpoint import save_checkpoint
from .data import load_image, read_annotations, read_manifest
from .detector import TwoBranchDetector, image_to_tensor
from .training import TrainConfig, TrainingDiverged, lr_at_epoch

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    batch_size: int = 8
    iterations: int = 1500
    lr: float = 1e-3
    lr_decay: float = 0.9
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    include_difficult: bool = False
    seed: int = 0
    math_threads: int = 0


def _pairwise_iou(anchors: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    area_a = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    x1 = torch.maximum(anchors[:, None, 0], gt[None, :, 0])
    y1 = torch.maximum(anchors[:, None, 1], gt[None, :, 1])
    x2 = torch.minimum(anchors[:, None, 2], gt[None, :, 2])
    y2 = torch.minimum(anchors[:, None, 3], gt[None, :, 3])
    inter = (x2 - x1).clamp(min=0) * (y2 - y1).clamp(min=0)
    return inter / (area_a[:, None] + area_g[None, :] - inter).clamp(min=1e-12)


def assign_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor labels (1 pos, 0 neg, -1 ignore) and matched GT index.

    Anchors take their best-IoU ground truth; each ground truth also
    force-claims its single best anchor so small boxes are never left
    without a positive.
    """
    n = anchors.shape[0]
    labels = torch.zeros(n, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if gt_boxes.numel() == 0:
        return labels, matched
    ious = _pairwise_iou(anchors, gt_boxes)
    best_iou, best_gt = ious.max(dim=1)
    matched = best_gt
    labels[best_iou >= pos_iou] = 1
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    force = ious.argmax(dim=0)
    labels[force] = 1
    matched[force] = torch.arange(gt_boxes.shape[0])
    return labels, matched


def detection_focal_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Alpha-balanced focal loss over non-ignored anchors, per positive."""
    keep = labels >= 0
    logits = logits[keep]
    targets = labels[keep].to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    num_pos = (labels == 1).sum().clamp(min=1)
    return loss.sum() / num_pos


def pretrain(
    manifest_path: str | Path,
    config: PretrainConfig,
    out_dir: str | Path,
    model_config: TrainConfig | None = None,
) -> Path:
    """Train the RGB branch plus heads; returns the checkpoint directory.

    The saved bundle has the thermal branch synced to the trained RGB
    weights, ready for adaptation.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.math_threads > 0:
        torch.set_num_threads(config.math_threads)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    train_config = model_config or TrainConfig()
    detector = TwoBranchDetector(train_config.model_config())

    records = read_manifest(manifest_path)
    if not records:
        raise ValueError(f"manifest {manifest_path} lists no pairs")
    images, targets = [], []
    for rec in records:
        if rec.annotations_path is None:
            raise ValueError(f"pretraining needs annotations; none for {rec.pair_id}")
        boxes, difficult = read_annotations(rec.annotations_path)
        if not config.include_difficult:
            boxes = boxes[~difficult]
        images.append(rec.rgb_path)
        targets.append(torch.from_numpy(boxes))

    params = list(detector.rgb.parameters()) + list(detector.heads.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)

    probe = load_image(images[0])
    level_dims = detector.pyramid_dims(probe.shape[:2])
    anchors = pyramid_anchors(
        level_dims, detector.config.anchor_ratios, detector.config.anchor_scale
    )
    anchors_cat = torch.cat(anchors)

    epoch_len = max(1, len(records) // config.batch_size)
    order = rng.permutation(len(records))
    detector.train()
    log_path = out_dir / "pretrain_log.csv"
    with open(log_path, "w", newline="") as log_file:
        writer = csv.writer(log_file)
        writer.writerow(["iteration", "cls_loss", "reg_loss", "lr"])
        for iteration in range(config.iterations):
            epoch = iteration // epoch_len
            step = iteration % epoch_len
            if step == 0 and iteration > 0:
                order = rng.permutation(len(records))
            lr = lr_at_epoch(epoch, config.lr, config.lr_decay)
            for group in optimizer.param_groups:
                group["lr"] = lr
            indices = order[step * config.batch_size: (step + 1) * config.batch_size]
            if len(indices) == 0:
                indices = order[: config.batch_size]
            batch = torch.cat([image_to_tensor(load_image(images[i])) for i in indices])
            pyramid = detector.rgb(batch)
            cls_maps, reg_maps = detector.heads(pyramid)

            cls_loss = reg_loss = None
            for b, i in enumerate(indices):
                logits_levels, deltas_levels = [], []
                for cls_map, reg_map in zip(cls_maps, reg_maps):
                    logits, deltas = flatten_level(cls_map[b], reg_map[b])
                    logits_levels.append(logits)
                    deltas_levels.append(deltas)
                logits = torch.cat(logits_levels)
                deltas = torch.cat(deltas_levels)
                labels, matched = assign_anchors(
                    anchors_cat, targets[i], config.pos_iou, config.neg_iou
                )
                c = detection_focal_loss(
                    logits, labels, config.focal_alpha, config.focal_gamma
                )
                pos = labels == 1
                if pos.any():
                    enc = encode_boxes(targets[i][matched[pos]], anchors_cat[pos])
                    r = F.smooth_l1_loss(deltas[pos], enc, beta=0.1)
                else:
                    r = deltas.sum() * 0.0
                cls_loss = c if cls_loss is None else cls_loss + c
                reg_loss = r if reg_loss is None else reg_loss + r
            total = (cls_loss + reg_loss) / len(indices)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite pretraining loss: {float(total)}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            writer.writerow([
                iteration,
                f"{float(cls_loss.detach()) / len(indices):.6f}",
                f"{float(reg_loss.detach()) / len(indices):.6f}",
                f"{lr:.8f}",
            ])
            if (iteration + 1) % 100 == 0 or iteration == 0:
                log_file.flush()
                logger.info(
                    "pretrain iter %d/%d cls=%.4f reg=%.4f",
                    iteration + 1, config.iterations,
                    float(cls_loss.detach()) / len(indices), float(reg_loss.detach()) / len(indices),
                )

    detector.sync_thermal_from_rgb()
    detector.eval()
    return save_checkpoint(
        out_dir / "checkpoint_baseline",
        {"model": detector},
        train_config.to_dict(),
        config.iterations,
        phase="pretrained",
    )
