"""Detection metrics: IoU matching, AP50, AR100, shadowed-tree rate.

Conventions fixed here: predictions are pooled over images and sorted by
descending score (stable on ties), matching is greedy one-to-one against
the unmatched ground-truth box with highest IoU at or above threshold,
AP uses all-point interpolation of the precision-recall curve, and AR
averages recall over IoU thresholds 0.50:0.05:0.95 with at most 100
detections per image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import masks as mask_ops
from .data import load_image, read_annotations, read_manifest
from .fusion import FusionWeights, infer

AR_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MAX_DETECTIONS_PER_IMAGE = 100
BG_COVERAGE_THRESHOLD = 0.85


def box_iou(a, b) -> float:
    """Intersection over union of two xyxy boxes; zero-area boxes rejected."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValueError("degenerate (zero-area) box")
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            out[i, j] = box_iou(p, g)
    return out


def _score_order(scores: np.ndarray) -> np.ndarray:
    # Stable descending sort: ties keep input order.
    return np.argsort(-np.asarray(scores), kind="stable")


def match_detections(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
) -> np.ndarray:
    """Greedy one-to-one matching; returns per-prediction GT index or -1.

    Predictions are visited in descending score order; each takes the
    still-unmatched GT with the highest IoU >= threshold (first such GT
    in input order on exact ties).
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    matched = np.full(len(pred_boxes), -1, dtype=np.int64)
    if len(pred_boxes) == 0 or len(gt_boxes) == 0:
        return matched
    ious = iou_matrix(pred_boxes, gt_boxes)
    gt_taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in _score_order(pred_scores):
        best_j, best_iou = -1, 0.0
        for j in range(len(gt_boxes)):
            if gt_taken[j]:
                continue
            if ious[i, j] >= iou_threshold and ious[i, j] > best_iou:
                best_j, best_iou = j, ious[i, j]
        if best_j >= 0:
            matched[i] = best_j
            gt_taken[best_j] = True
    return matched


def ap50(
    preds_by_image: list[tuple[np.ndarray, np.ndarray]],
    gts_by_image: list[np.ndarray],
    iou_threshold: float = 0.5,
) -> float:
    """Average precision at the given IoU over pooled predictions, in %.

    Returns NaN when there are no ground-truth boxes (undefined).
    """
    total_gt = sum(len(g) for g in gts_by_image)
    if total_gt == 0:
        return math.nan
    # Pool predictions with their image index, then sort by score.
    rows = []
    for img, (boxes, scores) in enumerate(preds_by_image):
        for k in range(len(scores)):
            rows.append((img, k, float(scores[k])))
    if not rows:
        return 0.0
    order = _score_order(np.array([r[2] for r in rows]))
    gt_taken = [np.zeros(len(g), dtype=bool) for g in gts_by_image]
    tp = np.zeros(len(rows))
    for rank, idx in enumerate(order):
        img, k, _ = rows[idx]
        boxes, _ = preds_by_image[img]
        gts = gts_by_image[img]
        best_j, best_iou = -1, iou_threshold
        for j in range(len(gts)):
            if gt_taken[img][j]:
                continue
            iou = box_iou(boxes[k], gts[j])
            if iou >= iou_threshold and (best_j == -1 or iou > best_iou):
                best_j, best_iou = j, iou
        if best_j >= 0:
            gt_taken[img][best_j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / (np.arange(len(rows)) + 1)
    recall = cum_tp / total_gt
    # All-point interpolation: envelope of precision from the right.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return 100.0 * ap


def ar100(
    preds_by_image: list[tuple[np.ndarray, np.ndarray]],
    gts_by_image: list[np.ndarray],
    max_detections: int = MAX_DETECTIONS_PER_IMAGE,
) -> float:
    """Average recall over IoU thresholds 0.50:0.05:0.95, in %.

    At most max_detections highest-score predictions count per image.
    Returns NaN when there are no ground-truth boxes.
    """
    total_gt = sum(len(g) for g in gts_by_image)
    if total_gt == 0:
        return math.nan
    capped = []
    for boxes, scores in preds_by_image:
        order = _score_order(scores)[:max_detections]
        capped.append((np.asarray(boxes).reshape(-1, 4)[order], np.asarray(scores)[order]))
    recalls = []
    for thr in AR_IOU_THRESHOLDS:
        matched = 0
        for (boxes, scores), gts in zip(capped, gts_by_image):
            m = match_detections(boxes, scores, gts, thr)
            matched += int((m >= 0).sum())
        recalls.append(matched / total_gt)
    return 100.0 * float(np.mean(recalls))


def bg_coverage(box: np.ndarray, bg_mask: np.ndarray) -> float:
    """Fraction of a box's pixel footprint covered by background pixels."""
    h, w = bg_mask.shape
    x1 = int(np.clip(np.floor(box[0]), 0, w - 1))
    y1 = int(np.clip(np.floor(box[1]), 0, h - 1))
    x2 = int(np.clip(np.ceil(box[2]), x1 + 1, w))
    y2 = int(np.clip(np.ceil(box[3]), y1 + 1, h))
    window = bg_mask[y1:y2, x1:x2]
    return float(window.mean()) if window.size else 0.0


def shadowed_detection_rate(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    gt_boxes: np.ndarray,
    difficult: np.ndarray,
    bg_mask: np.ndarray,
    iou_threshold: float = 0.5,
    coverage_threshold: float = BG_COVERAGE_THRESHOLD,
    coverage_of: str = "prediction",
) -> tuple[int, int]:
    """(hits, difficult-count) for one image.

    A difficult GT box counts as detected when its matched prediction
    (greedy matching at the IoU threshold over all GT boxes) has at
    least coverage_threshold of its area over background pixels in the
    BG_ONE mask. coverage_of selects whether the coverage is measured on
    the prediction box (default) or on the GT box.
    """
    difficult = np.asarray(difficult, dtype=bool)
    total = int(difficult.sum())
    if total == 0:
        return 0, 0
    matched = match_detections(pred_boxes, pred_scores, gt_boxes, iou_threshold)
    hits = 0
    pred_boxes = np.asarray(pred_boxes).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
    for pred_idx, gt_idx in enumerate(matched):
        if gt_idx >= 0 and difficult[gt_idx]:
            box = pred_boxes[pred_idx] if coverage_of == "prediction" else gt_boxes[gt_idx]
            if bg_coverage(box, bg_mask) >= coverage_threshold:
                hits += 1
    return hits, total


@dataclass
class EvalReport:
    mode: str
    ap50: float
    ar100: float
    shadowed_rate: float
    num_images: int
    num_gt: int
    num_difficult: int
    per_image: list[dict] = field(default_factory=list)

    @property
    def ap50_defined(self) -> bool:
        return not math.isnan(self.ap50)

    @property
    def shadowed_rate_defined(self) -> bool:
        return not math.isnan(self.shadowed_rate)

    def summary_lines(self) -> list[str]:
        def fmt(v: float) -> str:
            return "undefined" if math.isnan(v) else f"{v:.2f}"

        return [
            f"mode           : {self.mode}",
            f"images         : {self.num_images}",
            f"gt boxes       : {self.num_gt} ({self.num_difficult} difficult)",
            f"AP50 (%)       : {fmt(self.ap50)}",
            f"AR100 (%)      : {fmt(self.ar100)}",
            f"shadowed (%)   : {fmt(self.shadowed_rate)}",
        ]


def evaluate(
    detector,
    manifest_path: str | Path,
    mode: str = "fused",
    weights: FusionWeights = FusionWeights(),
    coverage_of: str = "prediction",
) -> EvalReport:
    """Run inference over an annotated manifest and compute all metrics."""
    records = read_manifest(manifest_path)
    preds_by_image: list[tuple[np.ndarray, np.ndarray]] = []
    gts_by_image: list[np.ndarray] = []
    per_image: list[dict] = []
    shadow_hits = 0
    shadow_total = 0
    num_difficult = 0
    for rec in records:
        if rec.annotations_path is None:
            raise ValueError(f"manifest row {rec.pair_id} carries no annotation path")
        rgb = load_image(rec.rgb_path)
        thermal = load_image(rec.thermal_path)
        gt_boxes, difficult = read_annotations(rec.annotations_path)
        boxes, scores = infer(detector, rgb, thermal, mode=mode, weights=weights)
        preds_by_image.append((boxes, scores))
        gts_by_image.append(gt_boxes)
        num_difficult += int(difficult.sum())
        bg_mask = mask_ops.invert(mask_ops.foreground_mask(rgb))
        hits, total = shadowed_detection_rate(
            boxes, scores, gt_boxes, difficult, bg_mask, coverage_of=coverage_of
        )
        shadow_hits += hits
        shadow_total += total
        matched = match_detections(boxes, scores, gt_boxes, 0.5)
        per_image.append(
            {
                "image_id": rec.pair_id,
                "detections": len(scores),
                "gt": len(gt_boxes),
                "difficult": int(difficult.sum()),
                "tp50": int((matched >= 0).sum()),
                "shadow_hits": hits,
            }
        )
    rate = 100.0 * shadow_hits / shadow_total if shadow_total else math.nan
    return EvalReport(
        mode=mode,
        ap50=ap50(preds_by_image, gts_by_image),
        ar100=ar100(preds_by_image, gts_by_image),
        shadowed_rate=rate,
        num_images=len(records),
        num_gt=sum(len(g) for g in gts_by_image),
        num_difficult=num_difficult,
        per_image=per_image,
    )
