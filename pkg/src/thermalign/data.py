"""File formats: pair manifests, annotation CSVs, image IO.

All metadata lives in plain CSV or key=value text; the only binary
artifacts are PNG images and checkpoint blobs. Paths inside a manifest
are resolved relative to the manifest's own directory.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_FIELDS = ("rgb_path", "thermal_path", "annotations_path")
ANNOTATION_FIELDS = ("image_id", "xmin", "ymin", "xmax", "ymax", "difficult")
DETECTION_FIELDS = ("image_id", "xmin", "ymin", "xmax", "ymax", "score")


@dataclass
class PairRecord:
    pair_id: str
    rgb_path: Path
    thermal_path: Path
    annotations_path: Path | None = None


def load_image(path: str | Path) -> np.ndarray:
    """8-bit PNG -> float32 array in [0, 1]; (H, W, 3) RGB or (H, W) gray."""
    with Image.open(path) as img:
        if img.mode not in ("RGB", "L"):
            img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Float array in [0, 1] -> 8-bit PNG (RGB if 3-channel, gray otherwise)."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "RGB" if data.ndim == 3 else "L"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode=mode).save(path)


def save_mask_image(path: str | Path, mask: np.ndarray) -> None:
    """Bool mask -> single-channel PNG with values {0, 255}."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, mode="L").save(path)


def read_manifest(path: str | Path) -> list[PairRecord]:
    """Read a pair manifest CSV: rgb_path, thermal_path[, annotations_path]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records: list[PairRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "rgb_path" not in reader.fieldnames:
            raise ValueError(f"manifest {path} must have a header with rgb_path,thermal_path")
        for idx, row in enumerate(reader):
            ann = row.get("annotations_path") or None
            rgb = (base / row["rgb_path"]).resolve()
            records.append(
                PairRecord(
                    pair_id=Path(row["rgb_path"]).stem or f"pair{idx:05d}",
                    rgb_path=rgb,
                    thermal_path=(base / row["thermal_path"]).resolve(),
                    annotations_path=(base / ann).resolve() if ann else None,
                )
            )
    return records


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in MANIFEST_FIELDS})


def read_annotations(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Annotation CSV -> (boxes (N, 4) float32, difficult (N,) bool)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    boxes, difficult = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            boxes.append([float(row[k]) for k in ("xmin", "ymin", "xmax", "ymax")])
            difficult.append(bool(int(row["difficult"])))
    return (
        np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
        np.asarray(difficult, dtype=bool),
    )


def write_annotations(path: str | Path, image_id: str, boxes: np.ndarray,
                      difficult: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_FIELDS)
        for box, diff in zip(np.asarray(boxes).reshape(-1, 4), difficult):
            writer.writerow([image_id, *(f"{v:.2f}" for v in box), int(diff)])


def write_detections(path: str | Path, per_image: list[tuple[str, np.ndarray, np.ndarray]]) -> None:
    """Write detection rows: image_id, xmin, ymin, xmax, ymax, score."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_FIELDS)
        for image_id, boxes, scores in per_image:
            for box, score in zip(np.asarray(boxes).reshape(-1, 4), scores):
                writer.writerow([image_id, *(f"{v:.2f}" for v in box), f"{score:.4f}"])


def write_keyvalue(path: str | Path, values: dict) -> None:
    """Flat key = value text file, one entry per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {value}" for key, value in values.items()]
    path.write_text("\n".join(lines) + "\n")


def read_keyvalue(path: str | Path) -> dict[str, str]:
    """Parse a flat key = value file; # starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line in {path}: {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
