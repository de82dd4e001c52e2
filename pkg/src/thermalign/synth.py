"""Deterministic synthetic RGB-thermal scene generator.

Scenes contain textured bright crown discs on a mid-gray ground. A
configurable fraction of crowns is "shadowed": rendered near-black in
RGB (inside a larger dark shadow patch, below the background marker
threshold) but warm in thermal, mirroring short trees hidden under
taller neighbors. Annotations flag those crowns as difficult. Extra
empty shadow patches keep background seeds present in every scene.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import save_image, write_annotations, write_manifest

logger = logging.getLogger(__name__)

# Rendering levels chosen with margin around the 20/255 and 100/255
# marker thresholds, so they survive 8-bit quantization and noise.
# Per-scene illumination and ground-temperature draws emulate flights at
# different times of day.
SHADOW_LEVEL = 0.045
SHADOW_CLAMP = 0.070
GROUND_LEVEL_RANGE = (0.13, 0.24)
CROWN_PEAK_RANGE = (0.66, 0.92)
CROWN_TINT = (0.82, 1.0, 0.62)  # slight green cast on RGB crowns
SHADOW_PATCH_SCALE = 1.9        # shadow radius relative to its crown

# Thermal renders crowns with opposite polarity and low contrast:
# transpiring canopies stay cooler than sun-heated ground, and thermal
# sensors lack the fine detail of RGB. Crown texture is correlated
# across modalities (canopy structure shows in both), and shadowed
# ground reads distinctly cooler.
THERMAL_GROUND_RANGE = (0.24, 0.38)
THERMAL_CROWN_CENTER_RANGE = (0.07, 0.14)
THERMAL_CROWN_EDGE_LIFT = 0.08
THERMAL_CROWN_SPECKLE = 0.06
THERMAL_SHADOW_COOLING = 0.13
THERMAL_BLUR_SIGMA = 0.8

SPLIT_SEED_OFFSETS = {"train": 0, "val": 10_000_000, "test": 20_000_000}


@dataclass(frozen=True)
class SceneSpec:
    height: int = 256
    width: int = 256
    crown_count: tuple[int, int] = (8, 16)
    crown_radius: tuple[float, float] = (8.0, 20.0)
    shadow_fraction: float = 0.3
    noise: float = 0.015
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height % 32 or self.width % 32:
            raise ValueError("scene dims must be divisible by 32")
        if not 0.0 <= self.shadow_fraction <= 1.0:
            raise ValueError("shadow_fraction must lie in [0, 1]")


@dataclass
class Scene:
    rgb: np.ndarray          # (H, W, 3) float32 in [0, 1]
    thermal: np.ndarray      # (H, W) float32 in [0, 1]
    boxes: np.ndarray        # (N, 4) xyxy
    difficult: np.ndarray    # (N,) bool
    gt_bg_mask: np.ndarray   # (H, W) bool, True = background


def _disc(h: int, w: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _radial(h: int, w: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[:h, :w]
    d2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / (r * r)
    return np.clip(1.0 - 0.45 * d2, 0.0, 1.0)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int = 8) -> np.ndarray:
    # Low-frequency field: coarse grid of gaussians blown up bilinearly.
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.clip(ys.astype(int), 0, cells - 2)
    x0 = np.clip(xs.astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx


def _place_crowns(
    rng: np.random.Generator, spec: SceneSpec
) -> tuple[list[tuple[float, float, float]], np.ndarray]:
    """Place crowns with separation rules and pick which are shadowed.

    A shadowed crown's dark patch (SHADOW_PATCH_SCALE times its radius)
    must stay clear of every visible crown's core so visible crowns
    always keep pixels above the FG marker threshold. Crowns that cannot
    be placed are dropped with a warning.
    """
    h, w = spec.height, spec.width
    count = int(rng.integers(spec.crown_count[0], spec.crown_count[1] + 1))
    n_shadow = int(round(spec.shadow_fraction * count))
    placed: list[tuple[float, float, float]] = []
    flags: list[bool] = []
    dropped = 0
    for idx in range(count):
        dark = idx < n_shadow
        ok = False
        for _attempt in range(60):
            r = float(rng.uniform(*spec.crown_radius))
            margin = r + 2.0
            if 2 * margin >= min(h, w):
                continue
            cx = float(rng.uniform(margin, w - margin))
            cy = float(rng.uniform(margin, h - margin))
            if _separated(cx, cy, r, dark, placed, flags):
                placed.append((cx, cy, r))
                flags.append(dark)
                ok = True
                break
        if not ok:
            dropped += 1
    if dropped:
        logger.warning("dropped %d crowns that could not be placed without overlap", dropped)
    flags_arr = np.asarray(flags, dtype=bool)
    # Shuffle so shadowed crowns are not spatially biased by placement order.
    order = rng.permutation(len(placed))
    return [placed[i] for i in order], flags_arr[order] if len(placed) else flags_arr


def _separated(
    cx: float, cy: float, r: float, dark: bool,
    placed: list[tuple[float, float, float]], flags: list[bool],
) -> bool:
    for (px, py, pr), pdark in zip(placed, flags):
        d2 = (cx - px) ** 2 + (cy - py) ** 2
        if dark and not pdark:
            need = SHADOW_PATCH_SCALE * r + 0.6 * pr
        elif pdark and not dark:
            need = SHADOW_PATCH_SCALE * pr + 0.6 * r
        else:
            need = 0.9 * (r + pr)
        if d2 <= need * need:
            return False
    return True


def generate_scene(spec: SceneSpec) -> Scene:
    """Render one registered RGB-thermal pair with annotations.

    Identical specs (including seed) produce byte-identical arrays.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width

    crowns, shadowed = _place_crowns(rng, spec)

    # Ground: mid-gray with a low-frequency brightness field; the base
    # level varies per scene with illumination.
    ground_level = float(rng.uniform(*GROUND_LEVEL_RANGE))
    luma = ground_level + 0.035 * _smooth_noise(rng, h, w)
    shadow_region = np.zeros((h, w), dtype=bool)

    # Empty shadow patches provide dark BG seeds even in shadow-free
    # scenes; they must stay clear of visible crowns.
    for _ in range(int(rng.integers(2, 5))):
        for _attempt in range(30):
            r = float(rng.uniform(0.06, 0.14)) * min(h, w)
            cx, cy = float(rng.uniform(0, w)), float(rng.uniform(0, h))
            clear = all(
                dark or (cx - px) ** 2 + (cy - py) ** 2 > (r + pr + 1.0) ** 2
                for (px, py, pr), dark in zip(crowns, shadowed)
            )
            if clear:
                shadow_region |= _disc(h, w, cx, cy, r)
                break

    # Shadow patches around shadowed crowns (cover the whole GT box).
    for (cx, cy, r), dark in zip(crowns, shadowed):
        if dark:
            shadow_region |= _disc(h, w, cx, cy, SHADOW_PATCH_SCALE * r)

    thermal_ground = float(rng.uniform(*THERMAL_GROUND_RANGE))
    thermal = thermal_ground + 0.04 * _smooth_noise(rng, h, w)
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    visible_fg = np.zeros((h, w), dtype=bool)

    yy, xx = np.ogrid[:h, :w]
    for (cx, cy, r), dark in zip(crowns, shadowed):
        disc = _disc(h, w, cx, cy, r)
        profile = _radial(h, w, cx, cy, r)
        speckle = np.clip(1.0 + 0.10 * rng.standard_normal((h, w)), 0.82, 1.18)
        peak = float(rng.uniform(*CROWN_PEAK_RANGE))
        if not dark:
            crown_luma = np.clip(peak * profile * speckle, 0.30, 0.98)
            luma = np.where(disc, crown_luma, luma)
            visible_fg |= disc
        # Thermal sees every crown as a cool disc, coldest at the center,
        # regardless of RGB shadowing; its faint texture tracks the RGB
        # speckle because both image the same canopy structure.
        center = float(rng.uniform(*THERMAL_CROWN_CENTER_RANGE))
        d2 = np.clip(((xx - cx) ** 2 + (yy - cy) ** 2) / (r * r), 0.0, 1.0)
        crown_thermal = center + THERMAL_CROWN_EDGE_LIFT * d2 + THERMAL_CROWN_SPECKLE * (speckle - 1.0)
        thermal = np.where(disc, crown_thermal, thermal)

    for c, tint in enumerate(CROWN_TINT):
        rgb[:, :, c] = luma * np.where(visible_fg, tint, 1.0)

    thermal = np.where(shadow_region, thermal - THERMAL_SHADOW_COOLING, thermal)
    thermal = gaussian_filter(thermal, sigma=THERMAL_BLUR_SIGMA, mode="nearest")
    if spec.noise > 0:
        rgb += rng.normal(0.0, spec.noise, size=rgb.shape)
        thermal += rng.normal(0.0, spec.noise, size=thermal.shape)

    # Shadows go on after noise so their darkness is guaranteed.
    shade = SHADOW_LEVEL * (1.0 + 0.25 * _smooth_noise(rng, h, w))
    shade = np.clip(shade, 0.0, SHADOW_CLAMP)
    rgb = np.where(shadow_region[:, :, None], shade[:, :, None], rgb)

    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    thermal = np.clip(thermal, 0.0, 1.0).astype(np.float32)

    boxes = np.array(
        [[cx - r, cy - r, cx + r, cy + r] for cx, cy, r in crowns], dtype=np.float32
    ).reshape(-1, 4)
    return Scene(
        rgb=rgb,
        thermal=thermal,
        boxes=boxes,
        difficult=shadowed,
        gt_bg_mask=~visible_fg,
    )


def generate_dataset(
    spec: SceneSpec,
    counts: dict[str, int],
    out_dir: str | Path,
    force: bool = False,
) -> dict[str, Path]:
    """Write image pairs, annotation CSVs, and a manifest per split.

    Split seeds are disjoint, so no image repeats across splits. Returns
    the manifest path for each split.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"output directory {out_dir} is not empty (use force)")
    manifests: dict[str, Path] = {}
    for split, count in counts.items():
        if split not in SPLIT_SEED_OFFSETS:
            raise ValueError(f"unknown split name {split!r}")
        split_dir = out_dir / split
        rows = []
        for i in range(count):
            scene_seed = spec.seed + SPLIT_SEED_OFFSETS[split] + i
            scene = generate_scene(replace(spec, seed=scene_seed))
            image_id = f"{split}_{i:05d}"
            save_image(split_dir / "rgb" / f"{image_id}.png", scene.rgb)
            save_image(split_dir / "thermal" / f"{image_id}.png", scene.thermal)
            write_annotations(
                split_dir / "annotations" / f"{image_id}.csv",
                image_id, scene.boxes, scene.difficult,
            )
            rows.append(
                {
                    "rgb_path": f"rgb/{image_id}.png",
                    "thermal_path": f"thermal/{image_id}.png",
                    "annotations_path": f"annotations/{image_id}.csv",
                }
            )
        manifest = split_dir / "manifest.csv"
        write_manifest(manifest, rows)
        manifests[split] = manifest
        logger.info("wrote %d %s scenes under %s", count, split, split_dir)
    return manifests


def file_checksum(path: str | Path) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()
