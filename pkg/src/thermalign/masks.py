"""Binary FG/BG mask generation from RGB images.

Pipeline: grayscale conversion, intensity thresholding into seed markers
(dark pixels are background, bright pixels are foreground), a Sobel
gradient elevation map, marker-driven priority flooding to label the
remaining pixels, morphological cleanup, and nearest-neighbor resizing
down to feature-map resolutions.

The flood uses a priority queue keyed by (elevation, enqueue time), so
ties on flat plateaus are settled in favor of the closer marker. When
several pixels are enqueued in the same pass, row-major order decides.
"""
from __future__ import annotations

import enum
import heapq

import numpy as np
from scipy import ndimage as ndi

# Intensity thresholds for seed markers, on grayscale values in [0, 1].
BG_MARKER_THRESHOLD = 20.0 / 255.0
FG_MARKER_THRESHOLD = 100.0 / 255.0

UNMARKED, BG_MARKER, FG_MARKER = 0, 1, 2

# ITU-R BT.601 luminance weights.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# 4-connected (cross-shaped) 3x3 structuring element.
CROSS_SE = ndi.generate_binary_structure(2, 1)

# Neighbor scan order for the flood: up, left, right, down.
_NEIGHBOR_OFFSETS = ((-1, 0), (0, -1), (0, 1), (1, 0))


class Polarity(enum.Enum):
    """Which side of the mask carries the 1 bits."""

    FG_ONE = "fg_one"
    BG_ONE = "bg_one"


def invert(mask: np.ndarray) -> np.ndarray:
    """Flip every bit, converting FG_ONE <-> BG_ONE."""
    return ~np.asarray(mask, dtype=bool)


def rgb_to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Convert an (H, W, 3) image with values in [0, 1] to grayscale."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB input, got shape {rgb.shape}")
    return rgb.astype(np.float64) @ _LUMA


def intensity_markers(gray: np.ndarray) -> np.ndarray:
    """Label confident pixels: dark ones as BG seeds, bright ones as FG seeds.

    Pixels with intensity < 20/255 get BG_MARKER, those > 100/255 get
    FG_MARKER, everything in between stays UNMARKED for the flood.
    """
    gray = np.asarray(gray)
    markers = np.zeros(gray.shape, dtype=np.uint8)
    markers[gray < BG_MARKER_THRESHOLD] = BG_MARKER
    markers[gray > FG_MARKER_THRESHOLD] = FG_MARKER
    return markers


def sobel_elevation(gray: np.ndarray) -> np.ndarray:
    """Gradient-magnitude elevation map from 3x3 Sobel responses.

    Borders are handled by edge replication, so a constant image maps to
    an all-zero elevation.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"need a 2-D image of at least 3x3, got shape {gray.shape}")
    gy = ndi.sobel(gray, axis=0, mode="nearest")
    gx = ndi.sobel(gray, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def watershed_flood(elevation: np.ndarray, markers: np.ndarray) -> np.ndarray:
    """Flood unmarked pixels from the FG/BG seeds; return an FG_ONE mask.

    Seeded pixels keep their labels. Each marked pixel's unmarked
    4-neighbors enter a priority queue ordered by (elevation, enqueue
    time); the popped pixel takes the label of the pixel that enqueued
    it, then enqueues its own unmarked neighbors. Every pixel is visited
    exactly once, so the result is total.

    Degenerate marker maps short-circuit: no FG seeds gives an all-BG
    mask, no BG seeds an all-FG mask.
    """
    elevation = np.asarray(elevation, dtype=np.float64)
    markers = np.asarray(markers)
    if elevation.shape != markers.shape:
        raise ValueError("elevation and marker shapes differ")

    if not (markers == FG_MARKER).any():
        return np.zeros(markers.shape, dtype=bool)
    if not (markers == BG_MARKER).any():
        return np.ones(markers.shape, dtype=bool)

    h, w = markers.shape
    labels = markers.astype(np.uint8).copy()
    queued = labels != UNMARKED
    heap: list[tuple[float, int, int, int, int]] = []
    tick = 0

    def push_neighbors(i: int, j: int, label: int) -> None:
        nonlocal tick
        for di, dj in _NEIGHBOR_OFFSETS:
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and not queued[ni, nj]:
                queued[ni, nj] = True
                heapq.heappush(heap, (elevation[ni, nj], tick, ni, nj, label))
                tick += 1

    for i in range(h):
        for j in range(w):
            if labels[i, j] != UNMARKED:
                push_neighbors(i, j, labels[i, j])

    while heap:
        _, _, i, j, label = heapq.heappop(heap)
        labels[i, j] = label
        push_neighbors(i, j, label)

    return labels == FG_MARKER


def binary_erosion(mask: np.ndarray) -> np.ndarray:
    # Outside pixels count as FG so border regions are not eaten.
    return ndi.binary_erosion(mask, structure=CROSS_SE, border_value=1)


def binary_dilation(mask: np.ndarray) -> np.ndarray:
    return ndi.binary_dilation(mask, structure=CROSS_SE, border_value=0)


def binary_opening(mask: np.ndarray) -> np.ndarray:
    return binary_dilation(binary_erosion(mask))


def binary_closing(mask: np.ndarray) -> np.ndarray:
    return binary_erosion(binary_dilation(mask))


def refine_mask(fg_mask: np.ndarray) -> np.ndarray:
    """Clean a raw FG_ONE mask: opening, closing, then one dilation.

    Opening drops stray FG pixels, closing fills stray BG holes, and the
    final dilation pads FG boundaries by one 4-connected ring.
    """
    mask = np.asarray(fg_mask, dtype=bool)
    return binary_dilation(binary_closing(binary_opening(mask)))


def resize_mask(
    mask: np.ndarray,
    target_hw: tuple[int, int],
    polarity: Polarity = Polarity.FG_ONE,
) -> np.ndarray:
    """Nearest-neighbor downsample of an FG_ONE mask, center-anchored.

    Output pixel (i, j) samples the source at floor((i + 0.5) * H / h).
    Upsampling is rejected: feature-map levels never exceed image size.
    The requested polarity is applied after resizing.
    """
    mask = np.asarray(mask, dtype=bool)
    th, tw = target_hw
    sh, sw = mask.shape
    if th > sh or tw > sw:
        raise ValueError(f"cannot upsample mask {mask.shape} to {target_hw}")
    if th <= 0 or tw <= 0:
        raise ValueError(f"invalid target dims {target_hw}")
    rows = np.minimum((((np.arange(th) + 0.5) * sh / th)).astype(np.int64), sh - 1)
    cols = np.minimum((((np.arange(tw) + 0.5) * sw / tw)).astype(np.int64), sw - 1)
    out = mask[np.ix_(rows, cols)]
    if polarity is Polarity.BG_ONE:
        out = invert(out)
    return out


def foreground_mask(rgb: np.ndarray) -> np.ndarray:
    """Full-resolution refined FG_ONE mask for an RGB image in [0, 1]."""
    gray = rgb_to_grayscale(rgb)
    markers = intensity_markers(gray)
    # A fully decided marker map needs no elevation/flood step.
    if not (markers == UNMARKED).any():
        flooded = markers == FG_MARKER
    else:
        flooded = watershed_flood(sobel_elevation(gray), markers)
    return refine_mask(flooded)


def pyramid_masks(
    rgb: np.ndarray,
    level_dims: list[tuple[int, int]],
    polarity: Polarity = Polarity.FG_ONE,
) -> list[np.ndarray]:
    """Run the full mask chain and resize to each feature-pyramid level."""
    full = foreground_mask(rgb)
    return [resize_mask(full, hw, polarity) for hw in level_dims]
