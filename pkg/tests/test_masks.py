import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from thermalign import masks
from thermalign.masks import (
    BG_MARKER,
    FG_MARKER,
    Polarity,
    UNMARKED,
    intensity_markers,
    invert,
    pyramid_masks,
    refine_mask,
    resize_mask,
    rgb_to_grayscale,
    sobel_elevation,
    watershed_flood,
)

from oracles import bruteforce_flood, sobel_magnitude_reference

bool_masks = hnp.arrays(
    dtype=bool,
    shape=st.tuples(st.integers(1, 12), st.integers(1, 12)),
)


# --- grayscale ---------------------------------------------------------

@pytest.mark.parametrize(
    "pixel,expected",
    [((1.0, 1.0, 1.0), 1.0), ((0.0, 0.0, 0.0), 0.0), ((0.5, 0.5, 0.5), 0.5)],
)
def test_grayscale_fixed_points(pixel, expected):
    rgb = np.full((2, 2, 3), pixel, dtype=np.float64)
    assert rgb_to_grayscale(rgb) == pytest.approx(expected)


def test_grayscale_weights():
    rgb = np.zeros((1, 1, 3))
    rgb[0, 0] = (1.0, 0.0, 0.0)
    assert rgb_to_grayscale(rgb)[0, 0] == pytest.approx(0.299)


def test_grayscale_rejects_non_rgb():
    with pytest.raises(ValueError):
        rgb_to_grayscale(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        rgb_to_grayscale(np.zeros((4, 4, 4)))


# --- markers -----------------------------------------------------------

@pytest.mark.parametrize(
    "value,label",
    [(0.05, BG_MARKER), (0.5, FG_MARKER), (0.2, UNMARKED)],
)
def test_marker_thresholds(value, label):
    assert intensity_markers(np.array([[value]]))[0, 0] == label


def test_marker_boundaries_stay_unmarked():
    gray = np.array([[20.0 / 255.0, 100.0 / 255.0]])
    assert (intensity_markers(gray) == UNMARKED).all()


@given(
    st.floats(0.0, 1.0, allow_nan=False),
    st.floats(0.0, 1.0, allow_nan=False),
)
def test_marker_monotone_in_intensity(a, b):
    lo, hi = min(a, b), max(a, b)
    m_lo = intensity_markers(np.array([[lo]]))[0, 0]
    m_hi = intensity_markers(np.array([[hi]]))[0, 0]
    # Raising intensity never turns an FG marker into a BG marker.
    if m_lo == FG_MARKER:
        assert m_hi == FG_MARKER
    if m_hi == BG_MARKER:
        assert m_lo == BG_MARKER


# --- sobel elevation ---------------------------------------------------

def test_sobel_constant_is_zero():
    assert (sobel_elevation(np.full((5, 7), 0.3)) == 0).all()


def test_sobel_vertical_step_edge():
    gray = np.zeros((5, 6))
    gray[:, 3:] = 1.0
    elev = sobel_elevation(gray)
    # Strongest response hugs the edge columns, none far away.
    assert elev[:, 2].min() > 0
    assert elev[:, 3].min() > 0
    assert (elev[:, 0] == 0).all()
    assert (elev[:, 5] == 0).all()


def test_sobel_matches_direct_convolution():
    rng = np.random.default_rng(7)
    gray = rng.random((5, 5))
    np.testing.assert_allclose(
        sobel_elevation(gray), sobel_magnitude_reference(gray), atol=1e-12
    )


def test_sobel_rejects_tiny_images():
    with pytest.raises(ValueError):
        sobel_elevation(np.zeros((2, 5)))


# --- watershed flood ---------------------------------------------------

def test_flood_fully_marked_is_identity():
    markers = np.array([[1, 2], [2, 1]], dtype=np.uint8)
    out = watershed_flood(np.zeros((2, 2)), markers)
    np.testing.assert_array_equal(out, markers == FG_MARKER)


def test_flood_hand_simulated_row():
    # Gray row (0.0, 0.2, 0.9, 0.2, 0.0) gives markers BG,.,FG,.,BG and
    # replicated-border Sobel elevation (0.8, 3.6, 0, 3.6, 0.8). Pixel 1
    # is enqueued first (from the BG seed at 0), pixel 3 from the FG
    # seed at 2, and both resolve at equal elevation by enqueue time.
    elevation = np.array([[0.8, 3.6, 0.0, 3.6, 0.8]])
    markers = np.array([[1, 0, 2, 0, 1]], dtype=np.uint8)
    out = watershed_flood(elevation, markers)
    np.testing.assert_array_equal(out, np.array([[0, 0, 1, 1, 0]], dtype=bool))


def test_flood_degenerate_markers():
    elev = np.zeros((3, 3))
    no_fg = np.full((3, 3), BG_MARKER, dtype=np.uint8)
    assert not watershed_flood(elev, no_fg).any()
    no_bg = np.zeros((3, 3), dtype=np.uint8)
    no_bg[1, 1] = FG_MARKER
    assert watershed_flood(elev, no_bg).all()


def test_flood_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        elevation = rng.random((8, 8))
        markers = rng.choice(
            [0, 1, 2], size=(8, 8), p=[0.7, 0.15, 0.15]
        ).astype(np.uint8)
        if not (markers == 1).any() or not (markers == 2).any():
            continue
        np.testing.assert_array_equal(
            watershed_flood(elevation, markers),
            bruteforce_flood(elevation, markers),
        )


def test_flood_plateau_ties_resolve_row_major():
    # Flat elevation, symmetric seeds: enqueue time decides ownership.
    elevation = np.zeros((1, 5))
    markers = np.array([[1, 0, 0, 0, 2]], dtype=np.uint8)
    out = watershed_flood(elevation, markers)
    np.testing.assert_array_equal(
        out, bruteforce_flood(elevation, markers)
    )


# --- morphology --------------------------------------------------------

def test_opening_removes_isolated_pixel():
    mask = np.zeros((7, 7), dtype=bool)
    mask[3, 3] = True
    assert not masks.binary_opening(mask).any()


def test_closing_fills_isolated_hole():
    mask = np.ones((7, 7), dtype=bool)
    mask[3, 3] = False
    assert masks.binary_closing(mask).all()


def test_refine_square_becomes_diamond():
    # A 3x3 solid square opened with the cross element reduces to the
    # 5-pixel cross (corners are not reachable by cross translates);
    # closing keeps it and the final dilation grows a radius-2 diamond.
    mask = np.zeros((9, 9), dtype=bool)
    mask[3:6, 3:6] = True
    expected = np.zeros((9, 9), dtype=bool)
    for di in range(-2, 3):
        for dj in range(-2, 3):
            if abs(di) + abs(dj) <= 2:
                expected[4 + di, 4 + dj] = True
    np.testing.assert_array_equal(refine_mask(mask), expected)


def test_dilation_adds_cross_ring():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    out = masks.binary_dilation(mask)
    assert out.sum() == 5
    assert out[2, 2] and out[1, 2] and out[3, 2] and out[2, 1] and out[2, 3]


@settings(max_examples=60)
@given(bool_masks)
def test_opening_closing_idempotent(mask):
    opened = masks.binary_opening(mask)
    np.testing.assert_array_equal(masks.binary_opening(opened), opened)
    closed = masks.binary_closing(mask)
    np.testing.assert_array_equal(masks.binary_closing(closed), closed)


@settings(max_examples=60)
@given(bool_masks)
def test_dilation_is_extensive(mask):
    assert (masks.binary_dilation(mask) | mask).sum() == masks.binary_dilation(mask).sum()


@settings(max_examples=60)
@given(bool_masks)
def test_polarity_involution(mask):
    np.testing.assert_array_equal(invert(invert(mask)), mask)


# --- resize ------------------------------------------------------------

def test_resize_all_ones_and_inversion():
    mask = np.ones((4, 4), dtype=bool)
    out = resize_mask(mask, (2, 2))
    assert out.shape == (2, 2) and out.all()
    assert not resize_mask(mask, (2, 2), Polarity.BG_ONE).any()


def test_resize_center_anchored_sampling():
    rng = np.random.default_rng(3)
    mask = rng.random((4, 4)) > 0.5
    out = resize_mask(mask, (2, 2))
    # Enumerate the documented anchor: src = floor((i + 0.5) * 4 / 2).
    for i in range(2):
        for j in range(2):
            si = int((i + 0.5) * 4 / 2)
            sj = int((j + 0.5) * 4 / 2)
            assert out[i, j] == mask[si, sj]


def test_resize_rejects_upsampling():
    with pytest.raises(ValueError):
        resize_mask(np.ones((4, 4), dtype=bool), (8, 4))


def test_resize_non_divisible_target():
    out = resize_mask(np.ones((10, 10), dtype=bool), (3, 3))
    assert out.shape == (3, 3)


# --- full chain --------------------------------------------------------

def test_chain_black_and_white_images():
    dims = [(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]
    black = np.zeros((64, 64, 3), dtype=np.float32)
    for level in pyramid_masks(black, dims, Polarity.FG_ONE):
        assert not level.any()
    white = np.ones((64, 64, 3), dtype=np.float32)
    for level in pyramid_masks(white, dims, Polarity.FG_ONE):
        assert level.any()
        assert level.all()


def test_chain_bright_blob_present_at_every_level():
    rgb = np.full((64, 64, 3), 0.2, dtype=np.float32)
    rgb[10:54, 10:54] = 0.9
    rgb[:6, :6] = 0.02  # dark corner provides BG seeds
    dims = [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
    levels = pyramid_masks(rgb, dims, Polarity.FG_ONE)
    for level, (h, w) in zip(levels, dims):
        found_fg = False
        for i in range(h):
            for j in range(w):
                si = int((i + 0.5) * 64 / h)
                sj = int((j + 0.5) * 64 / w)
                # Flood spill plus one dilation stays within a few pixels
                # of the blob; only assert in the unambiguous zones.
                if 14 <= si < 50 and 14 <= sj < 50:
                    assert level[i, j], f"blob interior missing at {(h, w)}"
                    found_fg = True
                elif max(10 - si, si - 53, 0) > 6 or max(10 - sj, sj - 53, 0) > 6:
                    assert not level[i, j], f"stray FG far from blob at {(h, w)}"
        assert found_fg


def test_bg_one_is_bitwise_not_of_fg_one():
    rng = np.random.default_rng(5)
    rgb = rng.random((32, 32, 3)).astype(np.float32)
    dims = [(8, 8), (4, 4)]
    fg = pyramid_masks(rgb, dims, Polarity.FG_ONE)
    bg = pyramid_masks(rgb, dims, Polarity.BG_ONE)
    for f, b in zip(fg, bg):
        np.testing.assert_array_equal(b, ~f)
