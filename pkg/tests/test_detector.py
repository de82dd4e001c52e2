import numpy as np
import pytest
import torch

from thermalign.anchors import (
    anchor_grid,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    nms,
    postprocess,
    pyramid_anchors,
)
from thermalign.detector import (
    ModelConfig,
    PreLayer,
    PYRAMID_STRIDES,
    TwoBranchDetector,
    image_to_tensor,
)

TINY = ModelConfig(backbone_widths=(4, 8, 16, 32), fpn_channels=8)


@pytest.fixture(scope="module")
def detector():
    torch.manual_seed(11)
    det = TwoBranchDetector(TINY)
    det.eval()  # keep batch-norm statistics frozen across tests
    return det


# --- pre-layer ----------------------------------------------------------

def test_pre_layer_replicates_at_init():
    layer = PreLayer()
    x = torch.rand(1, 1, 4, 4)
    out = layer(x)
    for c in range(3):
        assert torch.equal(out[:, c], x[:, 0])


def test_pre_layer_conv_arithmetic():
    layer = PreLayer()
    with torch.no_grad():
        layer.conv.weight[:, 0, 0, 0] = torch.tensor([2.0, 0.0, -1.0])
        layer.conv.bias.zero_()
    out = layer(torch.full((1, 1, 1, 1), 0.5))
    assert out.flatten().tolist() == pytest.approx([1.0, 0.0, -0.5])


def test_pre_layer_bias_passthrough_on_zero_input():
    layer = PreLayer()
    with torch.no_grad():
        layer.conv.bias.copy_(torch.tensor([0.1, 0.2, 0.3]))
    out = layer(torch.zeros(1, 1, 2, 2))
    assert out[0, :, 0, 0].tolist() == pytest.approx([0.1, 0.2, 0.3])


def test_pre_layer_rejects_multichannel():
    with pytest.raises(ValueError):
        PreLayer()(torch.zeros(1, 3, 4, 4))


# --- extractor / pyramid shapes -----------------------------------------

def test_extractor_level_strides(detector):
    c3, c4, c5 = detector.rgb.extract(torch.rand(1, 3, 256, 256))
    assert c3.shape[-2:] == (32, 32)
    assert c4.shape[-2:] == (16, 16)
    assert c5.shape[-2:] == (8, 8)


def test_extractor_rejects_bad_dims(detector):
    with pytest.raises(ValueError, match="divisible by 32"):
        detector.rgb.extract(torch.rand(1, 3, 100, 96))


def test_extractor_deterministic_in_eval(detector):
    detector.eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = detector.rgb.extract(x)
        b = detector.rgb.extract(x.clone())
    for ta, tb in zip(a, b):
        assert torch.equal(ta, tb)


def test_pyramid_level_dims_and_channels(detector):
    detector.eval()
    with torch.no_grad():
        pyramid = detector.rgb(torch.rand(1, 3, 256, 256))
    sizes = [tuple(f.shape[-2:]) for f in pyramid]
    assert sizes == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4)]
    assert all(f.shape[1] == TINY.fpn_channels for f in pyramid)
    assert detector.pyramid_dims((256, 256)) == sizes


def test_pyramid_zero_weights_give_zero_output(detector):
    import copy

    fpn = copy.deepcopy(detector.rgb.fpn)
    with torch.no_grad():
        for p in fpn.parameters():
            p.zero_()
    levels = (torch.zeros(1, 8, 8, 8), torch.zeros(1, 16, 4, 4), torch.zeros(1, 32, 2, 2))
    for level in fpn(levels):
        assert not level.abs().any()


def test_thermal_branch_matches_rgb_on_replicated_input():
    torch.manual_seed(21)
    fresh = TwoBranchDetector(TINY)
    fresh.eval()
    thermal = torch.rand(1, 1, 64, 64)
    stacked = thermal.repeat(1, 3, 1, 1)
    with torch.no_grad():
        pyr_thermal = fresh.thermal(thermal)
        pyr_rgb = fresh.rgb(stacked)
    for a, b in zip(pyr_thermal, pyr_rgb):
        assert torch.equal(a, b)


# --- shared heads -------------------------------------------------------

def test_heads_shared_between_identical_pyramids(detector):
    detector.eval()
    pyramid = [torch.rand(1, 8, s, s) for s in (16, 8, 4, 2, 1)]
    with torch.no_grad():
        cls_a, reg_a = detector.heads(pyramid)
        cls_b, reg_b = detector.heads([f.clone() for f in pyramid])
    for a, b in zip(cls_a + reg_a, cls_b + reg_b):
        assert torch.equal(a, b)


def test_head_map_shapes_match_anchor_layout(detector):
    pyramid = [torch.rand(1, 8, s, s) for s in (16, 8, 4, 2, 1)]
    cls_maps, reg_maps = detector.heads(pyramid)
    ratios = TINY.anchor_ratios
    for cls_map, reg_map, s in zip(cls_maps, reg_maps, (16, 8, 4, 2, 1)):
        assert cls_map.shape == (1, len(ratios), s, s)
        assert reg_map.shape == (1, 4 * len(ratios), s, s)


def test_fresh_model_scores_below_threshold(detector):
    detector.eval()
    with torch.no_grad():
        pyramid = detector.rgb(torch.rand(1, 3, 64, 64))
        cls_maps, _ = detector.heads(pyramid)
    for cls_map in cls_maps:
        assert torch.sigmoid(cls_map).max() < 0.1


# --- anchors and decoding -----------------------------------------------

def test_anchor_grid_count_and_geometry():
    anchors = anchor_grid((4, 6), stride=8, ratios=(0.7, 1.0, 1.4), scale=4.0)
    assert anchors.shape == (4 * 6 * 3, 4)
    # Unit-ratio anchor at cell (0, 0) is centered on the cell center.
    unit = anchors[1]
    assert (unit[0] + unit[2]) / 2 == pytest.approx(4.0)  # cx = 0.5 * stride
    assert (unit[2] - unit[0]) == pytest.approx(32.0)     # stride * scale
    # Aspect ratios are height/width and preserve anchor area.
    w0, h0 = anchors[0][2] - anchors[0][0], anchors[0][3] - anchors[0][1]
    w2, h2 = anchors[2][2] - anchors[2][0], anchors[2][3] - anchors[2][1]
    assert (h0 / w0).item() == pytest.approx(0.7, rel=1e-5)
    assert (h2 / w2).item() == pytest.approx(1.4, rel=1e-5)
    assert (w0 * h0).item() == pytest.approx(32.0 * 32.0, rel=1e-4)


def test_encode_decode_roundtrip():
    torch.manual_seed(0)
    anchors = anchor_grid((3, 3), 8)
    boxes = anchors + torch.rand_like(anchors) * 4.0
    boxes[:, 2:] += 2.0
    decoded = decode_boxes(encode_boxes(boxes, anchors), anchors)
    assert torch.allclose(decoded, boxes, atol=1e-4)


def test_clip_boxes():
    boxes = torch.tensor([[-5.0, -3.0, 70.0, 40.0]])
    clipped = clip_boxes(boxes, (32, 64))
    assert clipped.tolist() == [[0.0, 0.0, 64.0, 32.0]]


def test_nms_identical_boxes_keep_highest():
    boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
    keep = nms(boxes, torch.tensor([0.8, 0.9]), 0.15)
    assert keep.tolist() == [1]


def test_nms_disjoint_boxes_all_kept():
    boxes = torch.tensor(
        [[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0], [40.0, 0.0, 50.0, 10.0]]
    )
    keep = nms(boxes, torch.tensor([0.5, 0.9, 0.7]), 0.15)
    assert sorted(keep.tolist()) == [0, 1, 2]


def test_postprocess_threshold_and_cap():
    config = ModelConfig(backbone_widths=(4, 8, 16, 32), fpn_channels=8)
    level_dims = [(4, 4), (2, 2), (1, 1), (1, 1), (1, 1)]
    anchors = pyramid_anchors(level_dims, config.anchor_ratios, config.anchor_scale)
    cls_maps = [torch.full((len(config.anchor_ratios), h, w), -9.0) for h, w in level_dims]
    reg_maps = [torch.zeros((4 * len(config.anchor_ratios), h, w)) for h, w in level_dims]
    # All scores ~1e-4: below the 0.1 threshold -> empty output.
    boxes, scores = postprocess(cls_maps, reg_maps, anchors, (16, 16), config)
    assert len(boxes) == 0
    # One confident anchor survives.
    cls_maps[0][1, 2, 2] = 3.0
    boxes, scores = postprocess(cls_maps, reg_maps, anchors, (16, 16), config)
    assert len(boxes) == 1
    assert scores[0] == pytest.approx(torch.sigmoid(torch.tensor(3.0)).item(), rel=1e-5)


def test_postprocess_caps_detections():
    config = ModelConfig(max_detections=5, nms_threshold=0.15)
    level_dims = [(6, 6)]
    anchors = [anchor_grid((6, 6), 4, config.anchor_ratios, config.anchor_scale)]
    cls_maps = [torch.full((3, 6, 6), 2.0)]
    reg_maps = [torch.zeros((12, 6, 6))]
    boxes, scores = postprocess(cls_maps, reg_maps, anchors, (24, 24), config)
    assert len(boxes) <= 5


# --- freezing / syncing -------------------------------------------------

def test_freeze_marks_rgb_and_heads(detector):
    import copy

    det = copy.deepcopy(detector)
    det.freeze_rgb_and_heads()
    assert all(not p.requires_grad for p in det.rgb.parameters())
    assert all(not p.requires_grad for p in det.heads.parameters())
    assert all(p.requires_grad for p in det.thermal.parameters())
    det.train()
    assert not det.rgb.training  # pinned in eval mode
    assert det.thermal.training


def test_sync_thermal_copies_backbone():
    torch.manual_seed(3)
    det = TwoBranchDetector(TINY)
    with torch.no_grad():
        for p in det.thermal.backbone.parameters():
            p.add_(1.0)
    det.sync_thermal_from_rgb()
    rgb_state = det.rgb.backbone.state_dict()
    for key, value in det.thermal.backbone.state_dict().items():
        assert torch.equal(value, rgb_state[key])


def test_image_to_tensor_layout():
    image = np.zeros((4, 6, 3), dtype=np.float32)
    image[0, 1, 2] = 0.5
    tensor = image_to_tensor(image)
    assert tensor.shape == (1, 3, 4, 6)
    assert tensor[0, 2, 0, 1] == pytest.approx(0.5)
    gray = image_to_tensor(np.zeros((4, 6), dtype=np.float32))
    assert gray.shape == (1, 1, 4, 6)


def test_pyramid_strides_constant():
    assert PYRAMID_STRIDES == (4, 8, 16, 32, 64)
