import pytest
import torch

from thermalign.alignment import masked_l2, pyramid_alignment_loss
from thermalign.detector import ModelConfig, TwoBranchDetector


def test_masked_l2_identical_maps():
    f = torch.randn(1, 3, 4, 4)
    mask = torch.ones(4, 4, dtype=torch.bool)
    assert masked_l2(f, f.clone(), mask).item() == 0.0


def test_masked_l2_empty_mask_is_zero():
    a, b = torch.randn(1, 3, 4, 4), torch.randn(1, 3, 4, 4)
    assert masked_l2(a, b, torch.zeros(4, 4, dtype=torch.bool)).item() == 0.0


def test_masked_l2_single_pixel_arithmetic():
    # 1x2 maps with one channel: rgb=(1,3), thermal=(0,1), mask=(1,0)
    # leaves a single masked element with squared difference 1.
    rgb = torch.tensor([[[1.0, 3.0]]])
    thermal = torch.tensor([[[0.0, 1.0]]])
    mask = torch.tensor([[True, False]])
    assert masked_l2(rgb, thermal, mask).item() == pytest.approx(1.0)


def test_masked_l2_average_over_all_flag():
    rgb = torch.tensor([[[1.0, 3.0]]])
    thermal = torch.tensor([[[0.0, 1.0]]])
    mask = torch.tensor([[True, False]])
    # Same masked sum (1.0) but divided by all 2 elements.
    assert masked_l2(rgb, thermal, mask, average_over="all").item() == pytest.approx(0.5)


def test_masked_l2_rejects_dim_mismatch():
    with pytest.raises(ValueError):
        masked_l2(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4),
                  torch.zeros(2, 2, dtype=torch.bool))
    with pytest.raises(ValueError):
        masked_l2(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2),
                  torch.zeros(4, 4, dtype=torch.bool))


def _pyramids_with_level_losses(values):
    """Build pyramids whose per-level mean squared difference is given."""
    pyr_rgb, pyr_th, masks = [], [], []
    size = 16
    for v in values:
        rgb = torch.zeros(1, 2, size, size)
        th = torch.full((1, 2, size, size), float(v) ** 0.5)
        pyr_rgb.append(rgb)
        pyr_th.append(th)
        masks.append(torch.ones(size, size, dtype=torch.bool))
        size //= 2
    return pyr_rgb, pyr_th, masks


def test_pyramid_loss_weighted_sum():
    pyr_rgb, pyr_th, masks = _pyramids_with_level_losses([0.4, 0.0, 0.2, 0.0, 0.0])
    total, per_level = pyramid_alignment_loss(
        pyr_rgb, pyr_th, masks, weights=(1.0, 1.0, 0.5, 0.05, 0.01)
    )
    assert total.item() == pytest.approx(0.4 * 1.0 + 0.2 * 0.5, abs=1e-6)
    assert per_level[0] == pytest.approx(0.4, abs=1e-6)


def test_pyramid_loss_zero_for_identical_pyramids():
    pyr_rgb, _, masks = _pyramids_with_level_losses([0.0] * 5)
    total, _ = pyramid_alignment_loss(pyr_rgb, [f.clone() for f in pyr_rgb], masks)
    assert total.item() == 0.0


def test_pyramid_loss_scales_linearly_with_weights():
    torch.manual_seed(0)
    pyr_rgb, pyr_th, masks = _pyramids_with_level_losses([0.3, 0.1, 0.2, 0.4, 0.5])
    base, _ = pyramid_alignment_loss(pyr_rgb, pyr_th, masks, weights=(1.0, 1.0, 0.5, 0.05, 0.01))
    tripled, _ = pyramid_alignment_loss(pyr_rgb, pyr_th, masks, weights=(3.0, 3.0, 1.5, 0.15, 0.03))
    assert tripled.item() == pytest.approx(3.0 * base.item(), rel=1e-6)


def test_gradient_reaches_only_thermal_branch():
    torch.manual_seed(0)
    detector = TwoBranchDetector(ModelConfig(backbone_widths=(4, 8, 16, 32), fpn_channels=8))
    detector.freeze_rgb_and_heads()
    rgb = torch.rand(1, 3, 64, 64)
    thermal = torch.rand(1, 1, 64, 64)
    with torch.no_grad():
        pyr_rgb = detector.rgb(rgb)
    pyr_th = detector.thermal(thermal)
    masks = [torch.ones(f.shape[-2:], dtype=torch.bool) for f in pyr_th]
    total, _ = pyramid_alignment_loss(pyr_rgb, pyr_th, masks)
    total.backward()

    pre_layer_grads = [p.grad for p in detector.thermal.pre_layer.parameters()]
    assert all(g is not None and g.abs().sum() > 0 for g in pre_layer_grads)
    fpn_grads = [p.grad for p in detector.thermal.fpn.parameters()]
    assert any(g is not None and g.abs().sum() > 0 for g in fpn_grads)
    for p in detector.rgb.parameters():
        assert p.grad is None
    for p in detector.heads.parameters():
        assert p.grad is None
