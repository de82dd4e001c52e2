"""Two-branch one-stage detector.

Each branch runs a small residual backbone exposing its 3rd/4th/5th
feature levels (strides 8/16/32) and a five-level feature pyramid on
top (strides 4/8/16/32/64, level 1 = largest map). The thermal branch
prepends a 1x1 "pre-layer" that expands single-channel input to three
channels, initialized to plain replication. Classification and box
regression heads are shared between branches.

During adaptation the RGB branch and the heads stay frozen; only the
thermal pre-layer, backbone, and pyramid are trainable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

EXTRACTOR_STRIDES = (8, 16, 32)
PYRAMID_STRIDES = (4, 8, 16, 32, 64)


@dataclass
class ModelConfig:
    backbone_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    fpn_channels: int = 64
    anchor_ratios: tuple[float, ...] = (0.7, 1.0, 1.4)
    anchor_scale: float = 4.0
    score_threshold: float = 0.1
    nms_threshold: float = 0.15
    max_detections: int = 100
    prior_score: float = 0.01  # initial sigmoid output of the cls head

    @property
    def extractor_channels(self) -> tuple[int, int, int]:
        w = self.backbone_widths
        return (w[1], w[2], w[3])


class PreLayer(nn.Module):
    """1x1 convolution lifting 1-channel thermal input to 3 channels.

    Initialized so the output replicates the input on every channel,
    which makes the untouched thermal branch behave exactly like the RGB
    branch fed with a stacked thermal image.
    """

    def __init__(self) -> None:
        super().__init__()
        self.conv = nn.Conv2d(1, 3, kernel_size=1)
        with torch.no_grad():
            self.conv.weight.fill_(1.0)
            self.conv.bias.fill_(0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != 1:
            raise ValueError(f"pre-layer expects 1-channel input, got {x.shape[1]}")
        return self.conv(x)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.skip(x))


class Backbone(nn.Module):
    """Residual feature extractor emitting levels 3-5 at strides 8/16/32."""

    def __init__(self, widths: tuple[int, int, int, int] = (16, 32, 64, 128),
                 blocks_per_stage: int = 1) -> None:
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w0, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(w0),
            nn.ReLU(inplace=True),
        )
        self.stage1 = self._stage(w0, w0, blocks_per_stage)   # stride 4
        self.stage2 = self._stage(w0, w1, blocks_per_stage)   # stride 8  -> level 3
        self.stage3 = self._stage(w1, w2, blocks_per_stage)   # stride 16 -> level 4
        self.stage4 = self._stage(w2, w3, blocks_per_stage)   # stride 32 -> level 5

    @staticmethod
    def _stage(in_ch: int, out_ch: int, blocks: int) -> nn.Sequential:
        layers = [ResidualBlock(in_ch, out_ch, stride=2)]
        layers += [ResidualBlock(out_ch, out_ch) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(
                f"input dims {h}x{w} must be divisible by 32; resize or pad the image"
            )
        x = self.stem(x)
        x = self.stage1(x)
        c3 = self.stage2(x)
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        return c3, c4, c5


class PyramidNetwork(nn.Module):
    """Top-down pyramid with five levels, index 1 = largest map.

    Levels 2-4 come from lateral 1x1 projections of the extractor levels
    merged top-down; level 1 upsamples level 2, level 5 downsamples
    level 4 with a stride-2 convolution.
    """

    def __init__(self, in_channels: tuple[int, int, int], out_channels: int = 64) -> None:
        super().__init__()
        c3, c4, c5 = in_channels
        self.lateral3 = nn.Conv2d(c3, out_channels, 1)
        self.lateral4 = nn.Conv2d(c4, out_channels, 1)
        self.lateral5 = nn.Conv2d(c5, out_channels, 1)
        self.smooth3 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.smooth4 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.finer = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.coarser = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1)
        self.out_channels = out_channels

    def forward(self, levels: tuple[torch.Tensor, torch.Tensor, torch.Tensor]) -> list[torch.Tensor]:
        c3, c4, c5 = levels
        p5 = self.lateral5(c5)
        p4 = self.smooth4(self.lateral4(c4) + F.interpolate(p5, size=c4.shape[-2:], mode="nearest"))
        p3 = self.smooth3(self.lateral3(c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest"))
        m1 = self.finer(F.interpolate(p3, scale_factor=2, mode="nearest"))
        m5 = self.coarser(p5)
        return [m1, p3, p4, p5, m5]


class DetectionHeads(nn.Module):
    """Shared classification and box-regression heads over pyramid levels.

    Single-class: per anchor one objectness logit plus four box deltas.
    The classification bias starts at the usual low-prior value so an
    untrained model emits near-empty detections.
    """

    def __init__(self, channels: int, num_anchors: int, prior_score: float = 0.01) -> None:
        super().__init__()
        self.tower = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.cls_out = nn.Conv2d(channels, num_anchors, 3, padding=1)
        self.reg_out = nn.Conv2d(channels, 4 * num_anchors, 3, padding=1)
        self.num_anchors = num_anchors
        with torch.no_grad():
            self.cls_out.bias.fill_(-math.log((1.0 - prior_score) / prior_score))

    def forward(self, pyramid: list[torch.Tensor]) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        cls_maps, reg_maps = [], []
        for level in pyramid:
            t = self.tower(level)
            cls_maps.append(self.cls_out(t))
            reg_maps.append(self.reg_out(t))
        return cls_maps, reg_maps


class Branch(nn.Module):
    """One modality branch: optional pre-layer, backbone, pyramid."""

    def __init__(self, config: ModelConfig, with_pre_layer: bool) -> None:
        super().__init__()
        self.pre_layer = PreLayer() if with_pre_layer else None
        self.backbone = Backbone(config.backbone_widths, config.blocks_per_stage)
        self.fpn = PyramidNetwork(config.extractor_channels, config.fpn_channels)

    def extract(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if self.pre_layer is not None:
            x = self.pre_layer(x)
        elif x.shape[1] != 3:
            raise ValueError(f"RGB branch expects 3-channel input, got {x.shape[1]}")
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.fpn(self.extract(x))


class TwoBranchDetector(nn.Module):
    """RGB and thermal branches with shared detection heads.

    Construction leaves both branches with identical backbone/pyramid
    weights (thermal copied from RGB) and a replication-initialized
    pre-layer, so the two branches start out functionally equal.
    """

    def __init__(self, config: ModelConfig | None = None) -> None:
        super().__init__()
        self.config = config or ModelConfig()
        self.rgb = Branch(self.config, with_pre_layer=False)
        self.thermal = Branch(self.config, with_pre_layer=True)
        self.heads = DetectionHeads(
            self.config.fpn_channels,
            len(self.config.anchor_ratios),
            self.config.prior_score,
        )
        self.sync_thermal_from_rgb()

    def sync_thermal_from_rgb(self) -> None:
        """Copy RGB backbone and pyramid weights into the thermal branch."""
        self.thermal.backbone.load_state_dict(self.rgb.backbone.state_dict())
        self.thermal.fpn.load_state_dict(self.rgb.fpn.state_dict())

    def freeze_rgb_and_heads(self) -> None:
        """Freeze the RGB branch and the shared heads for adaptation.

        Also pins the RGB branch in eval mode so batch-norm statistics
        never drift from their initial values.
        """
        for p in self.rgb.parameters():
            p.requires_grad_(False)
        for p in self.heads.parameters():
            p.requires_grad_(False)
        self.rgb.eval()
        self.heads.eval()

    def train(self, mode: bool = True) -> "TwoBranchDetector":
        super().train(mode)
        # A frozen RGB branch must stay in eval mode regardless.
        if not any(p.requires_grad for p in self.rgb.parameters()):
            self.rgb.eval()
        return self

    def trainable_parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "pre_layer": list(self.thermal.pre_layer.parameters()),
            "thermal_backbone": list(self.thermal.backbone.parameters()),
            "thermal_fpn": list(self.thermal.fpn.parameters()),
        }

    def pyramid_dims(self, image_hw: tuple[int, int]) -> list[tuple[int, int]]:
        """Spatial dims of each pyramid level for a given input size."""
        h, w = image_hw
        dims = [(h // s, w // s) for s in PYRAMID_STRIDES[:4]]
        # The coarsest level comes from a stride-2 conv on level 4.
        h4, w4 = dims[-1]
        dims.append(((h4 + 1) // 2, (w4 + 1) // 2))
        return dims


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) or (H, W) float array in [0, 1] -> (1, C, H, W) tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
