"""Domain-adversarial pieces: gradient reversal, discriminators, losses.

Three discriminators, one per extractor level, each try to tell RGB
feature maps (label 0) from thermal ones (label 1). A gradient reversal
layer sits between the features and each discriminator, so a single
backward pass trains the discriminators to separate the domains while
pushing the thermal extractor to make them inseparable.
"""
from __future__ import annotations

import math

import torch
from torch import nn

PROB_EPS = 1e-7


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, factor: float) -> torch.Tensor:
        ctx.factor = factor
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.factor * grad_output, None


def grad_reverse(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Identity in the forward pass; scales gradients by -factor backward."""
    return _GradReverse.apply(x, factor)


def grl_factor(iteration: int, total_iterations: int) -> float:
    """Warmup schedule for the reversal strength: 2 / (1 + e^(-10p)) - 1.

    Ramps from 0 toward 1 over training so early, noisy domain
    classification signals do not disturb the extractor.
    """
    if total_iterations <= 0:
        raise ValueError("total_iterations must be positive")
    p = min(max(iteration / total_iterations, 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


class DomainDiscriminator(nn.Module):
    """Per-level domain classifier.

    Three conv/batch-norm/ReLU/dropout blocks, adaptive average pooling
    to one value per channel, and a linear layer to a single logit. The
    pixelwise variant swaps the pooled head for a 1x1 conv that emits
    one logit per spatial location.
    """

    def __init__(self, in_channels: int, widths: tuple[int, int, int] = (64, 32, 16),
                 dropout: float = 0.5, pixelwise: bool = False) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.pixelwise = pixelwise
        blocks = []
        prev = in_channels
        stride = 1 if pixelwise else 2
        for width in widths:
            blocks += [
                nn.Conv2d(prev, width, 3, stride=stride, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.Dropout(dropout),
            ]
            prev = width
        self.blocks = nn.Sequential(*blocks)
        if pixelwise:
            self.head = nn.Conv2d(prev, 1, 1)
        else:
            self.pool = nn.AdaptiveAvgPool2d(1)
            self.head = nn.Linear(prev, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logit(s) for the probability that x came from the thermal domain.

        Returns shape (B,) when pooled, (B, H, W) when pixelwise.
        """
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"discriminator expects {self.in_channels} channels, got {x.shape[1]}"
            )
        h = self.blocks(x)
        if self.pixelwise:
            return self.head(h)[:, 0]
        return self.head(self.pool(h).flatten(1))[:, 0]


def domain_probability(discriminator: DomainDiscriminator, features: torch.Tensor) -> torch.Tensor:
    """Predicted probability that the feature map is thermal, in (0, 1)."""
    return torch.sigmoid(discriminator(features))


def domain_focal_loss(
    p_thermal: torch.Tensor,
    is_thermal: torch.Tensor,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Single-class focal loss -(1 - p_t)^gamma * log(p_t), batch mean.

    p_t is the probability assigned to the true domain. Probabilities
    are clamped away from {0, 1} to keep the log finite.
    """
    p_thermal = p_thermal.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(is_thermal.to(bool), p_thermal, 1.0 - p_thermal)
    return (-((1.0 - p_t) ** gamma) * torch.log(p_t)).mean()


def build_discriminators(
    extractor_channels: tuple[int, int, int],
    pixelwise: bool = False,
) -> nn.ModuleList:
    return nn.ModuleList(
        DomainDiscriminator(c, pixelwise=pixelwise) for c in extractor_channels
    )


def adversarial_loss(
    rgb_levels: tuple[torch.Tensor, ...],
    thermal_levels: tuple[torch.Tensor, ...],
    discriminators: nn.ModuleList,
    grl: float,
    gamma: float = 2.0,
    fg_masks: list[torch.Tensor] | None = None,
) -> tuple[torch.Tensor, list[float]]:
    """Sum of per-level domain focal losses over both domains' samples.

    Each branch's features pass through a gradient reversal layer before
    the matching discriminator; one optimizer step on the result
    therefore trains the discriminators while adapting the thermal
    extractor. For pixelwise discriminators the loss is restricted to
    foreground pixels via fg_masks (one bool tensor per level, resized
    to that level's dims).

    Returns the total loss and the per-level values for logging.
    """
    if len(rgb_levels) != len(discriminators) or len(thermal_levels) != len(discriminators):
        raise ValueError("need one feature level per discriminator")
    per_level: list[float] = []
    total = None
    for idx, disc in enumerate(discriminators):
        logits = torch.cat(
            [
                disc(grad_reverse(rgb_levels[idx], grl)),
                disc(grad_reverse(thermal_levels[idx], grl)),
            ]
        )
        b = rgb_levels[idx].shape[0]
        labels = torch.cat(
            [torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)]
        )
        if disc.pixelwise:
            if fg_masks is None:
                raise ValueError("pixelwise discriminators need fg_masks")
            mask = fg_masks[idx].to(bool)
            mask2 = torch.cat([mask, mask])
            labels = labels.view(-1, 1, 1).expand_as(logits)[mask2]
            logits = logits[mask2]
            if logits.numel() == 0:
                level_loss = torch.zeros((), dtype=rgb_levels[idx].dtype)
                per_level.append(0.0)
                total = level_loss if total is None else total + level_loss
                continue
        level_loss = domain_focal_loss(torch.sigmoid(logits), labels, gamma)
        per_level.append(float(level_loss.detach()))
        total = level_loss if total is None else total + level_loss
    return total, per_level
