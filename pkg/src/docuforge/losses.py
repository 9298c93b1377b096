"""Least-squares adversarial losses, cycle consistency and the conditional-GAN objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidArgument


@dataclass(frozen=True)
class LossWeights:
    cycle_weight: float = 10.0
    cgan_adv_weight: float = 6.6e-3
    cgan_perc_weight: float = 1.0

    def __post_init__(self):
        if min(self.cycle_weight, self.cgan_adv_weight, self.cgan_perc_weight) < 0:
            raise InvalidArgument("loss weights must be nonnegative")


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.mean((real_scores - 1) ** 2) + 0.5 * torch.mean(fake_scores ** 2)


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return torch.mean((fake_scores - 1) ** 2)


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between an image and its round-trip reconstruction."""
    if x.shape != x_reconstructed.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    return torch.mean(torch.abs(x - x_reconstructed))


class FeaturePyramid(nn.Module):
    """Frozen, randomly initialised 3-level conv feature extractor.

    Weights come from a fixed seed, so every instance built with the same
    arguments is identical and no pretrained download is needed.
    """

    def __init__(self, channels: int = 1, widths=(8, 16, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.levels = nn.ModuleList()
        prev = channels
        for i, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, 1, 1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * prev)) ** 0.5)
                conv.bias.zero_()
            self.levels.append(nn.Sequential(*([nn.AvgPool2d(2)] if i else []), conv, nn.ReLU()))
            prev = w
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


class IdentityExtractor(nn.Module):
    """Single-level extractor returning the image itself."""

    def forward(self, x):
        return [x]


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Mean over pyramid levels of the mean squared feature difference."""
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = extractor(a), extractor(b)
    return sum(F.mse_loss(x, y) for x, y in zip(fa, fb)) / len(fa)


def cgan_total_g_loss(adv, perc, w: LossWeights = LossWeights()):
    return w.cgan_adv_weight * adv + w.cgan_perc_weight * perc
