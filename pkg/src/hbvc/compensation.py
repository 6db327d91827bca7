"""Bi-directional motion compensation: learned mask fusion of the two
warped reference frames.

The fused prediction is a per-pixel convex combination
fused = mask * warped_past + (1 - mask) * warped_future, with a
single-channel mask shared across RGB.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MaskNet(nn.Module):
    """U-shaped encoder-decoder with skip connections over the 6-channel
    stack of the two warped frames; sigmoid single-channel output."""

    def __init__(self, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        w0, w1, w2 = widths
        self.enc0 = nn.Sequential(
            nn.Conv2d(6, w0, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(w0, w0, 3, padding=1), nn.LeakyReLU(0.1),
        )
        self.enc1 = nn.Sequential(
            nn.Conv2d(w0, w1, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(w1, w1, 3, padding=1), nn.LeakyReLU(0.1),
        )
        self.enc2 = nn.Sequential(
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(w2, w2, 3, padding=1), nn.LeakyReLU(0.1),
        )
        self.dec1 = nn.Sequential(
            nn.Conv2d(w2 + w1, w1, 3, padding=1), nn.LeakyReLU(0.1),
        )
        self.dec0 = nn.Sequential(
            nn.Conv2d(w1 + w0, w0, 3, padding=1), nn.LeakyReLU(0.1),
            nn.Conv2d(w0, 1, 3, padding=1),
        )

    def forward(self, warped_past: torch.Tensor, warped_future: torch.Tensor) -> torch.Tensor:
        if warped_past.shape != warped_future.shape:
            raise ValueError("warped frames must share dimensions")
        h, w = warped_past.shape[-2:]
        x = torch.cat([warped_past, warped_future], dim=1)
        ph = (4 - h % 4) % 4
        pw = (4 - w % 4) % 4
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        e0 = self.enc0(x)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([
            F.interpolate(e2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1
        ], dim=1))
        d0 = self.dec0(torch.cat([
            F.interpolate(d1, size=e0.shape[-2:], mode="bilinear", align_corners=False), e0
        ], dim=1))
        return torch.sigmoid(d0)[:, :, :h, :w]


def estimate_mask(warped_past: torch.Tensor, warped_future: torch.Tensor,
                  net: MaskNet) -> torch.Tensor:
    return net(warped_past, warped_future)


def fuse(warped_past: torch.Tensor, warped_future: torch.Tensor,
         mask: torch.Tensor) -> torch.Tensor:
    """Per-pixel convex combination, mask broadcast across color channels."""
    if warped_past.shape != warped_future.shape:
        raise ValueError("warped frames must share dimensions")
    if mask.shape[-2:] != warped_past.shape[-2:] or mask.shape[1] != 1:
        raise ValueError("mask must be single-channel with matching spatial dims")
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return mask * warped_past + (1.0 - mask) * warped_future


def average_mask(warped_past: torch.Tensor) -> torch.Tensor:
    """The simple-averaging baseline: mask identically 0.5."""
    b, _, h, w = warped_past.shape
    return torch.full((b, 1, h, w), 0.5, dtype=warped_past.dtype,
                      device=warped_past.device)


def oracle_mask(warped_past: torch.Tensor, warped_future: torch.Tensor,
                ground_truth: torch.Tensor) -> torch.Tensor:
    """Test-time oracle: per-pixel convex weight minimizing the fused
    squared error against ground truth (summed over channels), clamped to
    [0, 1]. Pointwise no worse than either single direction or averaging;
    equal errors get 0.5."""
    a = warped_past - ground_truth
    b = warped_future - ground_truth
    diff = a - b
    denom = diff.pow(2).sum(dim=1, keepdim=True)
    num = (b * (b - a)).sum(dim=1, keepdim=True)
    alpha = torch.where(denom > 0, num / denom.clamp(min=1e-20),
                        torch.full_like(denom, 0.5))
    return alpha.clamp(0.0, 1.0)
