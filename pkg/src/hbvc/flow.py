"""Coarse-to-fine pyramid flow estimation and differentiable backward warping.

Flow tensors are (B, 2, H, W) with channel order (dx, dy) in full-resolution
pixels. Sign convention: warped(x) = reference(x + flow(x)).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FlowField:
    """A flow tensor tagged with the frame it is defined on and points into."""

    vectors: torch.Tensor  # (1, 2, H, W)
    source_grid: int
    points_to: int


def backward_warp(reference: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp: out(x) = reference(x + flow(x)).

    Out-of-bounds samples clamp to the edge. Differentiable w.r.t. both
    reference and flow.
    """
    if reference.shape[-2:] != flow.shape[-2:]:
        raise ValueError(
            f"reference {tuple(reference.shape[-2:])} vs flow {tuple(flow.shape[-2:])}"
        )
    b, _, h, w = flow.shape
    dtype = reference.dtype
    ys = torch.arange(h, dtype=dtype, device=flow.device)
    xs = torch.arange(w, dtype=dtype, device=flow.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    px = gx.unsqueeze(0) + flow[:, 0]
    py = gy.unsqueeze(0) + flow[:, 1]
    # normalize to [-1, 1] for grid_sample (align_corners=True)
    nx = 2.0 * px / max(w - 1, 1) - 1.0
    ny = 2.0 * py / max(h - 1, 1) - 1.0
    grid = torch.stack([nx, ny], dim=-1)
    return F.grid_sample(
        reference, grid, mode="bilinear", padding_mode="border", align_corners=True
    )


def upscale_flow2x(flow: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear 2x upsampling of a flow field with vector magnitudes doubled."""
    up = F.interpolate(flow, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return up * 2.0


_COST_RADIUS = 2


def local_cost_volume(source: torch.Tensor, warped: torch.Tensor,
                      radius: int = _COST_RADIUS) -> torch.Tensor:
    """Per-pixel correlation of source with integer-shifted warped reference.

    Returns (B, (2r+1)^2, H, W), normalized to zero mean and unit variance
    across the offset channels at each pixel: the discriminative ripple
    between offsets is tiny relative to the common local-energy term, and
    without this normalization the matching signal is too weak to learn
    from at desk scale.
    """
    b, c, h, w = source.shape
    pad = F.pad(warped, (radius,) * 4, mode="replicate")
    vols = []
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            shifted = pad[:, :, dy:dy + h, dx:dx + w]
            vols.append((source * shifted).mean(1, keepdim=True))
    v = torch.cat(vols, 1)
    mu = v.mean(1, keepdim=True)
    var = (v - mu).pow(2).mean(1, keepdim=True)
    return (v - mu) / torch.sqrt(var + 1e-6)


class _LevelNet(nn.Module):
    """Per-level residual estimator over (source, warped reference, flow,
    local matching cost volume)."""

    def __init__(self, channels: int = 16):
        super().__init__()
        in_ch = 8 + (2 * _COST_RADIUS + 1) ** 2
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, channels, 5, padding=2),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 5, padding=2),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, 2, 3, padding=1),
        )

    def forward(self, source, warped, flow):
        cost = local_cost_volume(source, warped)
        return self.net(torch.cat([source, warped, flow, cost], dim=1))


class PyramidFlowNet(nn.Module):
    """Spatial-pyramid flow estimator.

    Flow starts at zero at the coarsest level; each finer level upsamples
    the running estimate (x2, magnitudes doubled) and adds a learned
    residual computed from the source, the warped reference and the
    upsampled flow.
    """

    def __init__(self, levels: int = 4, channels: int = 16):
        super().__init__()
        if levels < 2:
            raise ValueError("pyramid needs at least 2 levels")
        self.levels = levels
        self.nets = nn.ModuleList(_LevelNet(channels) for _ in range(levels))

    def forward(self, source: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        if source.shape != reference.shape:
            raise ValueError("source and reference must share dimensions")
        h, w = source.shape[-2:]
        div = 2 ** (self.levels - 1)
        ph = (div - h % div) % div
        pw = (div - w % div) % div
        if ph or pw:
            source = F.pad(source, (0, pw, 0, ph), mode="replicate")
            reference = F.pad(reference, (0, pw, 0, ph), mode="replicate")
        src_pyr = [source]
        ref_pyr = [reference]
        for _ in range(self.levels - 1):
            src_pyr.append(F.avg_pool2d(src_pyr[-1], 2))
            ref_pyr.append(F.avg_pool2d(ref_pyr[-1], 2))
        flow = torch.zeros_like(src_pyr[-1][:, :2])
        for lvl in range(self.levels - 1, -1, -1):
            if lvl < self.levels - 1:
                flow = upscale_flow2x(flow, src_pyr[lvl].shape[-2], src_pyr[lvl].shape[-1])
            warped = backward_warp(ref_pyr[lvl], flow)
            flow = flow + self.nets[lvl](src_pyr[lvl], warped, flow)
        if not torch.isfinite(flow).all():
            raise FloatingPointError("non-finite activations in flow estimation")
        return flow[:, :, :h, :w]


def estimate_flow(
    source: torch.Tensor, reference: torch.Tensor, net: PyramidFlowNet
) -> torch.Tensor:
    """Estimate flow defined on the source grid pointing into the reference."""
    return net(source, reference)
