"""Quality metrics and Bjøntegaard delta bitrate.

PSNR and MS-SSIM operate on [0, 1]-scaled RGB frames. MS-SSIM uses the
conventional 5 scale weights and an 11-tap Gaussian window (sigma 1.5);
inputs too small for 5 scales use fewer scales with renormalized weights,
and the number of scales used is reported alongside the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5


class MetricError(Exception):
    pass


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over all channels jointly; +inf for identical frames."""
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(channels: int, dtype, device) -> torch.Tensor:
    xs = torch.arange(_WIN_SIZE, dtype=dtype, device=device) - (_WIN_SIZE - 1) / 2
    g = torch.exp(-(xs ** 2) / (2 * _WIN_SIGMA ** 2))
    g = g / g.sum()
    return g.reshape(1, 1, 1, -1).repeat(channels, 1, 1, 1)


def _ssim_pass(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor):
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    ch = x.shape[1]

    def blur(t):
        t = F.conv2d(t, win, groups=ch)
        return F.conv2d(t, win.transpose(2, 3), groups=ch)

    mx = blur(x)
    my = blur(y)
    mxx = blur(x * x)
    myy = blur(y * y)
    mxy = blur(x * y)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    cs = (2 * cxy + c2) / (vx + vy + c2)
    ssim = ((2 * mx * my + c1) / (mx * mx + my * my + c1)) * cs
    return ssim.mean(), cs.mean()


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Differentiable multi-scale SSIM on (B, C, H, W) tensors in [0, 1].

    Returns (score, scales_used).
    """
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    h, w = x.shape[-2:]
    max_scales = 0
    side = min(h, w)
    while side >= _WIN_SIZE and max_scales < len(MSSSIM_WEIGHTS):
        max_scales += 1
        side //= 2
    if max_scales == 0:
        raise MetricError(f"input {h}x{w} too small for even one scale")
    weights = torch.tensor(MSSSIM_WEIGHTS[:max_scales], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    win = _gaussian_window(x.shape[1], x.dtype, x.device)
    values = []
    for i in range(max_scales):
        ssim_mean, cs_mean = _ssim_pass(x, y, win)
        values.append(ssim_mean if i == max_scales - 1 else cs_mean)
        if i < max_scales - 1:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    score = torch.ones((), dtype=values[0].dtype, device=values[0].device)
    for v, wgt in zip(values, weights):
        score = score * torch.clamp(v, min=1e-8) ** wgt
    return score, max_scales


def ms_ssim(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    """MS-SSIM between two (H, W, 3) frames; returns (score, scales_used)."""
    x = torch.from_numpy(np.ascontiguousarray(a)).double().permute(2, 0, 1).unsqueeze(0)
    y = torch.from_numpy(np.ascontiguousarray(b)).double().permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        score, scales = ms_ssim_torch(x, y)
    return float(score), scales


@dataclass
class RDPoint:
    bpp: float
    psnr: float
    msssim: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.bpp <= 0:
            raise MetricError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RDCurve:
    points: list[RDPoint]

    def __post_init__(self):
        if len(self.points) < 4:
            raise MetricError(f"need at least 4 R-D points, got {len(self.points)}")
        self.points = sorted(self.points, key=lambda p: p.bpp)
        rates = [p.bpp for p in self.points]
        if len(set(rates)) != len(rates):
            raise MetricError("R-D points must have distinct rates")

    def arrays(self, quality: str = "psnr") -> tuple[np.ndarray, np.ndarray]:
        q = np.array([getattr(p, quality) for p in self.points])
        r = np.array([p.bpp for p in self.points])
        return r, q

    def monotonicity_violations(self, quality: str = "psnr") -> list[int]:
        """Indices where quality decreases as rate increases (flagged, not fatal)."""
        _, q = self.arrays(quality)
        return [i for i in range(1, len(q)) if q[i] < q[i - 1]]


def _fit_log_rate(rate: np.ndarray, quality: np.ndarray, method: str):
    order = np.argsort(quality)
    q = quality[order]
    lr = np.log10(rate[order])
    if len(np.unique(q)) != len(q):
        raise MetricError("duplicate quality values; cannot fit rate vs quality")
    if method == "pchip":
        return PchipInterpolator(q, lr)
    if method == "polynomial":
        coeffs = np.polyfit(q, lr, 3)
        poly = np.poly1d(coeffs)
        integ = poly.integ()

        class _Poly:
            def integrate(self, lo, hi):
                return integ(hi) - integ(lo)

        return _Poly()
    raise MetricError(f"unknown BD fit method: {method}")


def bd_rate(test: RDCurve, anchor: RDCurve, quality: str = "psnr",
            method: str = "pchip") -> float:
    """Average percent rate difference of test vs anchor at equal quality.

    Negative values are bitrate savings of the test curve.
    """
    rt, qt = test.arrays(quality)
    ra, qa = anchor.arrays(quality)
    lo = max(qt.min(), qa.min())
    hi = min(qt.max(), qa.max())
    if hi <= lo:
        raise MetricError("R-D curves have no overlapping quality range")
    ft = _fit_log_rate(rt, qt, method)
    fa = _fit_log_rate(ra, qa, method)
    avg_diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float(100.0 * (10.0 ** avg_diff - 1.0))


def bd_rate_both(test: RDCurve, anchor: RDCurve, quality: str = "psnr") -> dict:
    """pchip and classic cubic-polynomial BD-BR; both reported when they
    disagree by more than 0.5 points."""
    p = bd_rate(test, anchor, quality, "pchip")
    c = bd_rate(test, anchor, quality, "polynomial")
    out = {"pchip": p}
    if abs(p - c) > 0.5:
        out["polynomial"] = c
    return out
