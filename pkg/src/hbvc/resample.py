"""Separable cubic (Catmull-Rom, a=-0.5) spatial resampling for flow fields.

Resampling is expressed as fixed matrices applied per axis, so it is linear,
differentiable, and bit-reproducible. Sample positions use the block-center
convention: downsampling by s evaluates at x = (j + 0.5)*s - 0.5, upsampling
at x = (i + 0.5)/s - 0.5. Borders replicate. Kernel weights are renormalized
per output sample so constant fields are reproduced exactly.
"""

from __future__ import annotations

import functools

import torch


def _catmull_rom(t: torch.Tensor) -> torch.Tensor:
    """Cubic convolution kernel with a = -0.5, support (-2, 2)."""
    a = -0.5
    t = t.abs()
    w = torch.zeros_like(t)
    inner = t <= 1
    outer = (t > 1) & (t < 2)
    w[inner] = (a + 2) * t[inner] ** 3 - (a + 3) * t[inner] ** 2 + 1
    w[outer] = a * t[outer] ** 3 - 5 * a * t[outer] ** 2 + 8 * a * t[outer] - 4 * a
    return w


@functools.lru_cache(maxsize=64)
def _resample_matrix(n_in: int, n_out: int, scale: float) -> torch.Tensor:
    """(n_out, n_in) matrix sampling at x_j = (j + 0.5)*scale - 0.5."""
    xs = (torch.arange(n_out, dtype=torch.float64) + 0.5) * scale - 0.5
    base = torch.floor(xs).long()
    mat = torch.zeros(n_out, n_in, dtype=torch.float64)
    for k in range(-1, 3):
        idx = (base + k).clamp(0, n_in - 1)
        w = _catmull_rom(xs - (base + k).double())
        mat.scatter_add_(1, idx.unsqueeze(1), w.unsqueeze(1))
    mat /= mat.sum(dim=1, keepdim=True)
    return mat


def _apply_separable(x: torch.Tensor, mh: torch.Tensor, mw: torch.Tensor) -> torch.Tensor:
    mh = mh.to(x.dtype)
    mw = mw.to(x.dtype)
    return torch.einsum("oh,bchw,pw->bcop", mh, x, mw)


def resample2d(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Cubic resample of a (B, C, H, W) tensor to (out_h, out_w)."""
    _, _, h, w = x.shape
    mh = _resample_matrix(h, out_h, h / out_h)
    mw = _resample_matrix(w, out_w, w / out_w)
    return _apply_separable(x, mh, mw)


def subsample_flow(flow: torch.Tensor, s: int) -> torch.Tensor:
    """Spatially subsample a (B, C, H, W) flow tensor by factor s.

    Vector units stay full-resolution pixels; s must divide H and W
    (pad beforehand). s=1 returns the input unchanged.
    """
    if s < 1:
        raise ValueError(f"subsample factor must be >= 1, got {s}")
    if s == 1:
        return flow
    _, _, h, w = flow.shape
    if h % s or w % s:
        raise ValueError(f"dimensions {h}x{w} not divisible by s={s}")
    if h // s < 1 or w // s < 1:
        raise ValueError("field smaller than filter support after subsampling")
    return resample2d(flow, h // s, w // s)


def upsample_flow(lowres: torch.Tensor, s: int, height: int, width: int) -> torch.Tensor:
    """Cubic upsample back to (height, width); inverse of subsample_flow on
    constants. s=1 returns the input unchanged."""
    if s == 1:
        if lowres.shape[-2:] != (height, width):
            raise ValueError("s=1 but target size differs from input")
        return lowres
    _, _, h, w = lowres.shape
    if h * s != height or w * s != width:
        raise ValueError(
            f"target {height}x{width} inconsistent with {h}x{w} at s={s}"
        )
    return resample2d(lowres, height, width)
