"""Video sequence I/O, synthetic sequence generators and triplet sampling.

Frames are numpy float32 arrays of shape (H, W, 3) with RGB values in [0, 1].
8-bit sources are normalized by dividing by 255, so quantizing back to 8 bits
round-trips exactly.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates


class SequenceError(Exception):
    """Raised on malformed or inconsistent sequence data."""


def validate_frame(frame: np.ndarray) -> None:
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise SequenceError(f"frame must be HxWx3, got shape {frame.shape}")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise SequenceError("frame values must lie in [0, 1]")


@dataclass
class VideoSequence:
    frames: list[np.ndarray]
    frame_rate: float = 30.0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise SequenceError("sequence must contain at least one frame")
        h, w = self.frames[0].shape[:2]
        for i, f in enumerate(self.frames):
            validate_frame(f)
            if f.shape[:2] != (h, w):
                raise SequenceError(
                    f"frame {i} has shape {f.shape[:2]}, expected {(h, w)}"
                )

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TripletSample:
    """Three frames emulating one hierarchy level; stride is 3, 2 or 1."""

    past: np.ndarray
    middle: np.ndarray
    future: np.ndarray
    level: int

    def __post_init__(self):
        if self.level not in (1, 2, 3):
            raise SequenceError(f"level must be 1, 2 or 3, got {self.level}")
        shapes = {self.past.shape, self.middle.shape, self.future.shape}
        if len(shapes) != 1:
            raise SequenceError("triplet frames must share dimensions")


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float32) / 255.0


_PNG_INDEX = re.compile(r"(\d+)")


def load_sequence(
    path: str,
    fmt: str = "png_sequence",
    width: int | None = None,
    height: int | None = None,
    frame_rate: float = 30.0,
) -> VideoSequence:
    """Load a sequence from a PNG directory or a raw interleaved RGB24 file."""
    if fmt == "png_sequence":
        if not os.path.isdir(path):
            raise SequenceError(f"no such directory: {path}")
        names = [n for n in os.listdir(path) if n.lower().endswith(".png")]
        if not names:
            raise SequenceError(f"no PNG files in {path}")
        names.sort(key=lambda n: int(_PNG_INDEX.search(n).group(1)) if _PNG_INDEX.search(n) else 0)
        frames = []
        for n in names:
            img = Image.open(os.path.join(path, n)).convert("RGB")
            frames.append(from_uint8(np.asarray(img)))
        return VideoSequence(frames, frame_rate)
    if fmt == "raw_rgb24":
        if width is None or height is None:
            raise SequenceError("raw_rgb24 requires declared width and height")
        if not os.path.isfile(path):
            raise SequenceError(f"no such file: {path}")
        data = np.fromfile(path, dtype=np.uint8)
        frame_bytes = 3 * width * height
        if data.size == 0 or data.size % frame_bytes != 0:
            raise SequenceError(
                f"truncated raw stream: {data.size} bytes is not a multiple "
                f"of {frame_bytes} (3*{width}*{height})"
            )
        n = data.size // frame_bytes
        frames = [
            from_uint8(data[i * frame_bytes:(i + 1) * frame_bytes].reshape(height, width, 3))
            for i in range(n)
        ]
        return VideoSequence(frames, frame_rate)
    raise SequenceError(f"unknown format: {fmt}")


def save_sequence(seq: VideoSequence, path: str, prefix: str = "frame") -> list[str]:
    """Write frames as zero-padded PNG files; returns written paths."""
    os.makedirs(path, exist_ok=True)
    pad = max(4, len(str(len(seq) - 1)))
    out = []
    for i, f in enumerate(seq.frames):
        p = os.path.join(path, f"{prefix}_{i:0{pad}d}.png")
        Image.fromarray(to_uint8(f)).save(p)
        out.append(p)
    return out


# 1-based index patterns for 7-frame inputs; stride 3, 2, 1 per level.
_TRIPLET_PATTERNS = {
    1: [(1, 4, 7)],
    2: [(1, 3, 5), (2, 4, 6), (3, 5, 7)],
    3: [(1, 2, 3), (2, 3, 4), (3, 4, 5), (4, 5, 6), (5, 6, 7)],
}


def make_triplets(seq: VideoSequence) -> list[TripletSample]:
    """Enumerate the nine level-emulating triplets of a 7-frame sequence."""
    if len(seq) != 7:
        raise SequenceError(f"triplet construction needs exactly 7 frames, got {len(seq)}")
    out = []
    for level, patterns in _TRIPLET_PATTERNS.items():
        for p, m, f in patterns:
            out.append(TripletSample(seq.frames[p - 1], seq.frames[m - 1], seq.frames[f - 1], level))
    return out


def random_crop(frames: list[np.ndarray], size: int, seed: int) -> list[np.ndarray]:
    """Crop the same random size x size window out of every frame."""
    h, w = frames[0].shape[:2]
    if size > min(h, w):
        raise SequenceError(f"crop {size} exceeds frame size {h}x{w}")
    rng = np.random.default_rng(seed)
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    return [f[oy:oy + size, ox:ox + size].copy() for f in frames]


@dataclass
class SyntheticSpec:
    """Parameters for the deterministic synthetic sequence generators."""

    kind: str  # constant_velocity | occlusion | static | noise
    num_frames: int = 9
    height: int = 64
    width: int = 64
    seed: int = 0
    velocity: tuple[float, float] = (1.0, 0.0)  # (dx, dy) pixels/frame
    patch_size: int = 16
    patch_velocity: tuple[float, float] = field(default_factory=lambda: (2.0, 0.0))
    texture_sigma: float = 1.5


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    """Band-limited random RGB texture in [0.05, 0.95]; flow stays estimable."""
    x = rng.standard_normal((h, w, 3))
    for c in range(3):
        x[:, :, c] = gaussian_filter(x[:, :, c], sigma, mode="wrap")
    lo, hi = x.min(), x.max()
    return (0.05 + 0.9 * (x - lo) / (hi - lo)).astype(np.float32)


def _sample_shifted(canvas: np.ndarray, oy: float, ox: float, h: int, w: int) -> np.ndarray:
    """Bilinear sample an (h, w) window of the canvas at offset (oy, ox)."""
    ys = np.arange(h, dtype=np.float64) + oy
    xs = np.arange(w, dtype=np.float64) + ox
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((h, w, 3), dtype=np.float32)
    for c in range(3):
        out[:, :, c] = map_coordinates(canvas[:, :, c], [gy, gx], order=1, mode="nearest")
    return out


def synth_sequence(spec: SyntheticSpec) -> VideoSequence:
    """Generate a deterministic synthetic sequence.

    constant_velocity satisfies frame_t(x) = frame_0(x - t*v) in the
    interior; occlusion moves a textured patch over a static background so
    some background pixels are visible from only one temporal direction.
    """
    rng = np.random.default_rng(spec.seed)
    h, w, n = spec.height, spec.width, spec.num_frames
    if spec.kind == "static":
        base = _texture(rng, h, w, spec.texture_sigma)
        return VideoSequence([base.copy() for _ in range(n)])
    if spec.kind == "noise":
        return VideoSequence([rng.random((h, w, 3)).astype(np.float32) for _ in range(n)])
    if spec.kind == "constant_velocity":
        vx, vy = spec.velocity
        # Margin so every frame samples the canvas interior.
        my = int(np.ceil(abs(vy) * n)) + 2
        mx = int(np.ceil(abs(vx) * n)) + 2
        canvas = _texture(rng, h + 2 * my, w + 2 * mx, spec.texture_sigma).astype(np.float64)
        frames = [
            _sample_shifted(canvas, my - t * vy, mx - t * vx, h, w) for t in range(n)
        ]
        return VideoSequence(frames)
    if spec.kind == "occlusion":
        bg = _texture(rng, h, w, spec.texture_sigma)
        patch = _texture(np.random.default_rng(spec.seed + 1), spec.patch_size, spec.patch_size, 0.8)
        pvx, pvy = spec.patch_velocity
        y0 = (h - spec.patch_size) // 4
        x0 = 2
        frames = []
        for t in range(n):
            f = bg.copy()
            py = int(round(y0 + t * pvy))
            px = int(round(x0 + t * pvx))
            py = max(0, min(h - spec.patch_size, py))
            px = max(0, min(w - spec.patch_size, px))
            f[py:py + spec.patch_size, px:px + spec.patch_size] = patch
            frames.append(f)
        return VideoSequence(frames)
    raise SequenceError(f"unknown generator: {spec.kind}")
