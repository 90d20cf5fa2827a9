"""Degradation model ``I = D(B(H)) + noise``, synthetic clips and windowing."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from rcdm.errors import ConfigError, ShapeError
from rcdm.kernels import resize
from rcdm.model import VideoWindow
from rcdm.tensor import Rng, Tensor, pad, reshape, slice_axis, stack

logger = logging.getLogger(__name__)

SYNTH_KINDS = ("panning_texture", "moving_shapes", "static")

# community convention for the blur-downsample track
BD_SIGMA = 1.6


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DegradationParams:
    """Blur sigma (0 disables blur), integer downscale factor and noise sigma in [0, 1] units."""

    blur_sigma: float = 0.0
    scale: int = 4
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.scale, bool) or not isinstance(self.scale, int) or self.scale < 1:
            raise ConfigError(f"scale must be an integer >= 1, got {self.scale!r}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError(
                f"sigmas must be non-negative, got blur {self.blur_sigma}, noise {self.noise_sigma}"
            )
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    @classmethod
    def track(cls, name: str, *, scale: int = 4, seed: int = 0) -> DegradationParams:
        """``bi``: bicubic downsampling only. ``bd``: Gaussian blur (sigma 1.6) then downsampling."""
        if name == "bi":
            return cls(0.0, scale, 0.0, seed)
        if name == "bd":
            return cls(BD_SIGMA, scale, 0.0, seed)
        raise ConfigError(f"Unknown degradation track '{name}'. Supported: bi, bd")


@dataclass(frozen=True)
class VideoClip:
    """Frames ``[T, c, H, W]`` in [0, 1].

    ``first_target`` is the index, in the source clip, of frame 0; restored
    clips start at the first window's target.

    ``source_extents`` is the HR size a degraded clip was made from, before
    padding to a multiple of the scale.
    """

    frames: Tensor
    frame_rate: float = 25.0
    first_target: int = 0
    source_extents: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.frames.ndim != 4:
            raise ShapeError(f"a clip is [T, c, H, W], got {list(self.frames.shape)}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def extents(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def frame(self, t: int) -> Tensor:
        _, c, h, w = self.frames.shape
        return reshape(slice_axis(self.frames, 0, t, t + 1), (c, h, w))

    def frame_list(self) -> list[np.ndarray]:
        return list(self.frames.numpy())


def map_frames(
    fn: Callable[[np.ndarray, int], np.ndarray], frames: Sequence[np.ndarray], workers: int = 1
) -> list[np.ndarray]:
    """Apply ``fn(frame, index)`` to every frame, in order, on up to *workers* threads."""
    if workers <= 1 or len(frames) <= 1:
        return [fn(f, t) for t, f in enumerate(frames)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, frames, range(len(frames))))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1D Gaussian with radius ``ceil(3 * sigma)``."""
    if sigma < 0:
        raise ConfigError(f"blur sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian over the two trailing axes with mirror boundaries."""
    kernel = gaussian_kernel(sigma)
    if kernel.size == 1:
        return x
    # scipy's "mirror" excludes the edge sample, the same reflection as tensor.pad
    out = ndimage.correlate1d(x.numpy().astype(np.float64), kernel, axis=-1, mode="mirror")
    out = ndimage.correlate1d(out, kernel, axis=-2, mode="mirror")
    return Tensor(out, dtype=x.dtype)


def bicubic_resample(x: Tensor, out_h: int, out_w: int, *, antialias: bool = True) -> Tensor:
    """Catmull-Rom resampling of the two trailing axes.

    Antialiased by default: when downscaling, the kernel is widened by the
    inverse scale so every HR pixel contributes, the convention of MATLAB
    ``imresize``. ``antialias=False`` gives plain four-tap Catmull-Rom.
    Upscaling is plain Catmull-Rom either way.
    """
    return resize(x, out_h, out_w, "bicubic", antialias=antialias)


def add_noise(x: Tensor, noise_sigma: float, seed: int, *, stream: str = "noise") -> Tensor:
    """Add i.i.d. Gaussian noise and clamp to [0, 1]; deterministic per ``(seed, stream)``."""
    if noise_sigma < 0:
        raise ConfigError(f"noise sigma must be non-negative, got {noise_sigma}")
    if noise_sigma == 0:
        return x
    noise = Rng(seed, ("noise", stream)).normal(x.shape, noise_sigma)
    return Tensor(np.clip(x.numpy() + noise, 0.0, 1.0), dtype=x.dtype)


def pad_to_multiple(x: Tensor, multiple: int) -> Tensor:
    """Reflect-pad the two trailing axes up to a multiple of *multiple*."""
    h, w = x.shape[-2:]
    extra_h, extra_w = -h % multiple, -w % multiple
    if not extra_h and not extra_w:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, extra_h), (0, extra_w)]
    return pad(x, widths, "reflect")


def degrade_frame(x: Tensor, p: DegradationParams, stream: str = "frame") -> Tensor:
    """Blur, then bicubic downscale by ``p.scale``, then noise."""
    x = pad_to_multiple(x, p.scale)
    h, w = x.shape[-2:]
    out = gaussian_blur(x, p.blur_sigma)
    if p.scale > 1:
        out = bicubic_resample(out, h // p.scale, w // p.scale)
    return add_noise(out, p.noise_sigma, p.seed, stream=stream)


def degrade_clip(hr: VideoClip, p: DegradationParams, *, workers: int = 1) -> VideoClip:
    """Degrade every frame; frame ``t`` draws noise from its own stream."""
    h, w = hr.extents
    if h % p.scale or w % p.scale:
        logger.info("Reflect-padding %dx%d frames to a multiple of %d", h, w, p.scale)

    def run(frame: np.ndarray, t: int) -> np.ndarray:
        return degrade_frame(Tensor(frame), p, stream=f"frame{t}").numpy()

    frames = map_frames(run, hr.frame_list(), workers)
    logger.debug("Degraded %d frames with %s", len(frames), p)
    return VideoClip(Tensor(np.stack(frames), dtype=hr.frames.dtype), hr.frame_rate, hr.first_target, hr.extents)


# ---------------------------------------------------------------------------
# Synthetic clips
# ---------------------------------------------------------------------------


def _texture(rng: Rng, c: int, h: int, w: int) -> np.ndarray:
    raw = rng.uniform((c, h, w))
    smooth = ndimage.gaussian_filter(raw, sigma=(0, 1.2, 1.2), mode="wrap")
    lo = smooth.min(axis=(1, 2), keepdims=True)
    hi = smooth.max(axis=(1, 2), keepdims=True)
    return 0.05 + 0.9 * (smooth - lo) / np.maximum(hi - lo, 1e-12)


def _panning(rng: Rng, t_len: int, c: int, h: int, w: int, motion: float) -> np.ndarray:
    travel = abs(motion) * (t_len - 1)
    width = w + math.ceil(travel) + 2
    texture = _texture(rng.split("texture"), c, h, width)
    start = travel if motion < 0 else 0.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = np.empty((t_len, c, h, w))
    for t in range(t_len):
        shifted = cols + start + t * motion
        for ch in range(c):
            frames[t, ch] = ndimage.map_coordinates(texture[ch], [rows, shifted], order=1, mode="nearest")
    return frames


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel ``[i, i + 1)`` covered by ``[lo, hi)``."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(i + 1, hi) - np.maximum(i, lo), 0.0, 1.0)


def _moving_shapes(rng: Rng, t_len: int, c: int, h: int, w: int, motion: float) -> np.ndarray:
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = 0.2 + 0.3 * (rows / max(h - 1, 1))
    background = np.stack([ramp * (0.6 + 0.4 * ch / max(c, 1)) for ch in range(c)])

    shapes = []
    gen = rng.split("shapes")
    for k in range(3):
        size = gen.uniform((1,), 0.15, 0.35)[0] * min(h, w)
        angle = gen.uniform((1,), 0.0, 2.0 * math.pi)[0]
        shapes.append(
            {
                "disk": k % 2 == 1,
                "y": gen.uniform((1,), 0.2, 0.8)[0] * h,
                "x": gen.uniform((1,), 0.2, 0.8)[0] * w,
                "size": size,
                "vy": motion * math.sin(angle),
                "vx": motion * math.cos(angle),
                "color": gen.uniform((c,), 0.1, 1.0),
            }
        )

    frames = np.empty((t_len, c, h, w))
    for t in range(t_len):
        img = background.copy()
        for s in shapes:
            cy, cx = s["y"] + t * s["vy"], s["x"] + t * s["vx"]
            half = s["size"] / 2.0
            if s["disk"]:
                dist = np.hypot(rows + 0.5 - cy, cols + 0.5 - cx)
                alpha = np.clip(half - dist + 0.5, 0.0, 1.0)
            else:
                alpha = np.outer(_coverage_1d(cy - half, cy + half, h), _coverage_1d(cx - half, cx + half, w))
            img = img * (1.0 - alpha) + s["color"][:, None, None] * alpha
        frames[t] = img
    return frames


def synth_clip(
    kind: str,
    frames: int,
    channels: int,
    height: int,
    width: int,
    motion: float = 1.0,
    seed: int = 0,
    *,
    frame_rate: float = 25.0,
) -> VideoClip:
    """Procedural HR clip with known motion of *motion* pixels per frame."""
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"Unknown clip kind '{kind}'. Supported: {', '.join(SYNTH_KINDS)}")
    if min(frames, channels, height, width) < 1:
        raise ShapeError(f"clip extents must be positive, got T={frames} c={channels} {height}x{width}")
    rng = Rng(seed, ("synth", kind))
    if kind == "static":
        one = _texture(rng.split("texture"), channels, height, width)
        data = np.repeat(one[None], frames, axis=0)
    elif kind == "panning_texture":
        data = _panning(rng, frames, channels, height, width, motion)
    else:
        data = _moving_shapes(rng, frames, channels, height, width, motion)
    return VideoClip(Tensor(np.clip(data, 0.0, 1.0), dtype="float32"), frame_rate)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def make_windows(clip: VideoClip, radius: int, mode: str = "center") -> list[VideoWindow]:
    """Stride-1 windows of ``2N + 1`` frames, each ``[2N+1, 1, c, h, w]``.

    Window ``k`` restores clip frame ``k + window.reference``.
    """
    if mode not in ("center", "causal"):
        raise ConfigError(f"Unknown window mode '{mode}'. Supported: center, causal")
    width = 2 * radius + 1
    if len(clip) < width:
        raise ShapeError(f"clip of {len(clip)} frames is shorter than the {width}-frame window")
    make = VideoWindow.center if mode == "center" else VideoWindow.causal
    _, c, h, w = clip.frames.shape
    windows = []
    for k in range(len(clip) - width + 1):
        chunk = slice_axis(clip.frames, 0, k, k + width)
        windows.append(make(reshape(chunk, (width, 1, c, h, w))))
    return windows


def batch_clips(clips: Sequence[VideoClip]) -> Tensor:
    """Stack equally shaped clips into one ``[T, b, c, h, w]`` sequence."""
    shapes = {clip.frames.shape for clip in clips}
    if len(shapes) != 1:
        raise ShapeError(f"clips in one batch must share a shape, got {sorted(shapes)}")
    return stack([clip.frames for clip in clips], axis=1)
