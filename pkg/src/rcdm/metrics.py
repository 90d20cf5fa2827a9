"""PSNR and SSIM, plus per-frame clip evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import signal

from rcdm.degradation import VideoClip, map_frames
from rcdm.errors import ConfigError, ShapeError
from rcdm.tensor import Tensor

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRICS = ("ssim", "psnr")


def _array(x: Tensor | np.ndarray) -> np.ndarray:
    return np.asarray(x.numpy() if isinstance(x, Tensor) else x, dtype=np.float64)


def crop_border(x: Tensor | np.ndarray, border: int) -> np.ndarray:
    """Drop *border* pixels from each side of the two trailing axes."""
    data = _array(x)
    if border < 0:
        raise ConfigError(f"crop border must be non-negative, got {border}")
    if border == 0:
        return data
    h, w = data.shape[-2:]
    if 2 * border >= min(h, w):
        raise ShapeError(f"cannot crop {border} pixels from a {h}x{w} image")
    return data[..., border : h - border, border : w - border]


def psnr(a: Tensor | np.ndarray, b: Tensor | np.ndarray, peak: float = 1.0) -> float:
    """``10 * log10(peak^2 / MSE)``; identical inputs give ``math.inf``."""
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {list(x.shape)} and {list(y.shape)} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-position SSIM of two ``[H, W]`` images over the valid region."""
    window = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(img: np.ndarray) -> np.ndarray:
        return signal.correlate(img, window, mode="valid", method="direct")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: Tensor | np.ndarray, b: Tensor | np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over channels and valid window positions of ``[c, H, W]`` (or ``[H, W]``) images."""
    x, y = _array(a), _array(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {list(x.shape)} and {list(y.shape)} differ")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ShapeError(f"ssim expects [c, H, W] or [H, W], got {list(x.shape)}")
    if min(x.shape[1:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {list(x.shape[1:])}")
    maps = [ssim_map(x[c], y[c], data_range) for c in range(x.shape[0])]
    return float(np.mean(maps))


# ---------------------------------------------------------------------------
# Clip evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameScore:
    frame: int
    ssim: float | None = None
    psnr: float | None = None


def _format(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def aligned_pairs(ref: VideoClip, test: VideoClip) -> list[tuple[int, int]]:
    """``(ref index, test index)`` pairs, using ``test.first_target`` as the offset into *ref*."""
    if ref.frames.shape[1:] != test.frames.shape[1:]:
        raise ShapeError(
            f"reference frames {list(ref.frames.shape[1:])} and test frames "
            f"{list(test.frames.shape[1:])} differ in size"
        )
    start = test.first_target - ref.first_target
    if start < 0 or start + len(test) > len(ref):
        raise ShapeError(
            f"test clip covers frames {test.first_target}..{test.first_target + len(test) - 1}, "
            f"outside the reference clip"
        )
    return [(start + i, i) for i in range(len(test))]


def evaluate_clip(
    ref: VideoClip,
    test: VideoClip,
    metrics: Sequence[str] = METRICS,
    crop: int = 0,
    *,
    workers: int = 1,
) -> list[FrameScore]:
    """Score every test frame against its reference frame after cropping *crop* pixels."""
    for name in metrics:
        if name not in METRICS:
            raise ConfigError(f"Unknown metric '{name}'. Supported: {', '.join(METRICS)}")
    pairs = aligned_pairs(ref, test)
    ref_frames, test_frames = ref.frames.numpy(), test.frames.numpy()

    def score(_: object, k: int) -> FrameScore:
        r, t = pairs[k]
        x, y = crop_border(ref_frames[r], crop), crop_border(test_frames[t], crop)
        return FrameScore(
            frame=test.first_target + t,
            ssim=ssim(x, y) if "ssim" in metrics else None,
            psnr=psnr(x, y) if "psnr" in metrics else None,
        )

    scores = map_frames(score, [None] * len(pairs), workers)  # type: ignore[arg-type]
    logger.debug("Evaluated %d frames", len(scores))
    return scores  # type: ignore[return-value]


def mean_score(scores: Sequence[FrameScore]) -> FrameScore:
    def mean(values: list[float | None]) -> float | None:
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else None

    return FrameScore(-1, mean([s.ssim for s in scores]), mean([s.psnr for s in scores]))


def scores_csv(scores: Sequence[FrameScore], metrics: Sequence[str] = METRICS) -> str:
    """``frame,<metrics>`` rows plus a final ``mean`` row."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["frame", *metrics])
    for row in [*scores, mean_score(scores)]:
        label = "mean" if row.frame < 0 else str(row.frame)
        writer.writerow([label, *(_format(getattr(row, m)) for m in metrics)])
    return out.getvalue()


@dataclass(frozen=True)
class AblationRow:
    frame: int
    ssim_full: float
    ssim_baseline: float

    @property
    def ratio(self) -> float:
        return self.ssim_full / self.ssim_baseline if self.ssim_baseline else math.inf


def ablation_rows(
    ref: VideoClip, full: VideoClip, baseline: VideoClip, crop: int = 0, *, workers: int = 1
) -> list[AblationRow]:
    """Per-frame SSIM of a full model over an ablated baseline on the same frames."""
    if full.first_target != baseline.first_target or len(full) != len(baseline):
        raise ShapeError("full and baseline clips must cover the same frames")
    a = evaluate_clip(ref, full, ("ssim",), crop, workers=workers)
    b = evaluate_clip(ref, baseline, ("ssim",), crop, workers=workers)
    return [AblationRow(x.frame, x.ssim or 0.0, y.ssim or 0.0) for x, y in zip(a, b)]


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["frame", "ssim_full", "ssim_baseline", "ratio"])
    for row in rows:
        writer.writerow([row.frame, _format(row.ssim_full), _format(row.ssim_baseline), _format(row.ratio)])
    return out.getvalue()
