"""Single-level orthonormal Haar transform over the two trailing axes.

For each 2x2 block ``[a b; c d]``::

    ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2

The block matrix is symmetric and orthonormal, so the inverse applies the
same matrix again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rcdm.errors import ShapeError
from rcdm.tensor import Tensor, concat, einsum, reshape, slice_axis, transpose

BANDS = ("ll", "lh", "hl", "hh")

HAAR = 0.5 * np.array(
    [
        [1.0, 1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0, -1.0],
        [1.0, 1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0, 1.0],
    ]
)


@dataclass(frozen=True)
class SubBands:
    """Approximation and detail bands, each ``[..., C, H/2, W/2]``."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def __post_init__(self) -> None:
        shapes = {band.shape for band in self.bands()}
        if len(shapes) != 1:
            raise ShapeError(f"sub-bands disagree on shape: {sorted(shapes)}")

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ll.shape

    def stacked(self) -> Tensor:
        """``[..., 4C, h, w]`` with the four bands of channel ``c`` at ``4c .. 4c+3``."""
        lead, (c, h, w) = self.shape[:-3], self.shape[-3:]
        expanded = [reshape(band, (*lead, c, 1, h, w)) for band in self.bands()]
        return reshape(concat(expanded, axis=len(lead) + 1), (*lead, 4 * c, h, w))

    @classmethod
    def from_stacked(cls, s: Tensor) -> SubBands:
        if s.ndim < 3 or s.shape[-3] % 4:
            raise ShapeError(f"stacked sub-bands need a channel count divisible by 4, got {list(s.shape)}")
        lead, (c4, h, w) = s.shape[:-3], s.shape[-3:]
        grouped = reshape(s, (*lead, c4 // 4, 4, h, w))
        axis = len(lead) + 1
        bands = [
            reshape(slice_axis(grouped, axis, k, k + 1), (*lead, c4 // 4, h, w)) for k in range(4)
        ]
        return cls(*bands)


def _blocks(x: Tensor) -> Tensor:
    """``[N, H, W] -> [N, H/2, W/2, 4]`` with block entries ordered a, b, c, d."""
    n, h, w = x.shape
    out = reshape(x, (n, h // 2, 2, w // 2, 2))
    out = transpose(out, (0, 1, 3, 2, 4))
    return reshape(out, (n, h // 2, w // 2, 4))


def dwt2d_stacked(x: Tensor) -> Tensor:
    """Haar analysis of ``[..., C, H, W]`` into the stacked ``[..., 4C, H/2, W/2]`` layout."""
    if x.ndim < 3:
        raise ShapeError(f"dwt2d expects [..., C, H, W], got {list(x.shape)}")
    lead, (c, h, w) = x.shape[:-3], x.shape[-3:]
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2d needs even extents, got {h}x{w}; pad to even first")
    flat = reshape(x, (int(np.prod(lead, dtype=int)) * c, h, w))
    matrix = Tensor(HAAR, dtype=x.dtype)
    coeffs = einsum("nhwk,jk->njhw", _blocks(flat), matrix)
    return reshape(coeffs, (*lead, 4 * c, h // 2, w // 2))


def idwt2d_stacked(s: Tensor) -> Tensor:
    """Exact inverse of :func:`dwt2d_stacked`."""
    if s.ndim < 3 or s.shape[-3] % 4:
        raise ShapeError(f"idwt2d expects [..., 4C, h, w], got {list(s.shape)}")
    lead, (c4, h, w) = s.shape[:-3], s.shape[-3:]
    n = int(np.prod(lead, dtype=int)) * (c4 // 4)
    coeffs = reshape(s, (n, 4, h, w))
    matrix = Tensor(HAAR, dtype=s.dtype)
    blocks = einsum("njhw,jk->nhwk", coeffs, matrix)
    out = reshape(blocks, (n, h, w, 2, 2))
    out = transpose(out, (0, 1, 3, 2, 4))
    return reshape(out, (*lead, c4 // 4, 2 * h, 2 * w))


def dwt2d(x: Tensor) -> SubBands:
    """Haar analysis of ``[..., C, H, W]``; odd extents raise :class:`ShapeError`."""
    return SubBands.from_stacked(dwt2d_stacked(x))


def idwt2d(s: SubBands) -> Tensor:
    """Reconstruct ``[..., C, 2h, 2w]`` from its sub-bands."""
    return idwt2d_stacked(s.stacked())
