"""Differentiable building blocks: convolutions, normalisation, sampling, resizing.

Layouts are channels-first. Convolutions take ``[B, C, *spatial]`` (the batch
axis may be omitted) and compute cross-correlation with zero "same" padding.
Every kernel is composed from :mod:`rcdm.tensor` operations or records its own
backward rule, so all of them work with :func:`rcdm.tensor.backward`.
"""

from __future__ import annotations

import functools
import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from rcdm.errors import ConfigError, NumericError, ShapeError
from rcdm.tensor import (
    Tensor,
    einsum,
    pad,
    record,
    reshape,
    slice_axis,
    transpose,
)

_SPATIAL = {2: "hw", 3: "dhw"}
_TAPS = {2: "qr", 3: "pqr"}


# ---------------------------------------------------------------------------
# Convolution configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of a 2D or 3D convolution with "same" zero padding."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...] | int = 1
    groups: int = 1
    bias: bool = True

    def __post_init__(self) -> None:
        kernel = tuple(int(k) for k in self.kernel)
        if len(kernel) not in _SPATIAL:
            raise ShapeError(f"Only 2D and 3D kernels are supported, got {list(kernel)}")
        if any(k < 1 or k % 2 == 0 for k in kernel):
            raise ShapeError(f"Kernel extents must be odd and positive, got {list(kernel)}")
        stride = (self.stride,) * len(kernel) if isinstance(self.stride, int) else self.stride
        stride = tuple(int(s) for s in stride)
        if len(stride) != len(kernel) or any(s < 1 for s in stride):
            raise ShapeError(f"Stride {list(stride)} does not fit kernel {list(kernel)}")
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ShapeError("Channel counts and groups must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "stride", stride)

    @classmethod
    def from_weight(cls, w: Tensor, *, groups: int = 1, bias: bool = True) -> ConvSpec:
        return cls(w.shape[1] * groups, w.shape[0], tuple(w.shape[2:]), 1, groups, bias)

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    @property
    def padding(self) -> tuple[int, ...]:
        return tuple((k - 1) // 2 for k in self.kernel)

    @property
    def taps(self) -> int:
        return math.prod(self.kernel)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def param_count(self) -> int:
        count = self.out_channels * (self.in_channels // self.groups) * self.taps
        return count + (self.out_channels if self.bias else 0)

    def output_extents(self, extents: Sequence[int]) -> tuple[int, ...]:
        return tuple(
            (n + 2 * p - k) // s + 1
            for n, p, k, s in zip(extents, self.padding, self.kernel, self.stride)  # type: ignore[arg-type]
        )


def _batched(x: Tensor, nd: int, what: str) -> tuple[Tensor, bool]:
    if x.ndim == nd + 1:
        return reshape(x, (1, *x.shape)), True
    if x.ndim != nd + 2:
        raise ShapeError(f"{what} expects [B, C, {nd} spatial] or [C, {nd} spatial], got {list(x.shape)}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec, what: str) -> None:
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"{what}: input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"{what}: weight shape {list(w.shape)} != {list(spec.weight_shape)}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"{what}: bias shape {list(b.shape)} != [{spec.out_channels}]")
    if b is not None and not spec.bias:
        raise ShapeError(f"{what}: spec has no bias but a bias tensor was given")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def unfold(x: Tensor, kernel: Sequence[int], stride: Sequence[int]) -> Tensor:
    """Gather sliding windows over the trailing ``len(kernel)`` axes.

    ``[..., *S] -> [..., *S_out, *kernel]`` with no padding.
    """
    nd = len(kernel)
    axes = tuple(range(x.ndim - nd, x.ndim))
    if any(x.shape[ax] < k for ax, k in zip(axes, kernel)):
        raise ShapeError(f"unfold: extents {list(x.shape[-nd:])} smaller than kernel {list(kernel)}")
    windows = sliding_window_view(x.data, tuple(kernel), axis=axes)
    strided = (Ellipsis, *(slice(None, None, s) for s in stride), *(slice(None),) * nd)
    cols = np.ascontiguousarray(windows[strided])
    out_extents = cols.shape[x.ndim - nd : x.ndim]

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        gx = np.zeros(x.shape, dtype=g.dtype)
        for tap in np.ndindex(*kernel):
            region = tuple(
                slice(k, k + s * (n - 1) + 1, s) for k, s, n in zip(tap, stride, out_extents)
            )
            gx[(Ellipsis, *region)] += g[(Ellipsis, *tap)]
        return (gx,)

    return record(cols, (x,), backward_fn)


def bias_add(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a per-channel bias ``b[C]`` along *axis* of *x*."""
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeError(f"bias of shape {list(b.shape)} does not fit axis {axis} of {list(x.shape)}")
    view = [1] * x.ndim
    view[axis] = b.shape[0]
    others = tuple(ax for ax in range(x.ndim) if ax != axis % x.ndim)
    return record(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


def _conv(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec, what: str) -> Tensor:
    nd = spec.ndim
    x, squeeze = _batched(x, nd, what)
    _check_conv_args(x, w, b, spec, what)
    batch = x.shape[0]
    g = spec.groups

    widths = [(0, 0), (0, 0), *((p, p) for p in spec.padding)]
    cols = unfold(pad(x, widths, "zero"), spec.kernel, spec.stride)
    out_extents = cols.shape[2 : 2 + nd]
    cols = reshape(cols, (batch, g, spec.in_channels // g, *out_extents, *spec.kernel))
    kernel = reshape(w, (g, spec.out_channels // g, spec.in_channels // g, *spec.kernel))

    sp, tp = _SPATIAL[nd], _TAPS[nd]
    out = einsum(f"ngc{sp}{tp},goc{tp}->ngo{sp}", cols, kernel)
    out = reshape(out, (batch, spec.out_channels, *out_extents))
    if b is not None:
        out = bias_add(out, b)
    return _unbatched(out, squeeze)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """2D cross-correlation with zero "same" padding, ``groups`` and ``stride`` from *spec*."""
    spec = spec or ConvSpec.from_weight(w, bias=b is not None)
    if spec.ndim != 2:
        raise ShapeError(f"conv2d needs a 2D kernel, got {list(spec.kernel)}")
    return _conv(x, w, b, spec, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """3D cross-correlation over ``[B, C, T, H, W]`` with zero "same" padding."""
    spec = spec or ConvSpec.from_weight(w, bias=b is not None)
    if spec.ndim != 3:
        raise ShapeError(f"conv3d needs a 3D kernel, got {list(spec.kernel)}")
    return _conv(x, w, b, spec, "conv3d")


# ---------------------------------------------------------------------------
# Normalisation and activation
# ---------------------------------------------------------------------------


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, axis: int = -1
) -> Tensor:
    """Normalise over the channel *axis*: ``(x - mean) / sqrt(var + eps) * gamma + beta``."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    axis %= x.ndim
    channels = x.shape[axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"layer_norm: gamma {list(gamma.shape)} / beta {list(beta.shape)} "
            f"do not match {channels} channels"
        )
    view = [1] * x.ndim
    view[axis] = channels
    others = tuple(ax for ax in range(x.ndim) if ax != axis)

    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv_std
    g_view = gamma.data.reshape(view)
    out = xhat * g_view + beta.data.reshape(view)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gxhat = g * g_view
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return record(out.astype(x.data.dtype), (x, gamma, beta), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    out = (x.data * cdf).astype(x.data.dtype)
    return record(out, (x,), lambda g: (g * (cdf + x.data * pdf),))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def grid_sample(x: Tensor, coords: Sequence[Tensor]) -> Tensor:
    """Sample ``x[B, C, *S]`` at real positions with N-linear interpolation.

    *coords* holds one ``[B, *P]`` tensor per spatial axis. Neighbours that
    fall outside the grid contribute zero. Differentiable with respect to
    both *x* and the coordinates.
    """
    nd = len(coords)
    if x.ndim != nd + 2:
        raise ShapeError(f"grid_sample: {nd} coordinate tensors for input {list(x.shape)}")
    batch, channels, extents = x.shape[0], x.shape[1], x.shape[2:]
    point_shape = coords[0].shape
    for c in coords:
        if c.shape != point_shape or c.shape[0] != batch:
            raise ShapeError("grid_sample: coordinate tensors must share a [B, *P] shape")
        if not np.all(np.isfinite(c.data)):
            raise NumericError("grid_sample: non-finite sampling position")

    n_points = math.prod(point_shape[1:])
    pos = [c.data.reshape(batch, n_points).astype(np.float64) for c in coords]
    floor = [np.floor(p) for p in pos]
    frac = [p - f for p, f in zip(pos, floor)]
    base = [f.astype(np.int64) for f in floor]
    strides = [math.prod(extents[d + 1 :]) for d in range(nd)]
    flat = x.data.reshape(batch, channels, -1)

    corners = []
    out = np.zeros((batch, channels, n_points), dtype=np.float64)
    for bits in itertools.product((0, 1), repeat=nd):
        idx = [b + bit for b, bit in zip(base, bits)]
        valid = np.ones((batch, n_points), dtype=bool)
        for d in range(nd):
            valid &= (idx[d] >= 0) & (idx[d] < extents[d])
        axis_w = [frac[d] if bits[d] else 1.0 - frac[d] for d in range(nd)]
        weight = np.prod(axis_w, axis=0) * valid
        lin = sum(np.clip(idx[d], 0, extents[d] - 1) * strides[d] for d in range(nd))
        gather = np.broadcast_to(lin[:, None, :], (batch, channels, n_points))
        vals = np.take_along_axis(flat, gather, axis=2)
        out += vals * weight[:, None, :]
        corners.append((bits, lin, valid, axis_w, vals, weight))

    def backward_fn(g: np.ndarray) -> list[np.ndarray | None]:
        g = g.reshape(batch, channels, n_points)
        gx = np.zeros_like(flat, dtype=np.float64)
        gpos = [np.zeros((batch, n_points)) for _ in range(nd)]
        for bits, lin, valid, axis_w, vals, weight in corners:
            contrib = g * weight[:, None, :]
            for b in range(batch):
                np.add.at(gx[b], (slice(None), lin[b]), contrib[b])
            dot = (g * vals).sum(axis=1) * valid
            for d in range(nd):
                others = [axis_w[e] for e in range(nd) if e != d]
                partial = np.prod(others, axis=0) if others else 1.0
                gpos[d] += dot * partial * (1.0 if bits[d] else -1.0)
        grads: list[np.ndarray | None] = [gx.reshape(x.shape).astype(x.data.dtype)]
        grads += [gp.reshape(point_shape).astype(c.data.dtype) for gp, c in zip(gpos, coords)]
        return grads

    result = out.reshape(batch, channels, *point_shape[1:]).astype(x.data.dtype)
    return record(result, (x, *coords), backward_fn)


def bilinear_sample(x: Tensor, points: Tensor) -> Tensor:
    """Sample ``x[C, H, W]`` at ``points[P, 2]`` given as ``(y, x)`` rows; returns ``[C, P]``."""
    if x.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects [C,H,W] and [P,2], got {list(x.shape)}, {list(points.shape)}")
    n = points.shape[0]
    ys = reshape(slice_axis(points, 1, 0, 1), (1, n))
    xs = reshape(slice_axis(points, 1, 1, 2), (1, n))
    out = grid_sample(reshape(x, (1, *x.shape)), [ys, xs])
    return reshape(out, (x.shape[0], n))


# ---------------------------------------------------------------------------
# Deformable convolution
# ---------------------------------------------------------------------------


def _tap_grid(spec: ConvSpec, out_extents: Sequence[int]) -> np.ndarray:
    """Undeformed sampling position of every tap at every output location: ``[nd, K, *S_out]``."""
    nd = spec.ndim
    grid = np.zeros((nd, spec.taps, *out_extents))
    for k, tap in enumerate(np.ndindex(*spec.kernel)):
        for d in range(nd):
            view = [1] * nd
            view[d] = out_extents[d]
            line = np.arange(out_extents[d]) * spec.stride[d] - spec.padding[d] + tap[d]  # type: ignore[index]
            grid[d, k] = np.broadcast_to(line.reshape(view), tuple(out_extents))
    return grid


def _deformable(
    x: Tensor, w: Tensor, b: Tensor | None, offsets: Tensor, spec: ConvSpec, what: str
) -> Tensor:
    nd = spec.ndim
    x, squeeze = _batched(x, nd, what)
    if offsets.ndim == nd + 1:
        offsets = reshape(offsets, (1, *offsets.shape))
    _check_conv_args(x, w, b, spec, what)
    if spec.groups != 1:
        raise ShapeError(f"{what}: grouped deformable convolution is not supported")

    batch = x.shape[0]
    out_extents = spec.output_extents(x.shape[2:])
    expected = (batch, nd * spec.taps, *out_extents)
    if offsets.shape != expected:
        raise ShapeError(f"{what}: offsets shape {list(offsets.shape)} != {list(expected)}")

    # channel 2k+d (or 3k+d) holds the displacement of tap k along spatial axis d
    split = reshape(offsets, (batch, spec.taps, nd, *out_extents))
    grid = _tap_grid(spec, out_extents)
    coords = []
    for d in range(nd):
        shift = reshape(slice_axis(split, 2, d, d + 1), (batch, spec.taps, *out_extents))
        base = Tensor(np.broadcast_to(grid[d], shift.shape), dtype=shift.dtype)
        coords.append(shift + base)

    sampled = grid_sample(x, coords)
    kernel = reshape(w, (spec.out_channels, spec.in_channels, spec.taps))
    sp = _SPATIAL[nd]
    out = einsum(f"nck{sp},ock->no{sp}", sampled, kernel)
    if b is not None:
        out = bias_add(out, b)
    return _unbatched(out, squeeze)


def deformable_conv2d(
    x: Tensor, w: Tensor, b: Tensor | None, offsets: Tensor, spec: ConvSpec | None = None
) -> Tensor:
    """Convolution whose taps sample ``x`` at their grid position plus a learned ``(dy, dx)``.

    *offsets* is ``[B, 2*K, H_out, W_out]`` with interleaved ``(dy, dx)`` pairs per tap.
    With all-zero offsets the result equals :func:`conv2d`.
    """
    spec = spec or ConvSpec.from_weight(w, bias=b is not None)
    if spec.ndim != 2:
        raise ShapeError(f"deformable_conv2d needs a 2D kernel, got {list(spec.kernel)}")
    return _deformable(x, w, b, offsets, spec, "deformable_conv2d")


def deformable_conv3d(
    x: Tensor, w: Tensor, b: Tensor | None, offsets: Tensor, spec: ConvSpec | None = None
) -> Tensor:
    """Trilinear counterpart of :func:`deformable_conv2d` with ``(dt, dy, dx)`` triples."""
    spec = spec or ConvSpec.from_weight(w, bias=b is not None)
    if spec.ndim != 3:
        raise ShapeError(f"deformable_conv3d needs a 3D kernel, got {list(spec.kernel)}")
    return _deformable(x, w, b, offsets, spec, "deformable_conv3d")


# ---------------------------------------------------------------------------
# Pixel shuffle
# ---------------------------------------------------------------------------


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``[B, C*r*r, H, W] -> [B, C, r*H, r*W]``; ``out[c, r*i+a, r*j+b] = in[c*r*r + a*r + b, i, j]``."""
    x, squeeze = _batched(x, 2, "pixel_shuffle")
    batch, channels, h, w = x.shape
    if r < 1 or channels % (r * r):
        raise ShapeError(f"pixel_shuffle: {channels} channels not divisible by r^2 = {r * r}")
    c = channels // (r * r)
    out = reshape(x, (batch, c, r, r, h, w))
    out = transpose(out, (0, 1, 4, 2, 5, 3))
    return _unbatched(reshape(out, (batch, c, h * r, w * r)), squeeze)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse permutation of :func:`pixel_shuffle`."""
    x, squeeze = _batched(x, 2, "pixel_unshuffle")
    batch, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: extents {hr}x{wr} not divisible by r = {r}")
    out = reshape(x, (batch, c, hr // r, r, wr // r, r))
    out = transpose(out, (0, 1, 3, 5, 2, 4))
    return _unbatched(reshape(out, (batch, c * r * r, hr // r, wr // r)), squeeze)


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------


def _triangle(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


def _catmull_rom(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    far = ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


_KERNELS = {"bilinear": (_triangle, 1.0), "bicubic": (_catmull_rom, 2.0)}


@functools.lru_cache(maxsize=64)
def interpolation_matrix(
    n_in: int, n_out: int, kernel: str = "bicubic", antialias: bool = False
) -> np.ndarray:
    """``[n_out, n_in]`` resampling matrix with half-pixel centres and clamped edges.

    Output sample ``d`` sits at source coordinate ``(d + 0.5) / scale - 0.5``.
    With *antialias* and ``scale < 1`` the kernel is stretched by ``1 / scale``.
    Rows sum to one.
    """
    if kernel not in _KERNELS:
        raise ConfigError(f"Unknown interpolation kernel '{kernel}'. Supported: bilinear, bicubic")
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"Resampling needs positive extents, got {n_in} -> {n_out}")
    fn, support = _KERNELS[kernel]
    scale = n_out / n_in
    stretch = 1.0 / scale if antialias and scale < 1.0 else 1.0

    matrix = np.zeros((n_out, n_in))
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    reach = int(math.ceil(support * stretch)) + 1
    for d, s in enumerate(centers):
        taps = np.arange(math.floor(s) - reach, math.floor(s) + reach + 1)
        weights = fn((s - taps) / stretch)
        np.add.at(matrix[d], np.clip(taps, 0, n_in - 1), weights)
        matrix[d] /= matrix[d].sum()
    matrix.setflags(write=False)
    return matrix


def resize(
    x: Tensor, out_h: int, out_w: int, kernel: str = "bicubic", *, antialias: bool = False
) -> Tensor:
    """Separable resampling of the two trailing axes of *x*."""
    if x.ndim < 2:
        raise ShapeError(f"resize needs at least 2 axes, got {list(x.shape)}")
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    rows = Tensor(interpolation_matrix(h, out_h, kernel, antialias), dtype=x.dtype)
    cols = Tensor(interpolation_matrix(w, out_w, kernel, antialias), dtype=x.dtype)
    flat = reshape(x, (math.prod(lead), h, w))
    out = einsum("nhw,yh->nyw", flat, rows)
    out = einsum("nyw,xw->nyx", out, cols)
    return reshape(out, (*lead, out_h, out_w))


def upsample_bilinear(x: Tensor, r: int) -> Tensor:
    """Bilinear ``r``-times upsampling of the two trailing axes."""
    if int(r) != r or r < 1:
        raise ShapeError(f"upsample_bilinear needs an integer factor >= 1, got {r}")
    return resize(x, x.shape[-2] * r, x.shape[-1] * r, "bilinear")
