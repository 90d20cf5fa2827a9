"""RCDM forward pass: alignment, 3D residual fusion, wavelet branch, memory, reconstruction.

Shapes follow a ``[T, b, c, h, w]`` window convention. ``F`` below is
``config.base_channels``.

Pipeline of one window::

    frames -> features -> deformable alignment -> 3D residual blocks + temporal collapse
           -> wavelet branch -> memory update -> memory injection -> ConvNeXt blocks
           -> conv + pixel shuffle + bicubic upsample of the reference frame
"""

from __future__ import annotations

import functools
import logging
import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from rcdm.config import ModelConfig
from rcdm.errors import ConfigError, ShapeError
from rcdm.kernels import (
    ConvSpec,
    conv2d,
    conv3d,
    deformable_conv2d,
    deformable_conv3d,
    gelu,
    layer_norm,
    pixel_shuffle,
    resize,
    upsample_bilinear,
)
from rcdm.tensor import (
    Rng,
    Tensor,
    cast,
    concat,
    reshape,
    sigmoid,
    slice_axis,
    stack,
    tile,
    transpose,
    zeros,
)
from rcdm.wavelet import dwt2d, dwt2d_stacked, idwt2d_stacked

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoWindow:
    """``2N + 1`` consecutive LR frames ``[T, b, c, h, w]`` and the index of the frame to restore."""

    frames: Tensor
    reference: int

    def __post_init__(self) -> None:
        if self.frames.ndim != 5:
            raise ShapeError(f"a window is [2N+1, b, c, h, w], got {list(self.frames.shape)}")
        if self.frames.shape[0] % 2 == 0:
            raise ShapeError(f"window length must be odd, got {self.frames.shape[0]}")
        if not 0 <= self.reference < self.frames.shape[0]:
            raise ShapeError(f"reference index {self.reference} outside a {self.frames.shape[0]}-frame window")

    @classmethod
    def center(cls, frames: Tensor) -> VideoWindow:
        return cls(frames, frames.shape[0] // 2)

    @classmethod
    def causal(cls, frames: Tensor) -> VideoWindow:
        return cls(frames, frames.shape[0] - 1)

    @property
    def radius(self) -> int:
        return self.frames.shape[0] // 2

    @property
    def batch(self) -> int:
        return self.frames.shape[1]

    @property
    def extents(self) -> tuple[int, int]:
        return self.frames.shape[3], self.frames.shape[4]

    def frame(self, index: int) -> Tensor:
        _, b, c, h, w = self.frames.shape
        return reshape(slice_axis(self.frames, 0, index, index + 1), (b, c, h, w))


@dataclass(frozen=True)
class HRFrame:
    """One restored frame ``[b, c, s*h, s*w]``."""

    image: Tensor

    def __post_init__(self) -> None:
        if self.image.ndim != 4:
            raise ShapeError(f"an HR frame is [b, c, H, W], got {list(self.image.shape)}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.image.shape


@dataclass(frozen=True)
class MemoryState:
    """Recurrent memory ``m`` of shape ``[b, F, h, w]`` (one stream per batch entry).

    ``beta_raw`` is the scalar parameter behind ``beta = sigmoid(beta_raw)``;
    it is ``None`` for models without memory.
    """

    m: Tensor
    beta_raw: Tensor | None = None

    @property
    def beta(self) -> float:
        if self.beta_raw is None:
            raise ConfigError("this memory state has no beta (memory is disabled)")
        return sigmoid(self.beta_raw.detach()).item()

    def stream(self, index: int) -> Tensor:
        """Memory of one batch entry, ``[F, h, w]``."""
        _, f, h, w = self.m.shape
        return reshape(slice_axis(self.m, 0, index, index + 1), (f, h, w))

    def detach(self) -> MemoryState:
        return MemoryState(self.m.detach(), self.beta_raw)


# ---------------------------------------------------------------------------
# Layer table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layer:
    """One parameterised layer: a (deformable) convolution, a channel norm or a scalar."""

    name: str
    kind: str
    conv: ConvSpec | None = None
    channels: int = 0

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind in ("conv", "deform"):
            assert self.conv is not None
            shapes = {f"{self.name}.weight": self.conv.weight_shape}
            if self.conv.bias:
                shapes[f"{self.name}.bias"] = (self.conv.out_channels,)
            return shapes
        if self.kind == "norm":
            return {f"{self.name}.gamma": (self.channels,), f"{self.name}.beta": (self.channels,)}
        return {f"{self.name}.beta_raw": ()}


def _k(n: int, nd: int = 2) -> tuple[int, ...]:
    return (n,) * nd


def layer_specs(config: ModelConfig) -> list[Layer]:
    """Every parameterised layer of *config*, in forward order."""
    f, fw, c = config.base_channels, config.wavelet_channels, config.in_channels
    assert fw is not None
    layers = [Layer("feat.conv_first", "conv", ConvSpec(c, f, _k(3)))]
    for i in range(config.n_feat_blocks or 0):
        for part in ("conv1", "conv2"):
            layers.append(Layer(f"feat.block{i}.{part}", "conv", ConvSpec(f, f, _k(3))))

    if config.temporal_radius > 0:
        if config.early_fusion:
            layers.append(Layer("align.fuse", "conv", ConvSpec(config.window * f, f, _k(1))))
        layers.append(Layer("align.offset1", "conv", ConvSpec(2 * f, f, _k(3))))
        layers.append(Layer("align.offset2", "conv", ConvSpec(f, config.offset_channels, _k(3))))
        nd = 3 if config.deformable_mode == "trilinear_3d" else 2
        layers.append(Layer("align.dcn", "deform", ConvSpec(f, f, _k(3, nd))))

    for i in range(config.n_res3d):
        for part in ("conv1", "conv2"):
            layers.append(Layer(f"res3d.block{i}.{part}", "conv", ConvSpec(f, f, _k(3, 3))))

    if config.use_wavelet:
        width = 4 * f
        for j in range(config.n_wavelet_convs):
            layers.append(Layer(f"wavelet.conv{j}", "conv", ConvSpec(width, 4 * fw, _k(3), groups=4)))
            width = 4 * fw
        layers.append(Layer("wavelet.fuse", "conv", ConvSpec(f + 4 * fw, f, _k(1))))

    if config.use_memory:
        layers.append(Layer("memory", "scalar"))
        inject = 4 * f if config.dwt_state else f
        layers.append(Layer("memory.inject", "conv", ConvSpec(inject, inject, _k(1))))

    hidden = config.convnext_expansion * f
    for i in range(config.n_convnext):
        block = f"recon.convnext{i}"
        layers.append(Layer(f"{block}.dwconv", "conv", ConvSpec(f, f, _k(7), groups=f)))
        layers.append(Layer(f"{block}.norm", "norm", channels=f))
        layers.append(Layer(f"{block}.pw1", "conv", ConvSpec(f, hidden, _k(1))))
        layers.append(Layer(f"{block}.pw2", "conv", ConvSpec(hidden, f, _k(1))))
    layers.append(Layer("recon.conv_up", "conv", ConvSpec(f, c * config.scale**2, _k(3))))
    return layers


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in layer_specs(config):
        shapes.update(layer.param_shapes())
    return shapes


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


class ModelWeights:
    """Named parameter set of one model, validated against its config."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]) -> None:
        expected = expected_shapes(config)
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ShapeError(f"weights do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"'{name}' has shape {list(params[name].shape)}, expected {list(shape)}")
        self.config = config
        self.params: dict[str, Tensor] = {name: params[name] for name in expected}

    @functools.cached_property
    def layers(self) -> dict[str, Layer]:
        return {layer.name: layer for layer in layer_specs(self.config)}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def with_params(self, params: Mapping[str, Tensor]) -> ModelWeights:
        """Copy with some parameters replaced."""
        merged = dict(self.params)
        merged.update(params)
        return ModelWeights(self.config, merged)

    def trainable(self) -> ModelWeights:
        """Fresh leaves that record gradients."""
        return ModelWeights(
            self.config, {n: Tensor(t.data, requires_grad=True) for n, t in self.params.items()}
        )

    def detach(self) -> ModelWeights:
        return ModelWeights(self.config, {n: t.detach() for n, t in self.params.items()})

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def __repr__(self) -> str:
        return f"ModelWeights(variant={self.config.variant}, tensors={len(self)}, params={self.param_count})"


def build_model(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Initialise weights: uniform(+-1/sqrt(fan_in)) kernels, zero biases, unit norms, beta_raw 0."""
    rng = Rng(seed, ("init",))
    params: dict[str, Tensor] = {}
    for layer in layer_specs(config):
        for name, shape in layer.param_shapes().items():
            if name.endswith(".weight"):
                assert layer.conv is not None
                fan_in = (layer.conv.in_channels // layer.conv.groups) * layer.conv.taps
                bound = 1.0 / math.sqrt(fan_in)
                data = rng.split(name).uniform(shape, -bound, bound, dtype=config.dtype)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, dtype=config.dtype)
    weights = ModelWeights(config, params)
    logger.debug("Built %r with seed %d", weights, seed)
    return weights


def zero_weights(config: ModelConfig) -> ModelWeights:
    """Every parameter zero; the model then reduces to bicubic upsampling."""
    shapes = expected_shapes(config)
    return ModelWeights(config, {n: zeros(s, dtype=config.dtype) for n, s in shapes.items()})


def initial_memory(weights: ModelWeights, batch: int, h: int, w: int) -> MemoryState:
    cfg = weights.config
    beta_raw = weights["memory.beta_raw"] if cfg.use_memory else None
    return MemoryState(zeros((batch, cfg.base_channels, h, w), dtype=cfg.dtype), beta_raw)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def _apply(x: Tensor, weights: ModelWeights, name: str) -> Tensor:
    layer = weights.layers[name]
    assert layer.conv is not None
    fn = conv3d if layer.conv.ndim == 3 else conv2d
    bias = weights[f"{name}.bias"] if layer.conv.bias else None
    return fn(x, weights[f"{name}.weight"], bias, layer.conv)


def _as_model_dtype(x: Tensor, weights: ModelWeights) -> Tensor:
    return x if x.dtype == weights.config.dtype else cast(x, weights.config.dtype)


def extract_features(x: Tensor, weights: ModelWeights) -> Tensor:
    """Shallow per-frame features ``[n, c, h, w] -> [n, F, h, w]``."""
    f = gelu(_apply(x, weights, "feat.conv_first"))
    for i in range(weights.config.n_feat_blocks or 0):
        y = gelu(_apply(f, weights, f"feat.block{i}.conv1"))
        f = f + _apply(y, weights, f"feat.block{i}.conv2")
    return f


def _frame(x: Tensor, t: int) -> Tensor:
    return reshape(slice_axis(x, 0, t, t + 1), x.shape[1:])


def align_block(
    window: VideoWindow, weights: ModelWeights, *, force_zero_offsets: bool = False
) -> Tensor:
    """Features of every frame aligned to the reference frame: ``[T, b, F, h, w]``.

    Offsets for each neighbour come from two convolutions over the neighbour's
    features concatenated with the reference features (or, with early fusion,
    with a 1x1 fusion of the whole window). The reference frame uses zero
    offsets. The deformable convolution is applied as a residual.
    """
    cfg = weights.config
    frames = _as_model_dtype(window.frames, weights)
    t_len, b, c, h, w = frames.shape
    if c != cfg.in_channels:
        raise ShapeError(f"window has {c} channels, model expects {cfg.in_channels}")
    f = cfg.base_channels
    feats = reshape(extract_features(reshape(frames, (t_len * b, c, h, w)), weights), (t_len, b, f, h, w))
    if cfg.temporal_radius == 0:
        return feats
    if window.radius != cfg.temporal_radius:
        raise ShapeError(f"window radius {window.radius} != model temporal_radius {cfg.temporal_radius}")

    per_frame = [_frame(feats, t) for t in range(t_len)]
    ref = window.reference
    context = per_frame[ref]
    if cfg.early_fusion:
        context = _apply(concat(per_frame, axis=1), weights, "align.fuse")

    oc = cfg.offset_channels
    neighbours = [t for t in range(t_len) if t != ref]
    offsets = {t: zeros((b, oc, h, w), dtype=cfg.dtype) for t in range(t_len)}
    if not force_zero_offsets:
        pairs = concat([concat([per_frame[t], context], axis=1) for t in neighbours], axis=0)
        predicted = _apply(gelu(_apply(pairs, weights, "align.offset1")), weights, "align.offset2")
        for k, t in enumerate(neighbours):
            offsets[t] = slice_axis(predicted, 0, k * b, (k + 1) * b)

    layer = weights.layers["align.dcn"]
    kernel, bias = weights["align.dcn.weight"], weights["align.dcn.bias"]
    if cfg.deformable_mode == "trilinear_3d":
        volume = transpose(feats, (1, 2, 0, 3, 4))
        field = stack([offsets[t] for t in range(t_len)], axis=2)
        aligned = volume + deformable_conv3d(volume, kernel, bias, field, layer.conv)
        return transpose(aligned, (2, 0, 1, 3, 4))

    flat = reshape(feats, (t_len * b, f, h, w))
    field = concat([offsets[t] for t in range(t_len)], axis=0)
    aligned = flat + deformable_conv2d(flat, kernel, bias, field, layer.conv)
    return reshape(aligned, (t_len, b, f, h, w))


def res3d_block(features: Tensor, weights: ModelWeights, reference: int | None = None) -> Tensor:
    """3D residual blocks over ``[T, b, F, h, w]``, collapsed to ``[b, F, h, w]``.

    The collapse adds the temporal mean of the blocks' residual to the
    reference frame's features.
    """
    if features.ndim != 5:
        raise ShapeError(f"res3d_block expects [T, b, F, h, w], got {list(features.shape)}")
    t_len, b, f, h, w = features.shape
    ref = t_len // 2 if reference is None else reference
    x = transpose(features, (1, 2, 0, 3, 4))
    y = x
    for i in range(weights.config.n_res3d):
        z = gelu(_apply(y, weights, f"res3d.block{i}.conv1"))
        y = y + _apply(z, weights, f"res3d.block{i}.conv2")
    delta = (y - x).mean(axes=2)
    ref_feat = reshape(slice_axis(x, 2, ref, ref + 1), (b, f, h, w))
    return ref_feat + delta


def wavelet_branch(x: Tensor, weights: ModelWeights) -> Tensor:
    """Haar sub-bands -> grouped per-band convs -> x2 bilinear upsample -> 1x1 fusion with *x*."""
    cfg = weights.config
    if not cfg.use_wavelet:
        return x
    y = concat(list(dwt2d(x).bands()), axis=1)
    for j in range(cfg.n_wavelet_convs):
        y = gelu(_apply(y, weights, f"wavelet.conv{j}"))
    y = upsample_bilinear(y, 2)
    return _apply(concat([x, y], axis=1), weights, "wavelet.fuse")


def memory_update(prev: MemoryState, feat: Tensor) -> MemoryState:
    """``m_new = sigmoid(beta_raw) * m_prev + feat``."""
    if prev.m.shape != feat.shape:
        raise ShapeError(f"memory {list(prev.m.shape)} does not match features {list(feat.shape)}")
    if prev.beta_raw is None:
        raise ConfigError("memory update needs beta_raw")
    beta = tile(reshape(sigmoid(prev.beta_raw), (1,) * feat.ndim), feat.shape)
    return MemoryState(beta * prev.m + feat, prev.beta_raw)


def inject_memory(feat: Tensor, memory: MemoryState, weights: ModelWeights) -> Tensor:
    """Add the memory to the features through a 1x1 conv, in pixel or Haar domain."""
    if weights.config.dwt_state:
        coeffs = _apply(dwt2d_stacked(memory.m), weights, "memory.inject")
        return feat + idwt2d_stacked(coeffs)
    return feat + _apply(memory.m, weights, "memory.inject")


def _convnext(x: Tensor, weights: ModelWeights, block: str) -> Tensor:
    y = _apply(x, weights, f"{block}.dwconv")
    y = layer_norm(y, weights[f"{block}.norm.gamma"], weights[f"{block}.norm.beta"], axis=1)
    y = gelu(_apply(y, weights, f"{block}.pw1"))
    return x + _apply(y, weights, f"{block}.pw2")


def reconstruct(
    fused: Tensor, memory: MemoryState | None, center_lr: Tensor, weights: ModelWeights
) -> HRFrame:
    """Memory injection, ConvNeXt refinement, pixel shuffle and the bicubic global residual."""
    cfg = weights.config
    b, c, h, w = center_lr.shape
    if fused.shape != (b, cfg.base_channels, h, w):
        raise ShapeError(
            f"features {list(fused.shape)} do not match the LR frame {list(center_lr.shape)}"
        )
    x = fused
    if memory is not None and cfg.use_memory:
        x = inject_memory(x, memory, weights)
    for i in range(cfg.n_convnext):
        x = _convnext(x, weights, f"recon.convnext{i}")
    detail = pixel_shuffle(_apply(x, weights, "recon.conv_up"), cfg.scale)
    base = resize(_as_model_dtype(center_lr, weights), cfg.scale * h, cfg.scale * w, "bicubic")
    return HRFrame(detail + base)


# ---------------------------------------------------------------------------
# Forward and sequences
# ---------------------------------------------------------------------------


def rcdm_forward(
    window: VideoWindow,
    memory: MemoryState | None,
    weights: ModelWeights,
    *,
    force_zero_offsets: bool = False,
) -> tuple[HRFrame, MemoryState]:
    """Restore the reference frame of *window* and advance the memory by one step.

    ``memory=None`` starts from the all-zero state.
    """
    cfg = weights.config
    h, w = window.extents
    if memory is None:
        memory = initial_memory(weights, window.batch, h, w)
    expected = (window.batch, cfg.base_channels, h, w)
    if memory.m.shape != expected:
        raise ShapeError(f"memory shape {list(memory.m.shape)} != {list(expected)}")

    aligned = align_block(window, weights, force_zero_offsets=force_zero_offsets)
    fused = res3d_block(aligned, weights, window.reference)
    feat = wavelet_branch(fused, weights)
    if cfg.use_memory:
        state = MemoryState(_as_model_dtype(memory.m, weights), weights["memory.beta_raw"])
        memory = memory_update(state, feat)
        hr = reconstruct(feat, memory, window.frame(window.reference), weights)
    else:
        hr = reconstruct(feat, None, window.frame(window.reference), weights)
    return hr, memory


def iter_sequence(
    frames: Tensor,
    weights: ModelWeights,
    mode: str = "center",
    memory: MemoryState | None = None,
) -> Iterator[tuple[int, HRFrame, MemoryState]]:
    """Slide a ``2N + 1`` window over ``[T, b, c, h, w]`` threading the memory.

    Yields ``(target frame index, HR frame, memory after the step)``.
    """
    if mode not in ("center", "causal"):
        raise ConfigError(f"Unknown window mode '{mode}'. Supported: center, causal")
    if frames.ndim != 5:
        raise ShapeError(f"a sequence is [T, b, c, h, w], got {list(frames.shape)}")
    width = weights.config.window
    if frames.shape[0] < width:
        raise ShapeError(f"sequence of {frames.shape[0]} frames is shorter than the {width}-frame window")
    make = VideoWindow.center if mode == "center" else VideoWindow.causal
    for k in range(frames.shape[0] - width + 1):
        window = make(slice_axis(frames, 0, k, k + width))
        hr, memory = rcdm_forward(window, memory, weights)
        yield k + window.reference, hr, memory


def run_sequence(
    frames: Tensor, weights: ModelWeights, mode: str = "center", memory: MemoryState | None = None
) -> list[HRFrame]:
    return [hr for _, hr, _ in iter_sequence(frames, weights, mode, memory)]
