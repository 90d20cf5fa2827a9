"""Losses, AdamW, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rcdm import __version__
from rcdm.config import ModelConfig, TrainConfig, config_from_mapping
from rcdm.degradation import DegradationParams, VideoClip, batch_clips, degrade_clip, pad_to_multiple
from rcdm.errors import ConfigError, NumericError, RcdmError, RcdmIOError, ShapeError
from rcdm.fileio import read_tensor_dir, write_tensor_dir
from rcdm.model import MemoryState, ModelWeights, VideoWindow, build_model, iter_sequence, rcdm_forward
from rcdm.tensor import (
    Tape,
    Tensor,
    abs_,
    backward,
    cast,
    no_grad,
    reshape,
    slice_axis,
    sqrt,
    square,
    stack,
)

logger = logging.getLogger(__name__)

CHECKPOINT_META = "checkpoint.json"


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _difference(pred: Tensor, target: Tensor, name: str) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: prediction {list(pred.shape)} and target {list(target.shape)} differ")
    if target.dtype != pred.dtype:
        target = cast(target, pred.dtype)
    return pred - target


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """``mean(sqrt((pred - target)^2 + eps^2))``."""
    return sqrt(square(_difference(pred, target, "charbonnier")) + eps * eps).mean()


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return abs_(_difference(pred, target, "l1")).mean()


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    return square(_difference(pred, target, "l2")).mean()


def loss_fn(cfg: TrainConfig) -> Callable[[Tensor, Tensor], Tensor]:
    if cfg.loss == "charbonnier":
        return lambda p, t: charbonnier_loss(p, t, cfg.charbonnier_eps)
    if cfg.loss == "l1":
        return l1_loss
    if cfg.loss == "l2":
        return l2_loss
    raise ConfigError(f"Unknown loss '{cfg.loss}'")


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    """First and second moments per parameter and the number of steps taken."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def initial(cls, params: Mapping[str, Tensor]) -> OptimState:
        return cls(
            {n: np.zeros(t.shape, dtype=t.data.dtype) for n, t in params.items()},
            {n: np.zeros(t.shape, dtype=t.data.dtype) for n, t in params.items()},
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    cfg: TrainConfig,
) -> tuple[dict[str, Tensor], OptimState]:
    """One AdamW update with decoupled weight decay.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for '{name}'")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1, correction2 = 1.0 - b1**t, 1.0 - b2**t

    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps) + cfg.weight_decay * p.data
        new_params[name] = Tensor(p.data - cfg.lr * update, dtype=p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, OptimState(new_m, new_v, t)


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most *max_norm*."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    factor = max_norm / norm
    return {n: g * factor for n, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingPair:
    lr: VideoClip
    hr: VideoClip


def make_pairs(
    clips: Sequence[VideoClip], model: ModelConfig, cfg: TrainConfig, *, workers: int = 1
) -> list[TrainingPair]:
    """Degrade HR clips with the configured track.

    HR frames are reflect-padded to a multiple of twice the scale so the LR
    frames come out even for the Haar stages.
    """
    params = DegradationParams.track(cfg.track, scale=model.scale, seed=cfg.seed)
    pairs = []
    for clip in clips:
        hr = VideoClip(pad_to_multiple(clip.frames, 2 * model.scale), clip.frame_rate)
        pairs.append(TrainingPair(degrade_clip(hr, params, workers=workers), hr))
    return pairs


@dataclass(frozen=True)
class ScheduleItem:
    group: int
    start: int


@dataclass
class _Group:
    lr: Tensor
    hr: Tensor


def build_schedule(
    pairs: Sequence[TrainingPair], batch: int, width: int
) -> tuple[list[_Group], list[ScheduleItem]]:
    """Group clips ``batch`` at a time and list every window of every group in order.

    Step ``k`` trains on ``items[k % len(items)]``.
    """
    if not pairs:
        raise ConfigError("training needs at least one clip")
    groups: list[_Group] = []
    items: list[ScheduleItem] = []
    for g, first in enumerate(range(0, len(pairs), batch)):
        chunk = pairs[first : first + batch]
        lr = batch_clips([p.lr for p in chunk])
        hr = batch_clips([p.hr for p in chunk])
        if lr.shape[0] < width:
            raise ShapeError(f"clip of {lr.shape[0]} frames is shorter than the {width}-frame window")
        groups.append(_Group(lr, hr))
        items += [ScheduleItem(g, k) for k in range(lr.shape[0] - width + 1)]
    return groups, items


@dataclass
class TrainResult:
    weights: ModelWeights
    optim: OptimState
    losses: list[float] = field(default_factory=list)
    memory: MemoryState | None = None
    step: int = 0


def train_loop(
    model: ModelConfig,
    clips: Sequence[VideoClip],
    cfg: TrainConfig,
    *,
    resume: TrainResult | None = None,
    workers: int = 1,
) -> TrainResult:
    """Train for ``cfg.steps`` steps in total, continuing from *resume* when given.

    Memory threads through consecutive windows of a clip, is detached
    between steps and resets to zero at the start of every clip.
    """
    pairs = make_pairs(clips, model, cfg, workers=workers)
    groups, items = build_schedule(pairs, cfg.batch, model.window)
    compute = loss_fn(cfg)

    if resume is None:
        weights = build_model(model, cfg.seed)
        state = TrainResult(weights, OptimState.initial(weights.params))
    else:
        state = TrainResult(resume.weights, resume.optim, list(resume.losses), resume.memory, resume.step)

    while state.step < cfg.steps:
        item = items[state.step % len(items)]
        group = groups[item.group]
        memory = None if item.start == 0 else state.memory
        window_frames = slice_axis(group.lr, 0, item.start, item.start + model.window)
        window = (VideoWindow.center if cfg.mode == "center" else VideoWindow.causal)(
            cast(window_frames, model.dtype) if window_frames.dtype != model.dtype else window_frames
        )
        target_index = item.start + window.reference
        _, b, c, hh, ww = group.hr.shape
        target = reshape(slice_axis(group.hr, 0, target_index, target_index + 1), (b, c, hh, ww))

        leaves = state.weights.trainable()
        with Tape():
            hr, new_memory = rcdm_forward(window, memory, leaves)
            loss = compute(hr.image, target)
            backward(loss)
        grads = {
            n: t.grad if t.grad is not None else np.zeros(t.shape, dtype=t.data.dtype)
            for n, t in leaves.items()
        }
        if cfg.grad_clip_norm is not None:
            grads, norm = clip_gradients(grads, cfg.grad_clip_norm)
            logger.debug("step %d gradient norm %.4g", state.step, norm)
        params, state.optim = adamw_step(state.weights.params, grads, state.optim, cfg)
        state.weights = state.weights.with_params(params)
        state.memory = new_memory.detach()
        state.losses.append(loss.item())
        state.step += 1
        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            logger.info("step %d/%d  loss %.6f", state.step, cfg.steps, state.losses[-1])
    return state


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def super_resolve_clip(lr: VideoClip, weights: ModelWeights, mode: str = "center") -> VideoClip:
    """Restore every target frame of an LR clip, threading the memory through the windows.

    Odd extents are reflect-padded to even for the Haar stages. The output
    is cropped back to ``scale`` times the input, or to ``lr.source_extents``
    when the clip records the HR size it was degraded from. The result's
    ``first_target`` is the clip frame restored by the first window.
    """
    cfg = weights.config
    h, w = lr.extents
    frames = lr.frames if lr.frames.dtype == cfg.dtype else cast(lr.frames, cfg.dtype)
    frames = pad_to_multiple(frames, 2)
    t_len, c, ph, pw = frames.shape
    sequence = reshape(frames, (t_len, 1, c, ph, pw))
    out_h, out_w = cfg.scale * h, cfg.scale * w
    if lr.source_extents is not None:
        src_h, src_w = lr.source_extents
        if src_h <= out_h and src_w <= out_w:
            out_h, out_w = src_h, src_w
        else:
            logger.warning(
                "Clip was degraded from %dx%d, larger than the %dx%d output; not cropping", src_h, src_w, out_h, out_w
            )

    restored: list[Tensor] = []
    first = None
    with no_grad():
        for target, hr, _ in iter_sequence(sequence, weights, mode):
            if first is None:
                first = target
            image = reshape(hr.image, hr.shape[1:])
            image = slice_axis(slice_axis(image, 1, 0, out_h), 2, 0, out_w)
            restored.append(image)
    logger.info("Restored %d frames at %dx%d", len(restored), out_h, out_w)
    return VideoClip(stack(restored, axis=0), lr.frame_rate, lr.first_target + (first or 0))


def loss_csv(losses: Sequence[float]) -> str:
    """``step,loss`` with exact float reprs."""
    return "step,loss\n" + "".join(f"{k},{loss!r}\n" for k, loss in enumerate(losses))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_M, _V, _MEMORY = "optim.m:", "optim.v:", "state:memory"


def save_checkpoint(directory: Path, result: TrainResult, train: TrainConfig) -> None:
    """Parameters, optimiser moments and in-flight memory as RCT files plus ``checkpoint.json``."""
    directory = Path(directory)
    tensors: dict[str, Tensor] = dict(result.weights.params)
    for name in result.weights:
        tensors[_M + name] = Tensor(result.optim.m[name])
        tensors[_V + name] = Tensor(result.optim.v[name])
    if result.memory is not None:
        tensors[_MEMORY] = result.memory.m
    write_tensor_dir(directory, tensors)
    meta = {
        "version": __version__,
        "model": result.weights.config.to_dict(),
        "train": train.to_dict(),
        "step": result.step,
        "optim_step": result.optim.step,
        "losses": result.losses,
    }
    (directory / CHECKPOINT_META).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    logger.info("Saved checkpoint at step %d to %s", result.step, directory)


@dataclass(frozen=True)
class Checkpoint:
    result: TrainResult
    train: TrainConfig

    @property
    def weights(self) -> ModelWeights:
        return self.result.weights


def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / CHECKPOINT_META
    if not meta_path.is_file():
        raise RcdmIOError(f"{directory} is not a checkpoint (no {CHECKPOINT_META})")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        config = config_from_mapping({"model": meta["model"], "train": meta["train"]})
    except (json.JSONDecodeError, KeyError, RcdmError) as exc:
        raise RcdmIOError(f"{meta_path}: corrupt checkpoint metadata ({exc})") from exc

    tensors = read_tensor_dir(directory)
    params = {n: t for n, t in tensors.items() if ":" not in n}
    try:
        weights = ModelWeights(config.model, params)
        optim = OptimState(
            {n: tensors[_M + n].numpy().copy() for n in params},
            {n: tensors[_V + n].numpy().copy() for n in params},
            int(meta.get("optim_step", 0)),
        )
    except (ShapeError, KeyError) as exc:
        raise RcdmIOError(f"{directory}: checkpoint does not match its config ({exc})") from exc
    memory = None
    if _MEMORY in tensors:
        beta_raw = weights["memory.beta_raw"] if config.model.use_memory else None
        memory = MemoryState(tensors[_MEMORY], beta_raw)
    result = TrainResult(weights, optim, [float(x) for x in meta.get("losses", [])], memory, int(meta["step"]))
    return Checkpoint(result, config.train)
