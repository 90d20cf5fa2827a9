"""Tests for losses, AdamW, the training loop, inference and checkpoints."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rcdm.config import ModelConfig, TrainConfig
from rcdm.degradation import DegradationParams, VideoClip, degrade_clip, synth_clip
from rcdm.errors import ConfigError, NumericError, RcdmIOError, ShapeError
from rcdm.kernels import resize
from rcdm.metrics import evaluate_clip
from rcdm.model import build_model
from rcdm.tensor import Tensor, full, zeros
from rcdm.trainer import (
    CHECKPOINT_META,
    OptimState,
    TrainingPair,
    adamw_step,
    build_schedule,
    charbonnier_loss,
    clip_gradients,
    l1_loss,
    l2_loss,
    load_checkpoint,
    loss_csv,
    loss_fn,
    make_pairs,
    save_checkpoint,
    super_resolve_clip,
    train_loop,
)

TINY = ModelConfig(base_channels=4, temporal_radius=1, scale=2, n_convnext=1, n_wavelet_convs=1)


def _clips(n=1, frames=4, size=8):
    return [synth_clip("panning_texture", frames, 3, size, size, seed=s) for s in range(n)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_losses_on_known_values():
    pred, target = full((2, 2), 0.5, dtype="float64"), zeros((2, 2), dtype="float64")
    assert charbonnier_loss(pred, pred).item() == pytest.approx(1e-3)
    assert charbonnier_loss(pred, target).item() == pytest.approx(math.sqrt(0.25 + 1e-6))
    assert l1_loss(pred, target).item() == pytest.approx(0.5)
    assert l2_loss(pred, target).item() == pytest.approx(0.25)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        charbonnier_loss(zeros((1, 3, 4, 4)), zeros((1, 3, 4, 5)))


def test_loss_fn_follows_config():
    assert loss_fn(TrainConfig(loss="l1")) is l1_loss
    assert loss_fn(TrainConfig(loss="l2")) is l2_loss


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


def test_adamw_matches_the_update_rule_for_three_steps():
    cfg = TrainConfig()
    p = {"p": Tensor(np.array([1.0, -2.0]), dtype="float64")}
    state = OptimState.initial(p)
    value, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for t, g in enumerate([np.array([0.5, 0.1]), np.array([-0.25, 0.2]), np.array([1.0, -0.3])], start=1):
        p, state = adamw_step(p, {"p": g}, state, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat, v_hat = m / (1 - 0.9**t), v / (1 - 0.999**t)
        value = value - 4e-4 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 1e-3 * value)
    assert state.step == 3
    assert_allclose(p["p"].numpy(), value, atol=1e-12)


def test_adamw_with_zero_lr_keeps_parameters():
    p = {"w": Tensor(np.array([0.3, 0.7]), dtype="float64")}
    out, _ = adamw_step(p, {"w": np.array([1.0, -1.0])}, OptimState.initial(p), TrainConfig(lr=0.0))
    assert_array_equal(out["w"].numpy(), [0.3, 0.7])


def test_adamw_decays_weights_without_gradient():
    p = {"w": Tensor(np.array([2.0]), dtype="float64")}
    out, _ = adamw_step(p, {"w": np.zeros(1)}, OptimState.initial(p), TrainConfig(lr=0.1, weight_decay=0.5))
    assert_allclose(out["w"].numpy(), [2.0 * (1 - 0.05)])


def test_adamw_rejects_non_finite_gradients():
    p = {"w": Tensor(np.array([1.0]), dtype="float64")}
    with pytest.raises(NumericError, match="'w'"):
        adamw_step(p, {"w": np.array([np.nan])}, OptimState.initial(p), TrainConfig())


def test_clip_gradients_scales_globally():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    same, _ = clip_gradients(grads, 10.0)
    assert_array_equal(same["a"], grads["a"])


# ---------------------------------------------------------------------------
# data and schedule
# ---------------------------------------------------------------------------


def test_make_pairs_pads_to_even_lr_frames():
    clip = VideoClip(Tensor(np.full((4, 3, 9, 10), 0.5), dtype="float32"))
    (pair,) = make_pairs([clip], TINY, TrainConfig())
    assert pair.hr.frames.shape == (4, 3, 12, 12)
    assert pair.lr.frames.shape == (4, 3, 6, 6)
    assert_allclose(pair.lr.frames.numpy(), 0.5, atol=1e-6)


def test_schedule_lists_every_window():
    pairs = [TrainingPair(clip, clip) for clip in _clips(2, frames=5)]
    groups, items = build_schedule(pairs, batch=1, width=3)
    assert len(groups) == 2
    assert [(i.group, i.start) for i in items] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    groups, items = build_schedule(pairs, batch=2, width=3)
    assert groups[0].lr.shape == (5, 2, 3, 8, 8)
    assert len(items) == 3


def test_schedule_errors():
    with pytest.raises(ConfigError):
        build_schedule([], 1, 3)
    short = _clips(1, frames=2)[0]
    with pytest.raises(ShapeError):
        build_schedule([TrainingPair(short, short)], 1, 3)


# ---------------------------------------------------------------------------
# training loop and checkpoints
# ---------------------------------------------------------------------------


def test_zero_steps_returns_the_initial_model():
    result = train_loop(TINY, _clips(), TrainConfig(steps=0, seed=3))
    initial = build_model(TINY, 3)
    assert result.step == 0 and result.losses == []
    assert_array_equal(result.weights["recon.conv_up.weight"].numpy(), initial["recon.conv_up.weight"].numpy())


def test_training_is_deterministic():
    cfg = TrainConfig(steps=3, seed=1)
    a, b = train_loop(TINY, _clips(), cfg), train_loop(TINY, _clips(), cfg)
    assert a.losses == b.losses
    assert len(a.losses) == 3
    assert all(math.isfinite(x) for x in a.losses)
    for name in a.weights:
        assert_array_equal(a.weights[name].numpy(), b.weights[name].numpy())


def test_training_on_odd_lr_extents():
    # 10x10 HR at scale 2 would give 5x5 LR frames without the even padding
    clips = [synth_clip("panning_texture", 4, 3, 10, 10, seed=0)]
    result = train_loop(TINY, clips, TrainConfig(steps=1))
    assert len(result.losses) == 1
    assert math.isfinite(result.losses[0])
    assert result.memory.m.shape == (1, 4, 6, 6)


def test_training_changes_the_weights():
    result = train_loop(TINY, _clips(), TrainConfig(steps=2, lr=1e-2))
    before = build_model(TINY, 0)["feat.conv_first.weight"].numpy()
    assert not np.array_equal(result.weights["feat.conv_first.weight"].numpy(), before)
    assert result.optim.step == 2


def test_checkpoint_resume_equals_straight_training(tmp_path):
    clips = _clips()
    straight = train_loop(TINY, clips, TrainConfig(steps=4, seed=2))
    half = train_loop(TINY, clips, TrainConfig(steps=2, seed=2))
    save_checkpoint(tmp_path / "ckpt", half, TrainConfig(steps=2, seed=2))

    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.train.steps == 2
    assert loaded.result.step == 2
    assert loaded.result.losses == half.losses
    resumed = train_loop(TINY, clips, TrainConfig(steps=4, seed=2), resume=loaded.result)
    assert resumed.losses == straight.losses
    for name in straight.weights:
        assert_array_equal(resumed.weights[name].numpy(), straight.weights[name].numpy())


def test_checkpoint_errors(tmp_path):
    with pytest.raises(RcdmIOError, match="not a checkpoint"):
        load_checkpoint(tmp_path)
    result = train_loop(TINY, _clips(), TrainConfig(steps=1))
    save_checkpoint(tmp_path / "c", result, TrainConfig(steps=1))
    meta_path = tmp_path / "c" / CHECKPOINT_META
    meta = json.loads(meta_path.read_text())
    meta["model"]["base_channels"] = 5
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(RcdmIOError, match="does not match"):
        load_checkpoint(tmp_path / "c")
    meta_path.write_text("{")
    with pytest.raises(RcdmIOError, match="corrupt"):
        load_checkpoint(tmp_path / "c")


def test_loss_csv_keeps_exact_values():
    text = loss_csv([0.1, 1 / 3])
    assert text.splitlines() == ["step,loss", "0,0.1", f"1,{1 / 3!r}"]


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def test_super_resolve_clip_shapes_and_first_target():
    lr = VideoClip(Tensor(np.random.default_rng(0).uniform(size=(5, 3, 5, 7)), dtype="float32"), 24.0, 3)
    out = super_resolve_clip(lr, build_model(TINY))
    assert out.frames.shape == (3, 3, 10, 14)
    assert out.first_target == 4
    assert out.frame_rate == 24.0
    causal = super_resolve_clip(lr, build_model(TINY), "causal")
    assert causal.first_target == 5


def test_super_resolve_clip_crops_to_the_source_size():
    hr = synth_clip("panning_texture", 4, 3, 9, 11, seed=1)
    lr = degrade_clip(hr, DegradationParams.track("bi", scale=2))
    assert lr.extents == (5, 6)
    assert lr.source_extents == (9, 11)
    out = super_resolve_clip(lr, build_model(TINY))
    assert out.frames.shape == (2, 3, 9, 11)
    assert out.source_extents is None


def test_super_resolve_clip_too_short():
    with pytest.raises(ShapeError):
        super_resolve_clip(_clips(frames=2, size=4)[0], build_model(TINY))


@pytest.mark.slow
def test_overfitting_one_clip_at_default_settings():
    clip = synth_clip("panning_texture", 3, 3, 16, 16, seed=5)
    cfg = TrainConfig(steps=300)
    result = train_loop(TINY, [clip], cfg)
    assert np.mean(result.losses[-10:]) < 0.5 * result.losses[0]

    (pair,) = make_pairs([clip], TINY, cfg)
    restored = super_resolve_clip(pair.lr, result.weights)
    center = Tensor(pair.lr.frames.numpy()[1:2])
    bicubic = VideoClip(resize(center, 16, 16, "bicubic"), first_target=1)
    (model_score,) = evaluate_clip(clip, restored, ("ssim",))
    (bicubic_score,) = evaluate_clip(clip, bicubic, ("ssim",))
    assert model_score.ssim > bicubic_score.ssim
