"""Tests for the degradation model, synthetic clips and windowing."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rcdm.degradation import (
    BD_SIGMA,
    DegradationParams,
    VideoClip,
    add_noise,
    batch_clips,
    bicubic_resample,
    degrade_clip,
    degrade_frame,
    gaussian_blur,
    gaussian_kernel,
    make_windows,
    pad_to_multiple,
    synth_clip,
)
from rcdm.errors import ConfigError, ShapeError
from rcdm.kernels import resize
from rcdm.tensor import Tensor, zeros

# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def test_tracks():
    assert DegradationParams.track("bi") == DegradationParams(0.0, 4, 0.0, 0)
    assert DegradationParams.track("bd", scale=2).blur_sigma == BD_SIGMA
    with pytest.raises(ConfigError):
        DegradationParams.track("bn")


@pytest.mark.parametrize("kwargs", [{"scale": 0}, {"scale": 2.0}, {"blur_sigma": -1.0}, {"seed": -3}])
def test_invalid_params(kwargs):
    with pytest.raises(ConfigError):
        DegradationParams(**kwargs)


# ---------------------------------------------------------------------------
# blur, resample, noise
# ---------------------------------------------------------------------------


def test_gaussian_kernel_is_normalised():
    k = gaussian_kernel(1.6)
    assert_allclose(k.sum(), 1.0)
    assert_allclose(k, k[::-1])
    assert_array_equal(gaussian_kernel(0.0), [1.0])


def test_blur_keeps_constants():
    x = Tensor(np.full((3, 9, 9), 0.4))
    assert_allclose(gaussian_blur(x, 1.6).numpy(), 0.4, atol=1e-12)


def test_blur_matches_dense_kernel_oracle():
    x = Tensor(np.random.default_rng(4).uniform(size=(2, 9, 11)))
    sigma = 1.0
    k1 = gaussian_kernel(sigma)
    k2 = np.outer(k1, k1)
    r = k1.size // 2
    padded = np.pad(x.numpy(), ((0, 0), (r, r), (r, r)), mode="reflect")
    expected = np.zeros((2, 9, 11))
    for i in range(9):
        for j in range(11):
            expected[:, i, j] = np.sum(padded[:, i : i + 2 * r + 1, j : j + 2 * r + 1] * k2, axis=(1, 2))
    assert_allclose(gaussian_blur(x, sigma).numpy(), expected, atol=1e-12)


def test_blur_with_zero_sigma_is_identity():
    x = Tensor(np.random.default_rng(5).uniform(size=(3, 4, 4)))
    assert gaussian_blur(x, 0.0) is x


def test_degrade_frame_shape_and_range():
    x = Tensor(np.random.default_rng(0).uniform(size=(3, 16, 12)))
    out = degrade_frame(x, DegradationParams(1.0, 4, 0.05, 3))
    assert out.shape == (3, 4, 3)
    assert out.numpy().min() >= 0.0 and out.numpy().max() <= 1.0


def test_constant_frame_survives_bicubic_downscale():
    out = degrade_frame(Tensor(np.full((1, 8, 8), 0.5)), DegradationParams())
    assert_allclose(out.numpy(), 0.5, atol=1e-12)


def test_bicubic_resample_shapes_and_constants():
    x = Tensor(np.full((2, 3, 8, 6), 0.25))
    assert_allclose(bicubic_resample(x, 4, 3).numpy(), 0.25, atol=1e-12)
    assert_allclose(bicubic_resample(x, 16, 12, antialias=False).numpy(), 0.25, atol=1e-12)
    assert bicubic_resample(x, 5, 7).shape == (2, 3, 5, 7)
    y = Tensor(np.random.default_rng(1).uniform(size=(3, 5, 5)))
    assert_allclose(bicubic_resample(y, 5, 5).numpy(), y.numpy(), atol=1e-12)


def test_bicubic_resample_keeps_a_linear_ramp_in_the_interior():
    ramp = np.broadcast_to(0.1 + 0.05 * np.arange(16.0), (1, 6, 16))
    out = bicubic_resample(Tensor(ramp), 6, 32).numpy()
    # output column d samples source position (d + 0.5) / 2 - 0.5; columns 6..25 see no clamped taps
    expected = 0.1 + 0.05 * ((np.arange(32) + 0.5) / 2 - 0.5)
    assert_allclose(out[0, :, 6:26], np.broadcast_to(expected[6:26], (6, 20)), atol=1e-12)


def test_bicubic_resample_antialias_only_changes_downscaling():
    x = Tensor(np.random.default_rng(2).uniform(size=(3, 12, 12)))
    plain = resize(x, 4, 4, "bicubic")
    assert_allclose(bicubic_resample(x, 4, 4, antialias=False).numpy(), plain.numpy(), atol=0)
    assert not np.allclose(bicubic_resample(x, 4, 4).numpy(), plain.numpy())
    assert_allclose(bicubic_resample(x, 24, 24).numpy(), bicubic_resample(x, 24, 24, antialias=False).numpy())


def test_noise_standard_deviation():
    x = Tensor(np.full((3, 128, 128), 0.5))
    noise = add_noise(x, 0.05, seed=9).numpy() - 0.5
    assert abs(noise.std() - 0.05) < 0.02 * 0.05
    assert abs(noise.mean()) < 1e-3


def test_noise_is_reproducible_per_stream():
    x = Tensor(np.full((1, 4, 4), 0.5))
    a = add_noise(x, 0.1, seed=1, stream="frame0").numpy()
    b = add_noise(x, 0.1, seed=1, stream="frame0").numpy()
    c = add_noise(x, 0.1, seed=1, stream="frame1").numpy()
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert add_noise(x, 0.0, seed=1) is x


def test_pad_to_multiple_reflects():
    out = pad_to_multiple(Tensor(np.arange(5.0).reshape(1, 5)), 4)
    assert_array_equal(out.numpy(), [[0, 1, 2, 3, 4, 3, 2, 1]])


def test_degrade_clip_is_worker_independent():
    hr = synth_clip("moving_shapes", 3, 3, 16, 16, seed=2)
    p = DegradationParams(1.0, 2, 0.02, 4)
    one = degrade_clip(hr, p, workers=1)
    many = degrade_clip(hr, p, workers=3)
    assert one.frames.shape == (3, 3, 8, 8)
    assert_array_equal(one.frames.numpy(), many.frames.numpy())


# ---------------------------------------------------------------------------
# synthetic clips
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["panning_texture", "moving_shapes", "static"])
def test_synth_clip_is_deterministic_and_in_range(kind):
    a = synth_clip(kind, 4, 3, 12, 10, motion=1.5, seed=9)
    b = synth_clip(kind, 4, 3, 12, 10, motion=1.5, seed=9)
    assert a.frames.shape == (4, 3, 12, 10)
    assert a.frames.dtype == "float32"
    assert_array_equal(a.frames.numpy(), b.frames.numpy())
    assert 0.0 <= a.frames.numpy().min() and a.frames.numpy().max() <= 1.0


def test_static_clip_repeats_one_frame():
    clip = synth_clip("static", 3, 1, 8, 8)
    assert_array_equal(clip.frames.numpy()[0], clip.frames.numpy()[2])


def test_panning_texture_moves_by_whole_pixels():
    clip = synth_clip("panning_texture", 2, 1, 8, 16, motion=1.0, seed=1).frames.numpy()
    assert_allclose(clip[1, 0, :, :-1], clip[0, 0, :, 1:], atol=1e-6)


def test_synth_clip_rejects_bad_input():
    with pytest.raises(ConfigError):
        synth_clip("noise", 2, 3, 8, 8)
    with pytest.raises(ShapeError):
        synth_clip("static", 0, 3, 8, 8)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


def test_center_windows():
    clip = synth_clip("static", 7, 3, 4, 4)
    windows = make_windows(clip, 2)
    assert len(windows) == 3
    assert windows[0].frames.shape == (5, 1, 3, 4, 4)
    assert windows[0].reference == 2


def test_causal_windows_restore_the_last_frame():
    windows = make_windows(synth_clip("static", 5, 1, 4, 4), 1, "causal")
    assert [w.reference for w in windows] == [2, 2, 2]


def test_clip_shorter_than_window():
    with pytest.raises(ShapeError):
        make_windows(synth_clip("static", 3, 1, 4, 4), 2)
    with pytest.raises(ConfigError):
        make_windows(synth_clip("static", 5, 1, 4, 4), 1, "future")


def test_batch_clips_stacks_on_axis_one():
    a, b = synth_clip("static", 3, 1, 4, 4, seed=0), synth_clip("static", 3, 1, 4, 4, seed=1)
    assert batch_clips([a, b]).shape == (3, 2, 1, 4, 4)
    with pytest.raises(ShapeError):
        batch_clips([a, synth_clip("static", 3, 1, 4, 6)])


def test_video_clip_needs_four_axes():
    with pytest.raises(ShapeError):
        VideoClip(zeros((3, 4, 4)))
