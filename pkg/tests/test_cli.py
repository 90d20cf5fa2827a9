"""Tests for the rcdm CLI."""

from __future__ import annotations

from dataclasses import replace

import pytest
from numpy.testing import assert_allclose
from typer.testing import CliRunner

from rcdm import __version__
from rcdm.cli import app
from rcdm.fileio import read_clip, read_key_values, read_run_meta
from rcdm.tensor import zeros
from rcdm.trainer import load_checkpoint, save_checkpoint

runner = CliRunner()

TINY_CONFIG = """\
[model]
base_channels = 4
temporal_radius = 1
scale = 2
n_convnext = 1
n_wavelet_convs = 1

[train]
steps = 1
"""


@pytest.fixture()
def hr_dir(tmp_path):
    path = tmp_path / "hr"
    result = runner.invoke(app, ["synth", "--out", str(path), "--frames", "4", "--size", "24x24", "--seed", "3"])
    assert result.exit_code == 0, result.output
    return path


@pytest.fixture()
def lr_dir(tmp_path, hr_dir):
    path = tmp_path / "lr"
    result = runner.invoke(app, ["degrade", "--in", str(hr_dir), "--out", str(path), "--scale", "2"])
    assert result.exit_code == 0, result.output
    return path


@pytest.fixture()
def ckpt_dir(tmp_path, hr_dir):
    config = tmp_path / "tiny.toml"
    config.write_text(TINY_CONFIG)
    path = tmp_path / "ckpt"
    result = runner.invoke(app, ["train", "--data", str(hr_dir), "--config", str(config), "--out", str(path)])
    assert result.exit_code == 0, result.output
    return path


# ---------------------------------------------------------------------------
# version and usage
# ---------------------------------------------------------------------------


def test_version_command():
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_unknown_command_is_a_usage_error():
    assert runner.invoke(app, ["upscale"]).exit_code == 2


def test_missing_required_option_is_a_usage_error():
    assert runner.invoke(app, ["synth"]).exit_code == 2


# ---------------------------------------------------------------------------
# synth and degrade
# ---------------------------------------------------------------------------


def test_synth_writes_a_clip_and_run_meta(hr_dir):
    clip = read_clip(hr_dir)
    assert clip.frames.shape == (4, 3, 24, 24)
    manifest = read_run_meta(hr_dir)
    assert manifest.command == "synth"
    assert manifest.seed == 3


def test_synth_rejects_a_bad_size(tmp_path):
    result = runner.invoke(app, ["synth", "--out", str(tmp_path / "x"), "--size", "24by24"])
    assert result.exit_code == 2
    assert "HxW" in result.output


def test_degrade_track_sets_the_blur(tmp_path, hr_dir):
    out = tmp_path / "bd"
    result = runner.invoke(app, ["degrade", "--in", str(hr_dir), "--out", str(out), "--track", "bd", "--scale", "2"])
    assert result.exit_code == 0, result.output
    argv = read_run_meta(out).argv
    assert "--track" not in argv
    assert argv[argv.index("--blur-sigma") + 1] == "1.6"
    assert read_clip(out).frames.shape == (4, 3, 12, 12)


def test_degrade_bi_track_equals_explicit_flags(tmp_path, hr_dir):
    by_track, by_flags = tmp_path / "track", tmp_path / "flags"
    common = ["degrade", "--in", str(hr_dir), "--scale", "2"]
    assert runner.invoke(app, [*common, "--track", "bi", "--out", str(by_track)]).exit_code == 0
    flags = ["--blur-sigma", "0", "--noise-sigma", "0", "--out", str(by_flags)]
    assert runner.invoke(app, [*common, *flags]).exit_code == 0
    frames = sorted(p.name for p in by_track.glob("frame_*.ppm"))
    assert len(frames) == 4
    for name in frames:
        assert (by_track / name).read_bytes() == (by_flags / name).read_bytes()


def test_degrade_refuses_to_overwrite_its_input(hr_dir):
    result = runner.invoke(app, ["degrade", "--in", str(hr_dir), "--out", str(hr_dir)])
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# train and infer
# ---------------------------------------------------------------------------


def test_train_writes_checkpoint_loss_and_config(ckpt_dir):
    for name in ("checkpoint.json", "manifest.txt", "loss.csv", "config.toml", "run.meta"):
        assert (ckpt_dir / name).is_file()
    lines = (ckpt_dir / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 2
    assert read_run_meta(ckpt_dir).config["model.base_channels"] == "4"


def test_train_with_zero_steps(tmp_path, hr_dir):
    out = tmp_path / "zero"
    config = tmp_path / "tiny.toml"
    config.write_text(TINY_CONFIG)
    result = runner.invoke(
        app, ["train", "--data", str(hr_dir), "--config", str(config), "--steps", "0", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert (out / "loss.csv").read_text() == "step,loss\n"


def test_resume_with_another_model_is_refused(tmp_path, hr_dir, ckpt_dir):
    result = runner.invoke(app, ["train", "--data", str(hr_dir), "--out", str(ckpt_dir), "--resume"])
    assert result.exit_code == 2
    assert "Error" in result.output


def test_train_needs_a_clip_directory(tmp_path):
    result = runner.invoke(app, ["train", "--data", str(tmp_path), "--out", str(tmp_path / "c")])
    assert result.exit_code == 2


def test_infer_restores_every_target_frame(tmp_path, lr_dir, ckpt_dir):
    out = tmp_path / "sr"
    result = runner.invoke(app, ["infer", "--ckpt", str(ckpt_dir), "--in", str(lr_dir), "--out", str(out)])
    assert result.exit_code == 0, result.output
    restored = read_clip(out)
    assert restored.frames.shape == (2, 3, 24, 24)
    assert restored.first_target == 1


def test_infer_and_eval_on_a_size_that_is_not_a_multiple_of_the_scale(tmp_path, ckpt_dir):
    hr, lr, sr = tmp_path / "odd_hr", tmp_path / "odd_lr", tmp_path / "odd_sr"
    runner.invoke(app, ["synth", "--out", str(hr), "--frames", "4", "--size", "21x23"])
    runner.invoke(app, ["degrade", "--in", str(hr), "--out", str(lr), "--scale", "2"])
    assert read_clip(lr).extents == (11, 12)
    result = runner.invoke(app, ["infer", "--ckpt", str(ckpt_dir), "--in", str(lr), "--out", str(sr)])
    assert result.exit_code == 0, result.output
    assert read_clip(sr).extents == (21, 23)
    assert runner.invoke(app, ["eval", "--ref", str(hr), "--test", str(sr)]).exit_code == 0


def test_center_and_causal_agree_on_a_static_clip(tmp_path, ckpt_dir):
    # with the offset head silent every frame of a static window aligns the same way
    checkpoint = load_checkpoint(ckpt_dir)
    params = dict(checkpoint.weights.params)
    for name in ("align.offset2.weight", "align.offset2.bias"):
        params[name] = zeros(params[name].shape)
    still = tmp_path / "still"
    save_checkpoint(still, replace(checkpoint.result, weights=checkpoint.weights.with_params(params)), checkpoint.train)

    hr, lr = tmp_path / "static_hr", tmp_path / "static_lr"
    runner.invoke(app, ["synth", "--out", str(hr), "--kind", "static", "--frames", "5", "--size", "24x24"])
    runner.invoke(app, ["degrade", "--in", str(hr), "--out", str(lr), "--scale", "2"])
    restored = {}
    for mode in ("center", "causal"):
        out = tmp_path / mode
        args = ["infer", "--ckpt", str(still), "--in", str(lr), "--mode", mode, "--out", str(out)]
        assert runner.invoke(app, args).exit_code == 0
        restored[mode] = read_clip(out)
    center, causal = restored["center"], restored["causal"]
    assert (center.first_target, causal.first_target) == (1, 2)
    assert_allclose(center.frames.numpy(), causal.frames.numpy(), atol=1.0 / 255.0 + 1e-6)


def test_infer_refuses_to_overwrite_its_input(lr_dir, ckpt_dir):
    result = runner.invoke(app, ["infer", "--ckpt", str(ckpt_dir), "--in", str(lr_dir), "--out", str(lr_dir)])
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_prints_csv(hr_dir):
    result = runner.invoke(app, ["eval", "--ref", str(hr_dir), "--test", str(hr_dir), "--metrics", "psnr"])
    assert result.exit_code == 0, result.output
    assert result.output.splitlines()[0] == "frame,psnr"
    assert "mean,inf" in result.output


def test_eval_writes_csv_and_run_meta(tmp_path, hr_dir, lr_dir, ckpt_dir):
    sr = tmp_path / "sr"
    runner.invoke(app, ["infer", "--ckpt", str(ckpt_dir), "--in", str(lr_dir), "--out", str(sr)])
    out = tmp_path / "scores" / "scores.csv"
    result = runner.invoke(app, ["eval", "--ref", str(hr_dir), "--test", str(sr), "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = out.read_text().splitlines()
    assert rows[0] == "frame,ssim,psnr"
    assert [r.split(",")[0] for r in rows[1:]] == ["1", "2", "mean"]
    assert read_key_values(out.parent / "run.meta")["command"] == "eval"


def test_eval_ablation_needs_a_baseline(hr_dir):
    result = runner.invoke(app, ["eval", "--ref", str(hr_dir), "--test", str(hr_dir), "--ablation"])
    assert result.exit_code == 2


def test_eval_will_not_write_into_a_clip_directory(hr_dir):
    out = hr_dir / "scores.csv"
    result = runner.invoke(app, ["eval", "--ref", str(hr_dir), "--test", str(hr_dir), "--out", str(out)])
    assert result.exit_code == 2
    assert not out.exists()


def test_eval_ablation_ratios(tmp_path, hr_dir):
    out = tmp_path / "ablation.csv"
    args = ["eval", "--ref", str(hr_dir), "--test", str(hr_dir), "--baseline", str(hr_dir), "--ablation"]
    result = runner.invoke(app, [*args, "--out", str(out)])
    assert result.exit_code == 0, result.output
    rows = out.read_text().splitlines()
    assert rows[0] == "frame,ssim_full,ssim_baseline,ratio"
    assert rows[1].endswith(",1.000000")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def test_analyze_main_preset():
    result = runner.invoke(app, ["analyze", "--preset", "rcdm-paper-scale"])
    assert result.exit_code == 0, result.output
    assert "2.290M" in result.output
    assert "MAC = 2 FLOPs" in result.output


def test_analyze_family_and_csv(tmp_path):
    out = tmp_path / "cost.csv"
    result = runner.invoke(app, ["analyze", "--input-size", "32x32", "--family", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Variant family" in result.output
    assert out.read_text().splitlines()[-1].startswith("TOTAL,")


@pytest.mark.parametrize(
    "args",
    [
        ["analyze", "--preset", "rcdm", "--config", "x.toml"],
        ["analyze", "--input-size", "0x4"],
        ["analyze", "--preset", "nope"],
    ],
)
def test_analyze_errors(args):
    assert runner.invoke(app, args).exit_code == 2


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def test_selftest_quick_passes():
    result = runner.invoke(app, ["selftest"])
    assert result.exit_code == 0, result.output
    assert "checks passed" in result.output


def test_selftest_reports_an_injected_fault():
    result = runner.invoke(app, ["selftest", "--inject-fault", "dwt"])
    assert result.exit_code == 1
    assert "Failed" in result.output


def test_selftest_unknown_level():
    assert runner.invoke(app, ["selftest", "--level", "exhaustive"]).exit_code == 2


# ---------------------------------------------------------------------------
# rerun
# ---------------------------------------------------------------------------


def test_rerun_synth_reproduces_the_frames(tmp_path, hr_dir):
    again = tmp_path / "again"
    result = runner.invoke(app, ["rerun", str(hr_dir / "run.meta"), "--out", str(again)])
    assert result.exit_code == 0, result.output
    for frame in sorted(hr_dir.glob("frame_*.ppm")):
        assert (again / frame.name).read_bytes() == frame.read_bytes()


def test_rerun_train_reproduces_the_loss(tmp_path, ckpt_dir):
    again = tmp_path / "again"
    result = runner.invoke(app, ["rerun", str(ckpt_dir), "--out", str(again)])
    assert result.exit_code == 0, result.output
    assert (again / "loss.csv").read_text() == (ckpt_dir / "loss.csv").read_text()


def test_rerun_of_a_failing_command_keeps_its_exit_code(tmp_path, hr_dir):
    runner.invoke(app, ["synth", "--out", str(tmp_path / "s")])
    meta = tmp_path / "s" / "run.meta"
    text = meta.read_text().replace("--kind panning_texture", "--kind plasma")
    meta.write_text(text)
    assert runner.invoke(app, ["rerun", str(meta)]).exit_code == 2


def test_rerun_of_an_unknown_option_is_a_usage_error(tmp_path):
    runner.invoke(app, ["synth", "--out", str(tmp_path / "s")])
    meta = tmp_path / "s" / "run.meta"
    meta.write_text(meta.read_text().replace("--kind panning_texture", "--colour panning_texture"))
    result = runner.invoke(app, ["rerun", str(meta)])
    assert result.exit_code == 2
    assert "Error" in result.output


def test_rerun_needs_a_run_meta(tmp_path):
    assert runner.invoke(app, ["rerun", str(tmp_path)]).exit_code == 2
