"""rcdm CLI – synthesize, degrade, train, restore, score and cost out video super-resolution runs."""

from __future__ import annotations

from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import click
import typer
from rich import print as rprint
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from rcdm import __version__
from rcdm.config import RunConfig, dump_config, load_config, load_preset, worker_count
from rcdm.cost import FLOP_CONVENTION, count_flops, family_report
from rcdm.degradation import SYNTH_KINDS, DegradationParams, degrade_clip, synth_clip
from rcdm.errors import ConfigError, NumericError, RcdmError
from rcdm.fileio import CLIP_META, RunManifest, read_clip, read_run_meta, write_clip, write_run_meta
from rcdm.log import configure_logging
from rcdm.metrics import METRICS, ablation_csv, ablation_rows, evaluate_clip, mean_score, scores_csv
from rcdm.selftest import FAULTS, run_selftest
from rcdm.trainer import load_checkpoint, loss_csv, save_checkpoint, super_resolve_clip, train_loop

app = typer.Typer(
    name="rcdm",
    help="Recurrent convolutional deformable memory video super-resolution at desk scale.",
    add_completion=False,
    no_args_is_help=True,
)

console = Console()

CONFIG_FILE = "config.toml"
LOSS_FILE = "loss.csv"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


@contextmanager
def _errors() -> Iterator[None]:
    """Map library errors to exit codes: 1 for numeric failures, 2 for everything else."""
    try:
        yield
    except NumericError as exc:
        rprint(f"[red]Error:[/red] {exc}")
        raise typer.Exit(1) from exc
    except RcdmError as exc:
        rprint(f"[red]Error:[/red] {exc}")
        raise typer.Exit(2) from exc


def _parse_size(text: str) -> tuple[int, int]:
    """``HxW`` to ``(H, W)``."""
    height, sep, width = text.lower().partition("x")
    if not sep or not height.isdigit() or not width.isdigit() or int(height) < 1 or int(width) < 1:
        raise ConfigError(f"Size must look like HxW with positive integers, got '{text}'")
    return int(height), int(width)


def _split_paths(values: list[str]) -> list[Path]:
    return [Path(part).resolve() for value in values for part in value.split(",") if part]


def _flatten(config: RunConfig) -> dict[str, object]:
    out = {f"model.{k}": v for k, v in config.model.to_dict().items()}
    out.update({f"train.{k}": v for k, v in config.train.to_dict().items()})
    return out


def _record(directory: Path, argv: list[str], *, seed: int | None = None, config: dict | None = None) -> None:
    write_run_meta(directory, RunManifest(argv[0], argv, seed, config or {}))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log at DEBUG level."),
) -> None:
    """Recurrent convolutional deformable memory video super-resolution at desk scale."""
    configure_logging(verbose)


@app.command()
def version() -> None:
    """Show the rcdm version."""
    rprint(f"rcdm [bold cyan]{__version__}[/bold cyan]")


@app.command()
def synth(
    out: Path = typer.Option(..., "--out", help="Clip directory to write."),
    kind: str = typer.Option("panning_texture", "--kind", help=f"One of: {', '.join(SYNTH_KINDS)}."),
    frames: int = typer.Option(7, "--frames", help="Number of frames."),
    size: str = typer.Option("64x64", "--size", help="Frame size as HxW."),
    motion: float = typer.Option(1.0, "--motion", help="Motion in pixels per frame."),
    seed: int = typer.Option(0, "--seed", help="Random seed."),
) -> None:
    """Write a procedurally generated HR clip with known motion."""
    with _errors():
        height, width = _parse_size(size)
        clip = synth_clip(kind, frames, 3, height, width, motion, seed)
        out = out.resolve()
        write_clip(clip, out, workers=worker_count())
        argv = ["synth", "--kind", kind, "--frames", str(frames), "--size", f"{height}x{width}",
                "--motion", repr(motion), "--seed", str(seed), "--out", str(out)]
        _record(out, argv, seed=seed, config={"kind": kind, "frames": frames, "motion": motion})
    rprint(f"[green]Wrote[/green] {frames} frames ({height}x{width}) to [bold]{out}[/bold]")


@app.command()
def degrade(
    input_dir: Path = typer.Option(..., "--in", help="HR clip directory."),
    out: Path = typer.Option(..., "--out", help="LR clip directory to write."),
    scale: int = typer.Option(4, "--scale", help="Integer downscale factor."),
    track: str | None = typer.Option(None, "--track", help="Preset: bi (bicubic) or bd (blur + bicubic)."),
    blur_sigma: float | None = typer.Option(None, "--blur-sigma", help="Gaussian blur sigma; 0 disables."),
    noise_sigma: float | None = typer.Option(None, "--noise-sigma", help="Gaussian noise sigma in [0, 1] units."),
    seed: int = typer.Option(0, "--seed", help="Noise seed."),
) -> None:
    """Blur, bicubic-downscale and add noise to every frame of a clip."""
    with _errors():
        base = DegradationParams.track(track or "bi", scale=scale, seed=seed)
        params = DegradationParams(
            base.blur_sigma if blur_sigma is None else blur_sigma,
            scale,
            base.noise_sigma if noise_sigma is None else noise_sigma,
            seed,
        )
        input_dir, out = input_dir.resolve(), out.resolve()
        if out == input_dir:
            raise ConfigError("--out must differ from --in")
        workers = worker_count()
        lr = degrade_clip(read_clip(input_dir, workers=workers), params, workers=workers)
        write_clip(lr, out, workers=workers)
        argv = ["degrade", "--in", str(input_dir), "--scale", str(scale), "--blur-sigma",
                repr(params.blur_sigma), "--noise-sigma", repr(params.noise_sigma),
                "--seed", str(seed), "--out", str(out)]
        config = {"scale": scale, "blur_sigma": params.blur_sigma, "noise_sigma": params.noise_sigma}
        _record(out, argv, seed=seed, config=config)
    h, w = lr.extents
    rprint(f"[green]Wrote[/green] {len(lr)} frames ({h}x{w}) to [bold]{out}[/bold]")


@app.command()
def train(
    data: list[str] = typer.Option(..., "--data", help="HR clip directories (repeat or comma-separate)."),
    out: Path = typer.Option(..., "--out", help="Checkpoint directory to write."),
    config: Path | None = typer.Option(None, "--config", help="TOML file with [model] and [train] sections."),
    preset: str | None = typer.Option(None, "--preset", help="Model preset when no --config is given."),
    steps: int | None = typer.Option(None, "--steps", help="Override train.steps."),
    seed: int | None = typer.Option(None, "--seed", help="Override train.seed."),
    resume: bool = typer.Option(False, "--resume", help="Continue from the checkpoint already in --out."),
) -> None:
    """Train a model on HR clips degraded on the fly; writes a checkpoint and loss.csv."""
    with _errors():
        if config is not None:
            run = load_config(config)
        else:
            run = RunConfig(model=load_preset(preset or "rcdm"))
        overrides = {k: v for k, v in (("steps", steps), ("seed", seed)) if v is not None}
        run = RunConfig(run.model, run.train.replace(**overrides))

        workers = worker_count()
        clips = [read_clip(path, workers=workers) for path in _split_paths(data)]
        out = out.resolve()
        previous = None
        if resume:
            checkpoint = load_checkpoint(out)
            if checkpoint.weights.config != run.model:
                raise ConfigError(f"checkpoint in {out} was trained with a different model config")
            previous = checkpoint.result

        result = train_loop(run.model, clips, run.train, resume=previous, workers=workers)
        save_checkpoint(out, result, run.train)
        (out / LOSS_FILE).write_text(loss_csv(result.losses), encoding="utf-8")
        (out / CONFIG_FILE).write_text(dump_config(run), encoding="utf-8")
        argv = ["train", "--config", str(out / CONFIG_FILE),
                *(arg for path in _split_paths(data) for arg in ("--data", str(path))), "--out", str(out)]
        _record(out, argv, seed=run.train.seed, config=_flatten(run))

    first = f"{result.losses[0]:.6f}" if result.losses else "-"
    last = f"{result.losses[-1]:.6f}" if result.losses else "-"
    rprint(
        Panel.fit(
            f"  Steps      : [cyan]{result.step}[/cyan]\n"
            f"  Parameters : [cyan]{result.weights.param_count:,}[/cyan]\n"
            f"  Loss       : [cyan]{first}[/cyan] -> [cyan]{last}[/cyan]\n"
            f"  Checkpoint : [cyan]{out}[/cyan]",
            title="rcdm train",
            border_style="green",
        )
    )


@app.command()
def infer(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint directory."),
    input_dir: Path = typer.Option(..., "--in", help="LR clip directory."),
    out: Path = typer.Option(..., "--out", help="HR clip directory to write."),
    mode: str = typer.Option("center", "--mode", help="Window mode: center or causal."),
) -> None:
    """Super-resolve an LR clip with a trained checkpoint, cropped to the HR size recorded by degrade."""
    with _errors():
        ckpt, input_dir, out = ckpt.resolve(), input_dir.resolve(), out.resolve()
        if out in (ckpt, input_dir):
            raise ConfigError("--out must differ from the checkpoint and input directories")
        weights = load_checkpoint(ckpt).weights
        workers = worker_count()
        restored = super_resolve_clip(read_clip(input_dir, workers=workers), weights, mode)
        write_clip(restored, out, workers=workers)
        argv = ["infer", "--ckpt", str(ckpt), "--in", str(input_dir), "--mode", mode, "--out", str(out)]
        _record(out, argv, config={f"model.{k}": v for k, v in weights.config.to_dict().items()})
    h, w = restored.extents
    rprint(f"[green]Wrote[/green] {len(restored)} frames ({h}x{w}) to [bold]{out}[/bold]")


@app.command("eval")
def evaluate(
    ref: Path = typer.Option(..., "--ref", help="Reference HR clip directory."),
    test: Path = typer.Option(..., "--test", help="Clip directory to score."),
    metrics: str = typer.Option(",".join(METRICS), "--metrics", help="Comma-separated metrics."),
    crop_border: int = typer.Option(4, "--crop-border", help="Pixels cropped from each border."),
    out: Path | None = typer.Option(None, "--out", help="CSV to write; printed when omitted."),
    baseline: Path | None = typer.Option(None, "--baseline", help="Ablated clip to compare against."),
    ablation: bool = typer.Option(False, "--ablation", help="Emit per-frame SSIM ratios over --baseline."),
) -> None:
    """Score a restored clip against its reference, per frame plus the mean."""
    with _errors():
        names = tuple(m.strip() for m in metrics.split(",") if m.strip())
        if ablation and baseline is None:
            raise ConfigError("--ablation needs --baseline")
        ref, test = ref.resolve(), test.resolve()
        inputs = [ref, test] + ([baseline.resolve()] if baseline is not None else [])
        if out is not None:
            out = out.resolve()
            if out.parent in inputs or (out.parent / CLIP_META).exists():
                raise ConfigError("--out must not be inside a clip directory")
        workers = worker_count()
        ref_clip, test_clip = read_clip(ref, workers=workers), read_clip(test, workers=workers)
        if ablation:
            assert baseline is not None
            rows = ablation_rows(ref_clip, test_clip, read_clip(baseline.resolve(), workers=workers),
                                 crop_border, workers=workers)
            text = ablation_csv(rows)
        else:
            scores = evaluate_clip(ref_clip, test_clip, names, crop_border, workers=workers)
            text = scores_csv(scores, names)

        if out is None:
            console.print(text, end="", markup=False, highlight=False)
            return
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        argv = ["eval", "--ref", str(ref), "--test", str(test), "--metrics", ",".join(names),
                "--crop-border", str(crop_border), "--out", str(out)]
        if baseline is not None:
            argv += ["--baseline", str(baseline.resolve())]
        if ablation:
            argv.append("--ablation")
        _record(out.parent, argv, config={"metrics": ",".join(names), "crop_border": crop_border})

    if ablation:
        rprint(f"[green]Wrote[/green] ablation ratios to [bold]{out}[/bold]")
        return
    mean = mean_score(scores)
    table = Table(title="Mean scores", show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan")
    table.add_column("Value")
    for name in names:
        value = getattr(mean, name)
        table.add_row(name, "inf" if value == float("inf") else f"{value:.6f}")
    console.print(table)
    rprint(f"[green]Wrote[/green] {len(scores)} frame rows to [bold]{out}[/bold]")


@app.command()
def analyze(
    config: Path | None = typer.Option(None, "--config", help="TOML config file."),
    preset: str | None = typer.Option(None, "--preset", help="Model preset (default rcdm)."),
    input_size: str = typer.Option("180x320", "--input-size", help="LR input size as HxW."),
    out: Path | None = typer.Option(None, "--out", help="Per-layer cost CSV to write."),
    family: bool = typer.Option(False, "--family", help="Also compare the five paper-scale variants."),
) -> None:
    """Count parameters and FLOPs per output frame."""
    with _errors():
        if config is not None and preset is not None:
            raise ConfigError("pass either --config or --preset, not both")
        model = load_config(config).model if config is not None else load_preset(preset or "rcdm")
        h, w = _parse_size(input_size)
        report = count_flops(model, h, w)
        if out is not None:
            out = out.resolve()
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(report.to_csv(), encoding="utf-8")
            argv = ["analyze", "--input-size", f"{h}x{w}", "--out", str(out)]
            argv += ["--config", str(config.resolve())] if config is not None else ["--preset", preset or "rcdm"]
            if family:
                argv.append("--family")
            _record(out.parent, argv, config={f"model.{k}": v for k, v in model.to_dict().items()})
        entries = family_report(h, w) if family else []

    rprint(
        f"[bold]{model.variant}[/bold] at {h}x{w}: "
        f"[cyan]{report.params_millions:.3f}M[/cyan] params, "
        f"[cyan]{report.gflops:.2f}[/cyan] GFLOPs ({FLOP_CONVENTION})"
    )
    if family:
        table = Table(title="Variant family", show_header=True, header_style="bold magenta")
        table.add_column("Preset", style="cyan", no_wrap=True)
        table.add_column("Params (M)", justify="right")
        table.add_column("GFLOPs", justify="right")
        for entry in entries:
            table.add_row(entry.preset, f"{entry.params / 1e6:.3f}", f"{entry.flops / 1e9:.2f}")
        console.print(table)
    if out is not None:
        rprint(f"[green]Wrote[/green] {len(report.rows)} layer rows to [bold]{out}[/bold]")


@app.command()
def selftest(
    level: str = typer.Option("quick", "--level", help="quick or full."),
    inject_fault: str | None = typer.Option(
        None, "--inject-fault", hidden=True, help=f"Corrupt a check on purpose: {', '.join(FAULTS)}."
    ),
) -> None:
    """Run the built-in invariant checks; exit 1 if any fails."""
    with _errors():
        results = run_selftest(level, inject_fault=inject_fault)

    table = Table(title=f"Self-test ({level})", show_header=True, header_style="bold magenta")
    table.add_column("Check", style="cyan", no_wrap=True)
    table.add_column("Status", no_wrap=True)
    table.add_column("Details")
    for r in results:
        status = "[green]✔ pass[/green]" if r.passed else "[red]✘ FAIL[/red]"
        table.add_row(r.name, status, r.detail)
    console.print(table)

    failed = [r.name for r in results if not r.passed]
    if failed:
        rprint(f"[red]Failed:[/red] {', '.join(failed)}")
        raise typer.Exit(1)
    rprint(f"\n[green]All {len(results)} checks passed.[/green]")


@app.command()
def rerun(
    meta: Path = typer.Argument(..., help="A run.meta file or the directory holding one."),
    out: Path | None = typer.Option(None, "--out", help="Write the outputs here instead."),
) -> None:
    """Replay the command recorded in a run.meta."""
    with _errors():
        manifest = read_run_meta(meta)
        argv = list(manifest.argv)
        if out is not None:
            if "--out" not in argv:
                raise ConfigError(f"recorded '{manifest.command}' command has no --out to redirect")
            argv[argv.index("--out") + 1] = str(out.resolve())
    rprint(f"[dim]Replaying:[/dim] rcdm {' '.join(argv)}")
    command = typer.main.get_command(app)
    try:
        code = command.main(args=argv, prog_name="rcdm", standalone_mode=False)
    except click.ClickException as exc:
        rprint(f"[red]Error:[/red] {exc.format_message()}")
        raise typer.Exit(2) from exc
    if isinstance(code, int) and code != 0:
        raise typer.Exit(code)
