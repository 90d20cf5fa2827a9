"""Model and training configuration, variant recipes and TOML loading."""

from __future__ import annotations

import dataclasses
import logging
import os
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Any

from rcdm.errors import ConfigError, RcdmIOError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger(__name__)

VARIANTS = ("rcdm", "rcdm_light", "rc2dm", "rcdm_dwt_state", "rc2dm_dwt_state")
DEFORMABLE_MODES = ("per_frame_2d", "trilinear_3d")
LOSSES = ("charbonnier", "l1", "l2")
WINDOW_MODES = ("center", "causal")
TRACKS = ("bi", "bd")
DTYPES = ("float32", "float64")


@dataclass(frozen=True)
class VariantRecipe:
    """Structural defaults a variant name stands for."""

    early_fusion: bool
    dwt_state: bool
    wavelet_ratio: float
    n_feat_blocks: int


RECIPES: dict[str, VariantRecipe] = {
    "rcdm": VariantRecipe(early_fusion=False, dwt_state=False, wavelet_ratio=2.0, n_feat_blocks=1),
    "rcdm_light": VariantRecipe(early_fusion=False, dwt_state=False, wavelet_ratio=1.5, n_feat_blocks=0),
    "rc2dm": VariantRecipe(early_fusion=True, dwt_state=False, wavelet_ratio=2.0, n_feat_blocks=1),
    "rcdm_dwt_state": VariantRecipe(early_fusion=False, dwt_state=True, wavelet_ratio=2.0, n_feat_blocks=1),
    "rc2dm_dwt_state": VariantRecipe(early_fusion=True, dwt_state=True, wavelet_ratio=2.0, n_feat_blocks=1),
}


def _check_int(name: str, value: Any, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")


def _check_float(name: str, value: Any, minimum: float, *, inclusive: bool = True) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if value < minimum or (not inclusive and value == minimum):
        op = ">=" if inclusive else ">"
        raise ConfigError(f"{name} must be {op} {minimum}, got {value}")


def _check_choice(name: str, value: Any, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"Unknown {name} '{value}'. Supported: {', '.join(choices)}")


def _check_bool(name: str, value: Any) -> None:
    if not isinstance(value, bool):
        raise ConfigError(f"{name} must be true or false, got {value!r}")


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one model.

    ``variant`` fills in ``early_fusion``, ``dwt_state``, ``wavelet_channels``
    and ``n_feat_blocks`` when they are left as ``None``; explicit values win.
    """

    variant: str = "rcdm"
    temporal_radius: int = 2
    scale: int = 4
    in_channels: int = 3
    base_channels: int = 16
    wavelet_channels: int | None = None
    n_feat_blocks: int | None = None
    n_res3d: int = 1
    n_wavelet_convs: int = 2
    n_convnext: int = 2
    convnext_expansion: int = 4
    use_memory: bool = True
    use_wavelet: bool = True
    early_fusion: bool | None = None
    dwt_state: bool | None = None
    deformable_mode: str = "per_frame_2d"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        _check_choice("variant", self.variant, VARIANTS)
        recipe = RECIPES[self.variant]
        if self.early_fusion is None:
            object.__setattr__(self, "early_fusion", recipe.early_fusion)
        if self.dwt_state is None:
            object.__setattr__(self, "dwt_state", recipe.dwt_state)
        if self.n_feat_blocks is None:
            object.__setattr__(self, "n_feat_blocks", recipe.n_feat_blocks)
        _check_int("base_channels", self.base_channels, 1)
        if self.wavelet_channels is None:
            width = max(1, round(recipe.wavelet_ratio * self.base_channels))
            object.__setattr__(self, "wavelet_channels", width)

        _check_int("temporal_radius", self.temporal_radius, 0)
        _check_int("scale", self.scale, 1)
        _check_int("in_channels", self.in_channels, 1)
        _check_int("wavelet_channels", self.wavelet_channels, 1)
        _check_int("n_feat_blocks", self.n_feat_blocks, 0)
        _check_int("n_res3d", self.n_res3d, 0)
        _check_int("n_wavelet_convs", self.n_wavelet_convs, 1)
        _check_int("n_convnext", self.n_convnext, 0)
        _check_int("convnext_expansion", self.convnext_expansion, 1)
        for name in ("use_memory", "use_wavelet", "early_fusion", "dwt_state"):
            _check_bool(name, getattr(self, name))
        _check_choice("deformable_mode", self.deformable_mode, DEFORMABLE_MODES)
        _check_choice("dtype", self.dtype, DTYPES)

    @property
    def window(self) -> int:
        """Frames per window, ``2N + 1``."""
        return 2 * self.temporal_radius + 1

    @property
    def offset_channels(self) -> int:
        return 81 if self.deformable_mode == "trilinear_3d" else 18

    def replace(self, **changes: Any) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and loop settings; the optimiser defaults are AdamW at lr 4e-4, wd 1e-3."""

    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3
    steps: int = 300
    batch: int = 1
    seed: int = 0
    loss: str = "charbonnier"
    charbonnier_eps: float = 1e-3
    grad_clip_norm: float | None = None
    mode: str = "center"
    track: str = "bi"
    log_every: int = 25

    def __post_init__(self) -> None:
        _check_float("lr", self.lr, 0.0)
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            _check_float(name, value, 0.0)
            if value >= 1.0:
                raise ConfigError(f"{name} must be < 1, got {value}")
        _check_float("eps", self.eps, 0.0, inclusive=False)
        _check_float("weight_decay", self.weight_decay, 0.0)
        _check_int("steps", self.steps, 0)
        _check_int("batch", self.batch, 1)
        _check_int("seed", self.seed, 0)
        _check_choice("loss", self.loss, LOSSES)
        _check_float("charbonnier_eps", self.charbonnier_eps, 0.0, inclusive=False)
        if self.grad_clip_norm is not None:
            _check_float("grad_clip_norm", self.grad_clip_norm, 0.0, inclusive=False)
        _check_choice("mode", self.mode, WINDOW_MODES)
        _check_choice("track", self.track, TRACKS)
        _check_int("log_every", self.log_every, 1)

    def replace(self, **changes: Any) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Presets and files
# ---------------------------------------------------------------------------


def list_presets() -> list[str]:
    """Names of the model presets shipped with the package."""
    presets = files("rcdm.presets")
    return sorted(item.name[: -len(".toml")] for item in presets.iterdir() if item.name.endswith(".toml"))


def _preset_mapping(name: str) -> dict[str, Any]:
    resource = files("rcdm.presets").joinpath(f"{name}.toml")
    if not resource.is_file():
        raise ConfigError(f"Unknown preset '{name}'. Available: {', '.join(list_presets())}")
    data = tomllib.loads(resource.read_text(encoding="utf-8"))
    return dict(data.get("model", {}))


def _build(cls: type, section: str, values: Mapping[str, Any]) -> Any:
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"Unknown config key '{section}.{key}'")
    return cls(**values)


def load_preset(name: str, **overrides: Any) -> ModelConfig:
    """Model config of a shipped preset, with optional field overrides."""
    values = _preset_mapping(name)
    values.update(overrides)
    return _build(ModelConfig, "model", values)


@dataclass(frozen=True)
class RunConfig:
    """A parsed config file: the model plus the training settings."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def config_from_mapping(data: Mapping[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from ``{"model": {...}, "train": {...}}``."""
    for section in data:
        if section not in ("model", "train"):
            raise ConfigError(f"Unknown config section '{section}'")
    model_values = dict(data.get("model", {}))
    preset = model_values.pop("preset", None)
    if preset is not None:
        base = _preset_mapping(str(preset))
        base.update(model_values)
        model_values = base
    model = _build(ModelConfig, "model", model_values)
    train = _build(TrainConfig, "train", dict(data.get("train", {})))
    return RunConfig(model, train)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return config_from_mapping(data)


def load_config(path: Path) -> RunConfig:
    """Read a TOML config file with ``[model]`` and ``[train]`` sections."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RcdmIOError(f"Cannot read config {path}: {exc.strerror}") from exc
    config = parse_config(text, str(path))
    logger.debug("Loaded config %s: %s", path, config)
    return config


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    return repr(value)


def dump_config(config: RunConfig) -> str:
    """Render *config* as TOML with every default materialised.

    ``None`` values are omitted, which TOML reads back as the default.
    """
    lines = []
    for section, values in (("model", config.model.to_dict()), ("train", config.train.to_dict())):
        lines.append(f"[{section}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in values.items() if v is not None]
        lines.append("")
    return "\n".join(lines)


def worker_count() -> int:
    """Threads for per-frame work: the CPU count, capped by ``RCDM_THREADS``."""
    available = os.cpu_count() or 1
    raw = os.environ.get("RCDM_THREADS")
    if raw is None or raw.strip() == "":
        return available
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"RCDM_THREADS must be a positive integer, got '{raw}'") from exc
    if cap < 1:
        raise ConfigError(f"RCDM_THREADS must be a positive integer, got '{raw}'")
    return min(available, cap)
