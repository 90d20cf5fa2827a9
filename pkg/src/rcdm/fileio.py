"""On-disk formats: RCT tensors, PPM frames, clip directories, tensor manifests, run.meta.

RCT layout: ``b"RCT1"``, u8 dtype code (1 float32, 2 float64), u8 rank,
``rank`` little-endian u32 extents, then the raw little-endian elements in
row-major order.
"""

from __future__ import annotations

import logging
import math
import shlex
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from rcdm import __version__
from rcdm.degradation import VideoClip, map_frames
from rcdm.errors import RcdmIOError, ShapeError
from rcdm.tensor import Tensor

logger = logging.getLogger(__name__)

RCT_MAGIC = b"RCT1"
_RCT_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_RCT_NAMES = {"float32": 1, "float64": 2}

FRAME_PATTERN = "frame_{:05d}.ppm"
CLIP_META = "clip.meta"
RUN_META = "run.meta"
MANIFEST = "manifest.txt"


# ---------------------------------------------------------------------------
# RCT tensors
# ---------------------------------------------------------------------------


def encode_rct(t: Tensor) -> bytes:
    code = _RCT_NAMES[t.dtype]
    header = RCT_MAGIC + struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.numpy().astype(_RCT_CODES[code], copy=False).tobytes(order="C")


def decode_rct(raw: bytes, source: str = "<bytes>") -> Tensor:
    if raw[:4] != RCT_MAGIC:
        raise RcdmIOError(f"{source}: not an RCT file (bad magic)")
    if len(raw) < 6:
        raise RcdmIOError(f"{source}: truncated header")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _RCT_CODES:
        raise RcdmIOError(f"{source}: unknown dtype code {code}")
    offset = 6 + 4 * rank
    if len(raw) < offset:
        raise RcdmIOError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 6)
    dtype = _RCT_CODES[code]
    expected = offset + math.prod(shape) * dtype.itemsize
    if len(raw) != expected:
        raise RcdmIOError(f"{source}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)
    return Tensor(data, dtype=dtype.newbyteorder("="))


def write_rct(t: Tensor, path: Path) -> None:
    Path(path).write_bytes(encode_rct(t))


def read_rct(path: Path) -> Tensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise RcdmIOError(f"Cannot read {path}: {exc.strerror}") from exc
    return decode_rct(raw, str(path))


# ---------------------------------------------------------------------------
# PPM frames
# ---------------------------------------------------------------------------


def to_bytes(image: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] to ``[H, W, 3]`` uint8, rounding half up."""
    clipped = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(t: Tensor | np.ndarray, path: Path) -> None:
    """Write a ``[3, H, W]`` image as binary P6 with maxval 255."""
    data = t.numpy() if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"PPM frames are [3, H, W], got {list(data.shape)}")
    Image.fromarray(to_bytes(data)).save(path, format="PPM")


def read_ppm(path: Path) -> Tensor:
    """Read a P6 file into ``[3, H, W]`` float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "RGB":
                raise RcdmIOError(f"{path}: not an 8-bit RGB PPM ({img.format}, {img.mode})")
            data = np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise RcdmIOError(f"{path}: malformed PPM ({exc})") from exc
    return Tensor(data.transpose(2, 0, 1).astype(np.float32) / 255.0, dtype="float32")


# ---------------------------------------------------------------------------
# key=value files
# ---------------------------------------------------------------------------


def write_key_values(path: Path, values: Mapping[str, object]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


def read_key_values(path: Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RcdmIOError(f"Cannot read {path}: {exc.strerror}") from exc
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RcdmIOError(f"{path}:{number}: expected key=value, got '{line}'")
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# Clip directories
# ---------------------------------------------------------------------------


def write_clip(clip: VideoClip, directory: Path, *, workers: int = 1) -> list[Path]:
    """Write ``frame_%05d.ppm`` files plus ``clip.meta``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t_len, c, h, w = clip.frames.shape
    paths = [directory / FRAME_PATTERN.format(t) for t in range(t_len)]

    def write(frame: np.ndarray, t: int) -> np.ndarray:
        write_ppm(frame, paths[t])
        return frame

    map_frames(write, clip.frame_list(), workers)
    meta: dict[str, object] = {"T": t_len, "c": c, "H": h, "W": w, "frame_rate": clip.frame_rate}
    if clip.first_target:
        meta["first_target"] = clip.first_target
    if clip.source_extents is not None:
        meta["source_H"], meta["source_W"] = clip.source_extents
    write_key_values(directory / CLIP_META, meta)
    logger.debug("Wrote %d frames to %s", t_len, directory)
    return paths


def read_clip(directory: Path, *, workers: int = 1) -> VideoClip:
    directory = Path(directory)
    meta_path = directory / CLIP_META
    if not meta_path.is_file():
        raise RcdmIOError(f"{directory} is not a clip directory (no {CLIP_META})")
    meta = read_key_values(meta_path)
    try:
        t_len, c, h, w = (int(meta[k]) for k in ("T", "c", "H", "W"))
        frame_rate = float(meta.get("frame_rate", 25.0))
        first_target = int(meta.get("first_target", 0))
        source = (int(meta["source_H"]), int(meta["source_W"])) if "source_H" in meta else None
    except (KeyError, ValueError) as exc:
        raise RcdmIOError(f"{meta_path}: incomplete or invalid metadata ({exc})") from exc

    def read(_: np.ndarray | None, t: int) -> np.ndarray:
        return read_ppm(directory / FRAME_PATTERN.format(t)).numpy()

    frames = map_frames(read, [None] * t_len, workers)  # type: ignore[list-item]
    for t, frame in enumerate(frames):
        if frame.shape != (c, h, w):
            raise RcdmIOError(f"frame {t} of {directory} is {list(frame.shape)}, clip.meta says {[c, h, w]}")
    return VideoClip(Tensor(np.stack(frames), dtype="float32"), frame_rate, first_target, source)


# ---------------------------------------------------------------------------
# Tensor manifests
# ---------------------------------------------------------------------------


def write_tensor_dir(directory: Path, tensors: Mapping[str, Tensor]) -> None:
    """One RCT file per named tensor plus ``manifest.txt`` lines ``path<TAB>file<TAB>shape-csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for index, (name, t) in enumerate(tensors.items()):
        file_name = f"t{index:04d}.rct"
        write_rct(t, directory / file_name)
        lines.append(f"{name}\t{file_name}\t{','.join(str(d) for d in t.shape)}\n")
    (directory / MANIFEST).write_text("".join(lines), encoding="utf-8")


def read_tensor_dir(directory: Path) -> dict[str, Tensor]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise RcdmIOError(f"{directory} has no {MANIFEST}")
    tensors: dict[str, Tensor] = {}
    for number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise RcdmIOError(f"{manifest}:{number}: expected path<TAB>file<TAB>shape")
        name, file_name, shape_csv = parts
        t = read_rct(directory / file_name)
        shape = tuple(int(d) for d in shape_csv.split(",")) if shape_csv else ()
        if t.shape != shape:
            raise RcdmIOError(f"{file_name}: shape {list(t.shape)} disagrees with manifest {list(shape)}")
        tensors[name] = t
    if not tensors:
        raise RcdmIOError(f"{manifest} lists no tensors")
    return tensors


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """What produced a command's outputs: enough to run it again."""

    command: str
    argv: list[str]
    seed: int | None = None
    config: dict[str, object] = field(default_factory=dict)
    version: str = __version__


def write_run_meta(directory: Path, manifest: RunManifest) -> Path:
    values: dict[str, object] = {
        "command": manifest.command,
        "argv": shlex.join(manifest.argv),
        "seed": "" if manifest.seed is None else manifest.seed,
        "version": manifest.version,
    }
    values.update({f"config.{k}": v for k, v in manifest.config.items()})
    path = Path(directory) / RUN_META
    write_key_values(path, values)
    return path


def read_run_meta(path: Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / RUN_META
    values = read_key_values(path)
    if "command" not in values or "argv" not in values:
        raise RcdmIOError(f"{path}: missing command or argv")
    config = {k[len("config.") :]: v for k, v in values.items() if k.startswith("config.")}
    seed = int(values["seed"]) if values.get("seed") else None
    return RunManifest(
        values["command"], shlex.split(values["argv"]), seed, config, values.get("version", "")
    )
