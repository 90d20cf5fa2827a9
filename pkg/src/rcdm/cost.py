"""Parameter and FLOP accounting.

Convention: one multiply-accumulate is 2 FLOPs; FLOPs are per output frame
at the stated LR input size. Convolutions cost ``2 * positions * out * (in /
groups) * prod(kernel)``; bias additions are not counted. Bilinear
deformable sampling costs 8 FLOPs per neighbour corner pair, that is 16 per
tap per position (32 for trilinear). Haar analysis or synthesis costs 8
FLOPs per 2x2 block per channel. Elementwise operations (activations, adds,
norms, the memory update's two operations) count once per element; bilinear
upsampling costs 8 and bicubic upsampling 32 FLOPs per output element.
Pixel shuffle is free.

The table here is written out from the architecture independently of
:mod:`rcdm.model`, so the two can be checked against each other.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field

from rcdm.config import ModelConfig, load_preset
from rcdm.model import ModelWeights

FAMILY = (
    "rcdm_light-paper-scale",
    "rc2dm_dwt_state-paper-scale",
    "rc2dm-paper-scale",
    "rcdm-paper-scale",
    "rcdm_dwt_state-paper-scale",
)

FLOP_CONVENTION = "MAC = 2 FLOPs"


@dataclass(frozen=True)
class CostRow:
    layer: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    input_size: tuple[int, int] | None = None

    def add(self, layer: str, params: int = 0, flops: int = 0) -> None:
        self.rows.append(CostRow(layer, int(params), int(flops)))

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def params_millions(self) -> float:
        return self.total_params / 1e6

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_csv(self) -> str:
        """``layer,params,flops`` rows with a final ``TOTAL`` row."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["layer", "params", "flops"])
        for row in self.rows:
            writer.writerow([row.layer, row.params, row.flops])
        writer.writerow(["TOTAL", self.total_params, self.total_flops])
        return out.getvalue()


def conv_params(cin: int, cout: int, kernel: Sequence[int], groups: int = 1, bias: bool = True) -> int:
    taps = 1
    for k in kernel:
        taps *= k
    return cout * (cin // groups) * taps + (cout if bias else 0)


def conv_flops(positions: int, cin: int, cout: int, kernel: Sequence[int], groups: int = 1) -> int:
    taps = 1
    for k in kernel:
        taps *= k
    return 2 * positions * cout * (cin // groups) * taps


def count_params(weights: ModelWeights) -> CostReport:
    """Element count of every stored parameter, one row per layer."""
    report = CostReport()
    per_layer: dict[str, int] = {}
    for name, t in weights.items():
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + t.size
    for layer, count in per_layer.items():
        report.add(layer, count, 0)
    return report


def count_flops(config: ModelConfig, h: int, w: int) -> CostReport:
    """Closed-form parameters and FLOPs for one output frame at LR size ``h x w``."""
    f, fw, c, s = config.base_channels, config.wavelet_channels, config.in_channels, config.scale
    assert fw is not None
    t_len = config.window
    n_nb = t_len - 1
    p = h * w
    k3, k1, k7 = (3, 3), (1, 1), (7, 7)
    r = CostReport(input_size=(h, w))

    r.add("feat.conv_first", conv_params(c, f, k3), t_len * conv_flops(p, c, f, k3) + t_len * f * p)
    for i in range(config.n_feat_blocks or 0):
        r.add(f"feat.block{i}.conv1", conv_params(f, f, k3), t_len * conv_flops(p, f, f, k3) + t_len * f * p)
        r.add(f"feat.block{i}.conv2", conv_params(f, f, k3), t_len * conv_flops(p, f, f, k3) + t_len * f * p)

    if config.temporal_radius > 0:
        if config.early_fusion:
            r.add("align.fuse", conv_params(t_len * f, f, k1), conv_flops(p, t_len * f, f, k1))
        oc = config.offset_channels
        r.add("align.offset1", conv_params(2 * f, f, k3), n_nb * conv_flops(p, 2 * f, f, k3) + n_nb * f * p)
        r.add("align.offset2", conv_params(f, oc, k3), n_nb * conv_flops(p, f, oc, k3))
        if config.deformable_mode == "trilinear_3d":
            kd, per_tap, taps = (3, 3, 3), 32, 27
        else:
            kd, per_tap, taps = k3, 16, 9
        r.add(
            "align.dcn",
            conv_params(f, f, kd),
            t_len * conv_flops(p, f, f, kd) + per_tap * taps * t_len * p + t_len * f * p,
        )

    k333 = (3, 3, 3)
    for i in range(config.n_res3d):
        r.add(f"res3d.block{i}.conv1", conv_params(f, f, k333), conv_flops(t_len * p, f, f, k333) + t_len * f * p)
        r.add(f"res3d.block{i}.conv2", conv_params(f, f, k333), conv_flops(t_len * p, f, f, k333) + t_len * f * p)
    r.add("res3d.collapse", 0, (2 * t_len + 1) * f * p)

    if config.use_wavelet:
        q = p // 4
        r.add("wavelet.dwt", 0, 2 * f * p)
        width = 4 * f
        for j in range(config.n_wavelet_convs):
            r.add(
                f"wavelet.conv{j}",
                conv_params(width, 4 * fw, k3, groups=4),
                conv_flops(q, width, 4 * fw, k3, groups=4) + 4 * fw * q,
            )
            width = 4 * fw
        r.add("wavelet.upsample", 0, 8 * 4 * fw * p)
        r.add("wavelet.fuse", conv_params(f + 4 * fw, f, k1), conv_flops(p, f + 4 * fw, f, k1))

    if config.use_memory:
        r.add("memory", 1, 2 * f * p)
        if config.dwt_state:
            r.add(
                "memory.inject",
                conv_params(4 * f, 4 * f, k1),
                2 * f * p + conv_flops(p // 4, 4 * f, 4 * f, k1) + 2 * f * p + f * p,
            )
        else:
            r.add("memory.inject", conv_params(f, f, k1), conv_flops(p, f, f, k1) + f * p)

    hidden = config.convnext_expansion * f
    for i in range(config.n_convnext):
        block = f"recon.convnext{i}"
        r.add(f"{block}.dwconv", conv_params(f, f, k7, groups=f), conv_flops(p, f, f, k7, groups=f))
        r.add(f"{block}.norm", 2 * f, f * p)
        r.add(f"{block}.pw1", conv_params(f, hidden, k1), conv_flops(p, f, hidden, k1) + hidden * p)
        r.add(f"{block}.pw2", conv_params(hidden, f, k1), conv_flops(p, hidden, f, k1) + f * p)

    up = c * s * s
    r.add("recon.conv_up", conv_params(f, up, k3), conv_flops(p, f, up, k3))
    r.add("recon.pixel_shuffle", 0, 0)
    r.add("recon.bicubic_residual", 0, 32 * up * p + up * p)
    return r


@dataclass(frozen=True)
class FamilyEntry:
    preset: str
    variant: str
    params: int
    flops: int


def family_report(h: int = 180, w: int = 320) -> list[FamilyEntry]:
    """Parameters and FLOPs of the five paper-scale variant presets, in ascending size."""
    entries = []
    for name in FAMILY:
        config = load_preset(name)
        report = count_flops(config, h, w)
        entries.append(FamilyEntry(name, config.variant, report.total_params, report.total_flops))
    return entries
