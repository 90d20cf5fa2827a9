"""Built-in invariant checks behind ``rcdm selftest``."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from rcdm.config import ModelConfig, TrainConfig
from rcdm.cost import count_flops, count_params
from rcdm.errors import ConfigError, RcdmError
from rcdm.kernels import conv2d, deformable_conv2d, gelu, grid_sample, layer_norm, pixel_shuffle, pixel_unshuffle
from rcdm.metrics import gaussian_window, ssim
from rcdm.model import MemoryState, VideoWindow, build_model, memory_update, rcdm_forward
from rcdm.tensor import Rng, Tensor, full, grad_check, grad_check_params, sigmoid, square
from rcdm.trainer import OptimState, adamw_step, charbonnier_loss
from rcdm.wavelet import dwt2d_stacked, idwt2d_stacked

logger = logging.getLogger(__name__)

LEVELS = ("quick", "full")
FAULTS = ("dwt",)

UNIT_CONFIG = ModelConfig(base_channels=8, n_res3d=1, n_convnext=1)
UNIT_PARAMS = 27003


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass(frozen=True)
class _Context:
    full: bool
    fault: str | None

    def count(self, quick: int, full: int) -> int:
        return full if self.full else quick


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def _dwt_round_trip(ctx: _Context) -> tuple[bool, str]:
    rng = Rng(0, ("selftest", "dwt"))
    worst = 0.0
    for i in range(ctx.count(20, 200)):
        x = Tensor(rng.split(str(i)).uniform((3, 16, 16)))
        coeffs = dwt2d_stacked(x)
        if ctx.fault == "dwt" and i == 0:
            corrupted = coeffs.numpy().copy()
            corrupted[0, 0, 0] += 0.5
            coeffs = Tensor(corrupted)
        worst = max(worst, float(np.max(np.abs(idwt2d_stacked(coeffs).numpy() - x.numpy()))))
    return worst < 1e-12, f"max abs error {worst:.3e}"


def _energy(ctx: _Context) -> tuple[bool, str]:
    x = Tensor(Rng(0, ("selftest", "energy")).normal((4, 32, 32)))
    before = float(np.sum(x.numpy() ** 2))
    after = float(np.sum(dwt2d_stacked(x).numpy() ** 2))
    gap = abs(after - before) / before
    return gap < 1e-12, f"relative energy gap {gap:.3e}"


def _zero_offset_deformable(ctx: _Context) -> tuple[bool, str]:
    rng = Rng(0, ("selftest", "deform"))
    worst = 0.0
    for i in range(ctx.count(10, 100)):
        r = rng.split(str(i))
        x = Tensor(r.uniform((2, 3, 7, 9)))
        w = Tensor(r.uniform((4, 3, 3, 3), -1.0, 1.0))
        b = Tensor(r.uniform((4,), -1.0, 1.0))
        offsets = full((2, 18, 7, 9), 0.0, dtype="float64")
        gap = deformable_conv2d(x, w, b, offsets).numpy() - conv2d(x, w, b).numpy()
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst < 1e-6, f"max abs diff {worst:.3e}"


def _pixel_shuffle(ctx: _Context) -> tuple[bool, str]:
    x = Tensor(Rng(0, ("selftest", "shuffle")).uniform((2, 3 * 16, 5, 6)))
    y = pixel_shuffle(x, 4)
    exact = y.shape == (2, 3, 20, 24) and np.array_equal(pixel_unshuffle(y, 4).numpy(), x.numpy())
    return exact, f"shuffled shape {list(y.shape)}"


def _gradients(ctx: _Context) -> tuple[bool, str]:
    rng = Rng(0, ("selftest", "grad"))
    x = Tensor(rng.split("x").uniform((1, 2, 5, 5)))
    w = Tensor(rng.split("w").uniform((3, 2, 3, 3), -1.0, 1.0))
    gamma = Tensor(rng.split("gamma").uniform((2,), 0.5, 1.5))
    beta = Tensor(rng.split("beta").uniform((2,), -0.5, 0.5))
    gy = Tensor(rng.split("gy").uniform((1, 4, 4), 0.2, 3.8))
    gx = Tensor(rng.split("gx").uniform((1, 4, 4), 0.2, 3.8))
    cases: dict[str, Callable[[Tensor], Tensor]] = {
        "sigmoid": lambda t: sigmoid(t).sum(),
        "gelu": lambda t: square(gelu(t)).sum(),
        "conv2d": lambda t: square(conv2d(t, w)).sum(),
        "layer_norm": lambda t: square(layer_norm(t, gamma, beta, axis=1)).sum(),
        "grid_sample": lambda t: square(grid_sample(t, [gy, gx])).sum(),
    }
    errors = {name: grad_check(fn, x) for name, fn in cases.items()}
    if ctx.full:
        config = ModelConfig(
            base_channels=4, temporal_radius=1, scale=2, n_convnext=1, n_wavelet_convs=1, dtype="float64"
        )
        weights = build_model(config, seed=1)
        window = VideoWindow.center(Tensor(rng.split("window").uniform((3, 1, 3, 4, 4))))
        target = Tensor(rng.split("target").uniform((1, 3, 8, 8)))

        def loss(params: dict[str, Tensor]) -> Tensor:
            hr, _ = rcdm_forward(window, None, weights.with_params(params))
            return charbonnier_loss(hr.image, target)

        per_param = grad_check_params(loss, weights.params, coords_per_param=3)
        errors["model"] = max(per_param.values())
    worst_name = max(errors, key=errors.__getitem__)
    return errors[worst_name] < 1e-4, f"worst {worst_name} {errors[worst_name]:.3e}"


def _memory_closed_form(ctx: _Context) -> tuple[bool, str]:
    feat = full((1, 2, 2, 2), 1.0, dtype="float64")
    state = MemoryState(full((1, 2, 2, 2), 0.0, dtype="float64"), Tensor(0.0, dtype="float64"))
    for _ in range(4):
        state = memory_update(state, feat)
    m4 = float(state.m.numpy()[0, 0, 0, 0])
    beta = 0.3
    unrolled, ok = 0.0, True
    raw = Tensor(math.log(beta / (1.0 - beta)), dtype="float64")
    state = MemoryState(full((1, 1, 1, 1), 0.0, dtype="float64"), raw)
    one = full((1, 1, 1, 1), 1.0, dtype="float64")
    for t in range(1, 33):
        state = memory_update(state, one)
        unrolled = beta * unrolled + 1.0
        closed = (1.0 - beta**t) / (1.0 - beta)
        ok = ok and abs(float(state.m.numpy().item()) - closed) < 1e-9 and abs(unrolled - closed) < 1e-12
    return ok and abs(m4 - 1.875) < 1e-6, f"M4/H = {m4:.6f}"


def _ssim_oracle(ctx: _Context) -> tuple[bool, str]:
    rng = Rng(0, ("selftest", "ssim"))
    a = rng.split("a").uniform((16, 16))
    b = np.clip(a + rng.split("b").normal((16, 16), 0.1), 0.0, 1.0)
    same = ssim(a, a)
    constant = ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.25))
    expected = (2 * 0.5 * 0.25 + 1e-4) / (0.5**2 + 0.25**2 + 1e-4)

    window = gaussian_window()
    c1, c2 = 1e-4, 9e-4
    values = []
    for i in range(16 - 10):
        for j in range(16 - 10):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = float(np.sum(window * pa)), float(np.sum(window * pb))
            va = float(np.sum(window * (pa - ma) ** 2))
            vb = float(np.sum(window * (pb - mb) ** 2))
            cov = float(np.sum(window * (pa - ma) * (pb - mb)))
            values.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    brute = float(np.mean(values))
    gap = abs(ssim(a, b) - brute)
    ok = abs(same - 1.0) < 1e-12 and abs(constant - expected) < 1e-4 and gap < 1e-6
    return ok, f"ssim(x,x)={same:.12f} constant={constant:.6f} oracle gap {gap:.2e}"


def _adamw_oracle(ctx: _Context) -> tuple[bool, str]:
    cfg = TrainConfig()
    p = Tensor(np.array([1.0]), dtype="float64")
    grads = [0.5, -0.25, 1.0]
    state = OptimState.initial({"p": p})
    value, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        params, state = adamw_step({"p": p}, {"p": np.array([g])}, state, cfg)
        p = params["p"]
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat, v_hat = m / (1 - 0.9**t), v / (1 - 0.999**t)
        value = value - 4e-4 * (m_hat / (math.sqrt(v_hat) + 1e-8) + 1e-3 * value)
    gap = abs(float(p.numpy()[0]) - value)
    return gap < 1e-12, f"after 3 steps p={float(p.numpy()[0]):.12f}, gap {gap:.2e}"


def _cost_accounting(ctx: _Context) -> tuple[bool, str]:
    counted = count_params(build_model(UNIT_CONFIG)).total_params
    closed = count_flops(UNIT_CONFIG, 16, 16).total_params
    return counted == closed == UNIT_PARAMS, f"counted {counted}, closed form {closed}, expected {UNIT_PARAMS}"


def _shape_contract(ctx: _Context) -> tuple[bool, str]:
    config = ModelConfig(base_channels=8, n_convnext=1)
    weights = build_model(config)
    rng = Rng(0, ("selftest", "shape"))
    memory = None
    shapes = set()
    hr_shape: tuple[int, ...] = ()
    for step in range(ctx.count(3, 10)):
        frames = Tensor(rng.split(str(step)).uniform((5, 1, 3, 16, 16), dtype="float32"))
        hr, memory = rcdm_forward(VideoWindow.center(frames), memory, weights)
        hr_shape = hr.shape
        shapes.add(memory.m.shape)
    ok = hr_shape == (1, 3, 64, 64) and shapes == {(1, 8, 16, 16)}
    return ok, f"HR {list(hr_shape)}, memory {sorted(shapes)}"


CHECKS: dict[str, Callable[[_Context], tuple[bool, str]]] = {
    "dwt round-trip": _dwt_round_trip,
    "wavelet energy": _energy,
    "zero-offset deformable": _zero_offset_deformable,
    "pixel shuffle": _pixel_shuffle,
    "gradient checks": _gradients,
    "memory closed form": _memory_closed_form,
    "ssim oracle": _ssim_oracle,
    "adamw oracle": _adamw_oracle,
    "cost accounting": _cost_accounting,
    "shape contract": _shape_contract,
}


def run_selftest(level: str = "quick", *, inject_fault: str | None = None) -> list[CheckResult]:
    """Run every check; a check that raises counts as failed."""
    if level not in LEVELS:
        raise ConfigError(f"Unknown selftest level '{level}'. Supported: {', '.join(LEVELS)}")
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ConfigError(f"Unknown fault '{inject_fault}'. Supported: {', '.join(FAULTS)}")
    ctx = _Context(full=level == "full", fault=inject_fault)
    results = []
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            passed, detail = check(ctx)
        except RcdmError as exc:
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - start
        logger.debug("%s: %s (%s, %.2fs)", name, "ok" if passed else "FAILED", detail, elapsed)
        results.append(CheckResult(name, passed, detail, elapsed))
    return results
