"""Dense tensors with a per-forward-pass tape and reverse-mode gradients.

A :class:`Tensor` wraps a row-major numpy buffer of ``float32`` or ``float64``
elements. Every differentiable operation records one node on the active
:class:`Tape`; :func:`backward` walks that tape once in reverse and
accumulates gradients into the leaves that asked for them.

Shapes never broadcast. Operations that combine two tensors require equal
shapes (or a Python scalar); repetition goes through :func:`tile`.
"""

from __future__ import annotations

import contextlib
import logging
import math
import threading
import zlib
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from rcdm.errors import ConfigError, NumericError, RcdmError, ShapeError

logger = logging.getLogger(__name__)

DTYPES: dict[str, np.dtype] = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]
Scalar = int | float


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs, its output identity and its backward rule."""

    inputs: tuple[Tensor, ...]
    output_id: int
    backward: BackwardFn
    tape: Tape
    index: int


class Tape:
    """Append-only record of the operations of one forward pass.

    Nodes are appended as operations run, so the list is topologically
    ordered. Use as a context manager to give a forward pass its own tape;
    outside any ``with`` block operations land on a per-thread default tape.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> Node:
        node = Node(inputs, id(output), backward, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def release(self) -> None:
        """Drop every recorded node."""
        self.nodes.clear()

    def __enter__(self) -> Tape:
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _STATE.tapes.remove(self)


class _State(threading.local):
    def __init__(self) -> None:
        self.tapes: list[Tape] = [Tape()]
        self.grad_enabled = True


_STATE = _State()


def active_tape() -> Tape:
    """Return the tape new operations are recorded on in this thread."""
    return _STATE.tapes[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


def _as_dtype(dtype: str | np.dtype | type) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ConfigError(f"Unsupported dtype '{dtype}'. Supported: float32, float64")
        return DTYPES[dtype]
    resolved = np.dtype(dtype)
    if resolved not in DTYPES.values():
        raise ConfigError(f"Unsupported dtype '{resolved}'. Supported: float32, float64")
    return resolved


class Tensor:
    """Immutable dense array with optional gradient tracking."""

    # keep numpy from broadcasting over us when a numpy scalar is on the left
    __array_ufunc__ = None

    def __init__(
        self,
        data: object,
        *,
        dtype: str | np.dtype | None = None,
        requires_grad: bool = False,
    ) -> None:
        arr = np.asarray(data)
        if dtype is None:
            resolved = arr.dtype if arr.dtype in DTYPES.values() else DTYPES["float32"]
        else:
            resolved = _as_dtype(dtype)
        self.data: np.ndarray = np.array(arr, dtype=resolved, order="C", copy=True)
        self.data.setflags(write=False)
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        """Adopt a freshly computed array without copying it."""
        out = cls.__new__(cls)
        if arr.dtype not in DTYPES.values():
            arr = arr.astype(np.float64)
        out.data = np.ascontiguousarray(arr)
        out.data.setflags(write=False)
        out.requires_grad = False
        out._grad = None
        out._node = None
        return out

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return self.data.dtype.name

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient, or ``None`` before any backward pass reached this leaf."""
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        """Read-only view of the element buffer."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype)
        self._grad = grad.copy() if self._grad is None else self._grad + grad

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other: Tensor | Scalar) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Scalar) -> Tensor:
        return scalar_add(self, other)

    def __sub__(self, other: Tensor | Scalar) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> Tensor:
        return scalar_add(neg(self), other)

    def __mul__(self, other: Tensor | Scalar) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Scalar) -> Tensor:
        return scalar_mul(self, other)

    def __truediv__(self, other: Tensor | Scalar) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return neg(self)

    # -- method forms ------------------------------------------------------

    def sum(self, axes: int | Sequence[int] | None = None) -> Tensor:
        return reduce("sum", self, axes)

    def mean(self, axes: int | Sequence[int] | None = None) -> Tensor:
        return reduce("mean", self, axes)

    def reshape(self, *shape: int | Sequence[int]) -> Tensor:
        if len(shape) == 1 and not isinstance(shape[0], int):
            return reshape(self, tuple(shape[0]))
        return reshape(self, tuple(shape))  # type: ignore[arg-type]

    def transpose(self, axes: Sequence[int]) -> Tensor:
        return transpose(self, axes)

    def astype(self, dtype: str) -> Tensor:
        return cast(self, dtype)

    def backward(self, *, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap *data* as the output of an operation over *inputs*.

    *backward_fn* maps the output gradient to one gradient (or ``None``) per
    input. Nothing is recorded under :func:`no_grad` or when no input
    requires a gradient.
    """
    out = Tensor._wrap(np.asarray(data))
    if _STATE.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = active_tape().record(tuple(inputs), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Creation
# ---------------------------------------------------------------------------


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if any(d < 0 for d in dims):
        raise ShapeError(f"Extents must be non-negative, got {dims}")
    return dims


def tensor(
    data: object,
    *,
    shape: Sequence[int] | None = None,
    dtype: str = "float32",
    requires_grad: bool = False,
) -> Tensor:
    """Build a tensor from nested data, optionally laid out row-major into *shape*."""
    arr = np.asarray(data, dtype=_as_dtype(dtype))
    if shape is not None:
        dims = _check_shape(shape)
        if arr.size != math.prod(dims):
            raise ShapeError(f"{arr.size} elements cannot fill shape {list(dims)}")
        arr = arr.reshape(dims)
    return Tensor(arr, requires_grad=requires_grad)


def create(
    shape: Sequence[int],
    *,
    fill: float | str | None = None,
    data: Sequence[float] | np.ndarray | None = None,
    rng: Rng | None = None,
    dtype: str = "float32",
    requires_grad: bool = False,
) -> Tensor:
    """Create a tensor from explicit *data* or a *fill* rule.

    *fill* is a number, ``"iota"`` or ``"uniform"`` (which needs *rng*).
    """
    dims = _check_shape(shape)
    if data is not None:
        return tensor(data, shape=dims, dtype=dtype, requires_grad=requires_grad)
    if fill == "iota":
        return iota(dims, dtype=dtype, requires_grad=requires_grad)
    if fill == "uniform":
        if rng is None:
            raise ConfigError("uniform fill needs an explicit Rng")
        return uniform(dims, rng, dtype=dtype, requires_grad=requires_grad)
    return full(dims, 0.0 if fill is None else float(fill), dtype=dtype, requires_grad=requires_grad)


def zeros(shape: Sequence[int], *, dtype: str = "float32", requires_grad: bool = False) -> Tensor:
    return full(shape, 0.0, dtype=dtype, requires_grad=requires_grad)


def full(
    shape: Sequence[int], value: float, *, dtype: str = "float32", requires_grad: bool = False
) -> Tensor:
    arr = np.full(_check_shape(shape), value, dtype=_as_dtype(dtype))
    return Tensor(arr, requires_grad=requires_grad)


def iota(shape: Sequence[int], *, dtype: str = "float32", requires_grad: bool = False) -> Tensor:
    """Tensor whose elements count 0, 1, 2, ... in row-major order."""
    dims = _check_shape(shape)
    arr = np.arange(math.prod(dims), dtype=_as_dtype(dtype)).reshape(dims)
    return Tensor(arr, requires_grad=requires_grad)


def uniform(
    shape: Sequence[int],
    rng: Rng,
    *,
    low: float = 0.0,
    high: float = 1.0,
    dtype: str = "float32",
    requires_grad: bool = False,
) -> Tensor:
    arr = rng.uniform(_check_shape(shape), low, high, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def normal(
    shape: Sequence[int],
    rng: Rng,
    *,
    std: float = 1.0,
    dtype: str = "float32",
    requires_grad: bool = False,
) -> Tensor:
    arr = rng.normal(_check_shape(shape), std, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


class Rng:
    """Seedable, splittable counter-based generator.

    Streams are addressed by ``(seed, path)``; :meth:`split` derives a child
    stream from a name, so the same name always yields the same numbers
    regardless of what other streams drew. Philox keeps the output identical
    across platforms.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()) -> None:
        if int(seed) < 0:
            raise ConfigError(f"Seeds must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        spawn_key = tuple(zlib.crc32(name.encode("utf-8")) for name in self.path)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def split(self, name: str) -> Rng:
        return Rng(self.seed, (*self.path, name))

    def uniform(
        self, shape: Sequence[int], low: float = 0.0, high: float = 1.0, *, dtype: str = "float64"
    ) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(shape)).astype(_as_dtype(dtype))

    def normal(self, shape: Sequence[int], std: float = 1.0, *, dtype: str = "float64") -> np.ndarray:
        return (self._gen.standard_normal(size=tuple(shape)) * std).astype(_as_dtype(dtype))

    def integers(self, low: int, high: int, size: int | None = None) -> np.ndarray | int:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '-'})"


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ")


def add(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_add(a, b)
    _check_same(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_add(a, -float(b))
    _check_same(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    _check_same(a, b, "mul")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor | Scalar) -> Tensor:
    if not isinstance(b, Tensor):
        if float(b) == 0.0:
            raise NumericError("div: zero divisor")
        return scalar_mul(a, 1.0 / float(b))
    _check_same(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: divisor tensor contains an exact zero")
    return record(
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def scalar_mul(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return record(a.data * s, (a,), lambda g: (g * s,))


def scalar_add(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)
    return record(a.data + s, (a,), lambda g: (g,))


_BINARY: dict[str, Callable[[Tensor, Tensor | Scalar], Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,  # type: ignore[dict-item]
    "scalar_add": scalar_add,  # type: ignore[dict-item]
}


def elementwise(op: str, a: Tensor, b: Tensor | Scalar) -> Tensor:
    """Dispatch one of add, sub, mul, div, scalar_mul, scalar_add by name."""
    if op not in _BINARY:
        raise ConfigError(f"Unknown elementwise op '{op}'. Supported: {', '.join(_BINARY)}")
    return _BINARY[op](a, b)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (g / (2.0 * out),))


def abs_(a: Tensor) -> Tensor:
    return record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def cast(a: Tensor, dtype: str) -> Tensor:
    target = _as_dtype(dtype)
    source = a.data.dtype
    return record(a.data.astype(target), (a,), lambda g: (g.astype(source),))


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"Axis {axis} is out of range for rank {ndim}")
    return axis % ndim


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    pos = np.arange(-before, n + after)
    pos = np.where(pos < 0, -pos, pos)
    return np.where(pos >= n, 2 * (n - 1) - pos, pos)


def _scatter_axis(g: np.ndarray, index: np.ndarray, n: int, axis: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = n
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, (slice(None),) * axis + (index,), g)
    return out


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "zero") -> Tensor:
    """Pad every axis by ``(before, after)`` with zeros or a mirror reflection.

    Reflection excludes the edge sample (``[1, 2, 3] -> [2, 1, 2, 3, 2]``)
    and needs each width to be smaller than the axis extent.
    """
    widths = [(int(b), int(f)) for b, f in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for rank {a.ndim}")
    if any(b < 0 or f < 0 for b, f in widths):
        raise ShapeError(f"pad: widths must be non-negative, got {widths}")

    if mode == "zero":
        interior = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
        return record(np.pad(a.data, widths), (a,), lambda g: (g[interior],))

    if mode != "reflect":
        raise ConfigError(f"Unknown pad mode '{mode}'. Supported: zero, reflect")

    for (b, f), n in zip(widths, a.shape):
        if (b or f) and (b >= n or f >= n):
            raise ShapeError(f"pad: reflect width {(b, f)} needs an axis longer than {max(b, f)}")

    indices = [_reflect_index(n, b, f) for (b, f), n in zip(widths, a.shape)]
    out = a.data
    for ax, idx in enumerate(indices):
        out = np.take(out, idx, axis=ax)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        for ax in reversed(range(a.ndim)):
            g = _scatter_axis(g, indices[ax], a.shape[ax], ax)
        return (g,)

    return record(out, (a,), backward_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Copy of ``a[start:stop]`` along *axis*."""
    axis = _axis(axis, a.ndim)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}, {stop}) is out of range for extent {n}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full_grad = np.zeros(a.shape, dtype=g.dtype)
        full_grad[index] = g
        return (full_grad,)

    return record(a.data[index].copy(), (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _axis(axis, ndim)
    for t in tensors:
        if t.ndim != ndim:
            raise ShapeError(f"concat: ranks {ndim} and {t.ndim} differ")
        other = t.shape[:axis] + t.shape[axis + 1 :]
        expected = tensors[0].shape[:axis] + tensors[0].shape[axis + 1 :]
        if other != expected:
            raise ShapeError(
                f"concat: shape {list(t.shape)} does not match {list(tensors[0].shape)} "
                f"off axis {axis}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    axis = _axis(axis, tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(a.shape)} into {list(shape)}") from exc
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"{list(axes)} is not a permutation of the {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def tile(a: Tensor, reps: Sequence[int]) -> Tensor:
    """Repeat *a* ``reps[i]`` times along each axis (the explicit form of broadcasting)."""
    reps = tuple(int(r) for r in reps)
    if len(reps) != a.ndim or any(r < 1 for r in reps):
        raise ShapeError(f"tile: need one positive repeat count per axis, got {list(reps)}")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        split = [d for pair in zip(reps, a.shape) for d in pair]
        return (g.reshape(split).sum(axis=tuple(range(0, 2 * a.ndim, 2))),)

    return record(np.tile(a.data, reps), (a,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions and contractions
# ---------------------------------------------------------------------------


def _normalize_axes(axes: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    resolved = tuple(_axis(int(ax), ndim) for ax in axes)
    if len(set(resolved)) != len(resolved):
        raise ShapeError(f"Repeated axis in {list(axes)}")
    return resolved


def reduce(op: str, a: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:
    """Sum or mean over *axes* (all axes when ``None``); reduced axes are dropped."""
    if op not in ("sum", "mean"):
        raise ConfigError(f"Unknown reduction '{op}'. Supported: sum, mean")
    reduced = _normalize_axes(axes, a.ndim)
    count = math.prod(a.shape[ax] for ax in reduced)
    if op == "mean" and count == 0:
        raise NumericError("mean over zero elements")
    scale = 1.0 / count if op == "mean" else 1.0
    out = a.data.sum(axis=reduced) * scale if reduced else a.data * scale
    kept = tuple(1 if ax in reduced else n for ax, n in enumerate(a.shape))

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g.reshape(kept) * scale, a.shape).copy(),)

    return record(np.asarray(out, dtype=a.data.dtype), (a,), backward_fn)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand contraction, e.g. ``einsum("bchw,oc->bohw", x, w)``.

    Every index of one operand must appear in the other operand or in the
    output, and no operand may repeat an index.
    """
    spec = subscripts.replace(" ", "")
    if "->" not in spec or spec.count(",") != 1:
        raise ShapeError(f"einsum needs the explicit 'x,y->z' form, got '{subscripts}'")
    inputs, out = spec.split("->")
    sa, sb = inputs.split(",")
    for name, sub_ in (("first", sa), ("second", sb)):
        if len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum: {name} operand repeats an index in '{subscripts}'")
    for own, other in ((sa, sb), (sb, sa)):
        lonely = set(own) - set(other) - set(out)
        if lonely:
            raise ShapeError(f"einsum: indices {sorted(lonely)} are summed within one operand")
    try:
        data = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum '{subscripts}': {exc}") from exc

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return record(np.asarray(data), (a, b), backward_fn)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, *, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires a gradient.

    The tape that recorded *loss* is released afterwards unless
    *retain_graph* is set; gradients keep accumulating across calls until
    :meth:`Tensor.zero_grad`.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise RcdmError("loss does not depend on any tensor that requires a gradient")

    seed = np.ones((), dtype=loss.data.dtype)
    node = loss._node
    if node is None:
        loss._accumulate(seed)
        return

    tape = node.tape
    if node.index >= len(tape.nodes) or tape.nodes[node.index] is not node:
        raise RcdmError("graph was released by an earlier backward; run the forward pass again")

    pending: dict[int, np.ndarray] = {node.output_id: seed}
    for current in reversed(tape.nodes[: node.index + 1]):
        grad = pending.pop(current.output_id, None)
        if grad is None:
            continue
        for inp, g in zip(current.inputs, current.backward(grad)):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(
                    f"internal: gradient shape {list(g.shape)} for input {list(inp.shape)}"
                )
            if inp._node is None:
                inp._accumulate(g)
            else:
                key = id(inp)
                pending[key] = pending[key] + g if key in pending else g

    if not retain_graph:
        tape.release()


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def _evaluate(f: Callable[..., Tensor], *args: object) -> float:
    with no_grad():
        value = f(*args)
    if value.ndim != 0:
        raise ShapeError(f"gradient check needs a scalar function, got shape {list(value.shape)}")
    out = value.item()
    if not math.isfinite(out):
        raise NumericError(f"function value {out} is not finite")
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative gap between the tape gradient of *f* at *x* and central differences."""
    if x.dtype != "float64":
        raise NumericError("gradient checks run in float64")
    leaf = Tensor(x.data, requires_grad=True)
    loss = f(leaf)
    if loss.ndim != 0:
        raise ShapeError(f"gradient check needs a scalar function, got shape {list(loss.shape)}")
    backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros(x.shape)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("analytic gradient is not finite")

    base = x.data.reshape(-1)
    worst = 0.0
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (
            _evaluate(f, Tensor(plus.reshape(x.shape))) - _evaluate(f, Tensor(minus.reshape(x.shape)))
        ) / (2.0 * h)
        worst = max(worst, _relative_error(float(analytic.reshape(-1)[i]), numeric))
    return worst


def grad_check_params(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    *,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Finite-difference check of a scalar function of several named tensors.

    Returns the max relative error per parameter. With *coords_per_param*,
    only that many randomly chosen coordinates of each tensor are checked.
    """
    leaves = {}
    for name, value in params.items():
        if value.dtype != "float64":
            raise NumericError(f"gradient checks run in float64 ('{name}' is {value.dtype})")
        leaves[name] = Tensor(value.data, requires_grad=True)
    loss = f(leaves)
    if loss.ndim != 0:
        raise ShapeError(f"gradient check needs a scalar function, got shape {list(loss.shape)}")
    backward(loss)

    rng = Rng(seed, ("grad_check",))
    errors: dict[str, float] = {}
    for name, leaf in leaves.items():
        analytic = (leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)).reshape(-1)
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"analytic gradient of '{name}' is not finite")
        base = leaf.data.reshape(-1)
        coords = range(base.size)
        if coords_per_param is not None and base.size > coords_per_param:
            coords = sorted(int(i) for i in rng.split(name).choice(base.size, coords_per_param))

        worst = 0.0
        for i in coords:
            values = []
            for step in (h, -h):
                moved = base.copy()
                moved[i] += step
                shifted = dict(leaves)
                shifted[name] = Tensor(moved.reshape(leaf.shape))
                values.append(_evaluate(f, shifted))
            numeric = (values[0] - values[1]) / (2.0 * h)
            worst = max(worst, _relative_error(float(analytic[i]), numeric))
        errors[name] = worst
        logger.debug("grad check %s: max relative error %.3e", name, worst)
    return errors
