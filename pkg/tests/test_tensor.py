"""Tests for the tensor core and reverse-mode gradients."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rcdm.errors import ConfigError, NumericError, RcdmError, ShapeError
from rcdm.tensor import (
    Rng,
    Tape,
    Tensor,
    abs_,
    backward,
    cast,
    concat,
    create,
    einsum,
    elementwise,
    exp,
    grad_check,
    grad_check_params,
    iota,
    no_grad,
    pad,
    reduce,
    reshape,
    sigmoid,
    slice_axis,
    sqrt,
    square,
    stack,
    tensor,
    tile,
    transpose,
    zeros,
)


def _rand(shape, name="x", low=-1.0, high=1.0):
    return Tensor(Rng(3, ("tests", name)).uniform(shape, low, high))


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------


def test_create_iota_is_row_major():
    t = create((2, 3), fill="iota")
    assert_array_equal(t.numpy(), [[0, 1, 2], [3, 4, 5]])
    assert t.dtype == "float32"


def test_create_from_data_checks_element_count():
    with pytest.raises(ShapeError):
        tensor([1.0, 2.0, 3.0], shape=(2, 2))


def test_create_rejects_negative_extent():
    with pytest.raises(ShapeError):
        zeros((2, -1))


def test_uniform_fill_needs_an_rng():
    with pytest.raises(ConfigError):
        create((2, 2), fill="uniform")


def test_tensor_buffer_is_read_only():
    t = iota((4,))
    with pytest.raises(ValueError):
        t.numpy()[0] = 5.0


def test_rng_streams_are_reproducible_and_independent():
    a = Rng(7, ("init",)).split("conv").uniform((5,))
    b = Rng(7, ("init",)).split("conv").uniform((5,))
    c = Rng(7, ("init",)).split("other").uniform((5,))
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_rejects_negative_seed():
    with pytest.raises(ConfigError):
        Rng(-1)


# ---------------------------------------------------------------------------
# elementwise and layout
# ---------------------------------------------------------------------------


def test_shapes_never_broadcast():
    with pytest.raises(ShapeError):
        zeros((2, 3)) + zeros((3,))


def test_elementwise_dispatch_by_name():
    a, b = iota((3,), dtype="float64"), tensor([2.0, 2.0, 2.0], dtype="float64")
    assert_array_equal(elementwise("mul", a, b).numpy(), [0.0, 2.0, 4.0])
    with pytest.raises(ConfigError):
        elementwise("pow", a, b)


def test_division_by_exact_zero_is_a_numeric_error():
    with pytest.raises(NumericError):
        iota((3,)) / zeros((3,))
    with pytest.raises(NumericError):
        iota((3,)) / 0.0


def test_sqrt_of_negative_is_a_numeric_error():
    with pytest.raises(NumericError):
        sqrt(tensor([-1.0]))


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(tensor([-1000.0, 0.0, 1000.0], dtype="float64")).numpy()
    assert_allclose(out, [0.0, 0.5, 1.0])


def test_reflect_pad_mirrors_without_edge():
    out = pad(tensor([1.0, 2.0, 3.0]), [(2, 1)], "reflect")
    assert_array_equal(out.numpy(), [3.0, 2.0, 1.0, 2.0, 3.0, 2.0])


def test_reflect_pad_too_wide_is_a_shape_error():
    with pytest.raises(ShapeError):
        pad(tensor([1.0, 2.0]), [(2, 0)], "reflect")


def test_slice_out_of_range():
    with pytest.raises(ShapeError):
        slice_axis(iota((4,)), 0, 2, 5)


def test_concat_checks_off_axis_extents():
    with pytest.raises(ShapeError):
        concat([zeros((2, 3)), zeros((2, 4))], axis=0)


def test_stack_and_transpose():
    a, b = iota((2, 3)), iota((2, 3)) + 10.0
    s = stack([a, b], axis=1)
    assert s.shape == (2, 2, 3)
    assert transpose(s, (2, 0, 1)).shape == (3, 2, 2)
    with pytest.raises(ShapeError):
        transpose(s, (0, 0, 1))


def test_reshape_rejects_wrong_count():
    with pytest.raises(ShapeError):
        reshape(iota((6,)), (4, 2))


def test_tile_repeats_blocks():
    out = tile(tensor([[1.0, 2.0]]), (2, 2))
    assert_array_equal(out.numpy(), [[1, 2, 1, 2], [1, 2, 1, 2]])


def test_reduce_drops_axes_and_mean_of_nothing_fails():
    x = iota((2, 3), dtype="float64")
    assert_array_equal(reduce("sum", x, 1).numpy(), [3.0, 12.0])
    assert x.mean().item() == 2.5
    with pytest.raises(NumericError):
        zeros((0, 2)).mean()
    with pytest.raises(ConfigError):
        reduce("max", x)


def test_einsum_matches_numpy_and_rejects_repeats():
    a, b = _rand((3, 4), "a"), _rand((4, 5), "b")
    assert_allclose(einsum("ij,jk->ik", a, b).numpy(), a.numpy() @ b.numpy(), rtol=1e-12)
    with pytest.raises(ShapeError):
        einsum("ii,ij->j", a, b)


def test_cast_round_trip_keeps_values():
    x = tensor([0.5, 0.25], dtype="float64")
    assert cast(cast(x, "float32"), "float64").numpy().tolist() == [0.5, 0.25]


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


def test_backward_accumulates_into_leaves():
    x = Tensor([1.0, 2.0, 3.0], dtype="float64", requires_grad=True)
    with Tape():
        loss = (square(x) * 3.0).sum()
        backward(loss)
    assert_allclose(x.grad, [6.0, 12.0, 18.0])


def test_backward_twice_without_retain_fails():
    x = Tensor([1.0], dtype="float64", requires_grad=True)
    with Tape():
        loss = square(x).sum()
        backward(loss)
        with pytest.raises(RcdmError):
            backward(loss)


def test_retain_graph_accumulates():
    x = Tensor([2.0], dtype="float64", requires_grad=True)
    with Tape():
        loss = square(x).sum()
        backward(loss, retain_graph=True)
        backward(loss)
    assert_allclose(x.grad, [8.0])


def test_backward_needs_scalar_and_a_gradient_path():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(square(x))
    with pytest.raises(RcdmError):
        backward(zeros(()))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape, no_grad():
        y = square(x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_shared_subexpression_gradients_add_up():
    x = Tensor([3.0], dtype="float64", requires_grad=True)
    with Tape():
        y = x * x
        loss = (y + y).sum()
        backward(loss)
    assert_allclose(x.grad, [12.0])


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: sigmoid(t).sum(),
        lambda t: exp(t).mean(),
        lambda t: square(abs_(t) + 1.0).sum(),
        lambda t: sqrt(square(t) + 0.5).sum(),
        lambda t: (t / (square(t) + 1.0)).sum(),
        lambda t: square(pad(t, [(1, 2), (2, 1)], "reflect")).sum(),
        lambda t: square(tile(t, (2, 1)) * 0.5).sum(),
        lambda t: square(transpose(t, (1, 0)).reshape(12)).sum(),
        lambda t: square(einsum("ij,jk->ik", t, Tensor(np.ones((4, 2))))).sum(),
        lambda t: square(concat([t, slice_axis(t, 1, 1, 3)], axis=1)).mean(),
    ],
)
def test_grad_check_passes(fn):
    x = _rand((3, 4), "grad", 0.2, 1.0)
    assert grad_check(fn, x) < 1e-4


def test_grad_check_needs_float64():
    with pytest.raises(NumericError):
        grad_check(lambda t: t.sum(), iota((2,)))


def test_grad_check_params_samples_each_tensor():
    params = {"a": _rand((4, 3), "pa"), "b": _rand((3,), "pb")}

    def f(p):
        return square(einsum("ij,j->i", p["a"], p["b"])).sum()

    errors = grad_check_params(f, params, coords_per_param=2)
    assert set(errors) == {"a", "b"}
    assert max(errors.values()) < 1e-4
