"""Tests for the Haar transform."""

from __future__ import annotations

import numpy as np
import pytest
import pywt
from numpy.testing import assert_allclose, assert_array_equal

from rcdm.errors import ShapeError
from rcdm.tensor import Rng, Tensor, grad_check, square, zeros
from rcdm.wavelet import SubBands, dwt2d, dwt2d_stacked, idwt2d, idwt2d_stacked


def _image(shape, name, dtype="float64"):
    return Tensor(Rng(5, ("wavelet", name)).uniform(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# round trip and energy
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(3, 8, 8), (2, 4, 6, 10), (1, 2, 1, 2, 2)])
def test_round_trip_float64(shape):
    x = _image(shape, "rt64")
    assert np.max(np.abs(idwt2d(dwt2d(x)).numpy() - x.numpy())) < 1e-12


def test_round_trip_float32():
    x = _image((3, 16, 12), "rt32", dtype="float32")
    out = idwt2d_stacked(dwt2d_stacked(x))
    assert out.dtype == "float32"
    assert np.max(np.abs(out.numpy() - x.numpy())) < 1e-6


def test_energy_is_preserved():
    x = Tensor(Rng(5, ("wavelet", "energy")).normal((4, 10, 14)))
    assert_allclose(np.sum(dwt2d_stacked(x).numpy() ** 2), np.sum(x.numpy() ** 2), rtol=1e-12)


@pytest.mark.parametrize("shape", [(3, 7, 8), (3, 8, 5), (8, 8)])
def test_odd_or_missing_extents_are_rejected(shape):
    with pytest.raises(ShapeError):
        dwt2d(zeros(shape))


def test_inverse_needs_four_bands_per_channel():
    with pytest.raises(ShapeError):
        idwt2d_stacked(zeros((6, 4, 4)))


# ---------------------------------------------------------------------------
# band layout
# ---------------------------------------------------------------------------


def test_bands_match_pywavelets():
    x = _image((1, 8, 6), "pywt")
    bands = dwt2d(x)
    ca, (ch, cv, cd) = pywt.dwt2(x.numpy()[0], "haar")
    assert_allclose(bands.ll.numpy()[0], ca, atol=1e-12)
    assert_allclose(bands.hl.numpy()[0], ch, atol=1e-12)
    assert_allclose(bands.lh.numpy()[0], cv, atol=1e-12)
    assert_allclose(bands.hh.numpy()[0], cd, atol=1e-12)


def test_constant_image_has_no_detail():
    bands = dwt2d(Tensor(np.full((2, 4, 4), 0.25)))
    assert_allclose(bands.ll.numpy(), 0.5)
    for band in (bands.lh, bands.hl, bands.hh):
        assert_array_equal(band.numpy(), 0.0)


def test_stacked_layout_groups_bands_per_channel():
    x = _image((2, 4, 4), "stack")
    bands = dwt2d(x)
    stacked = bands.stacked().numpy()
    assert stacked.shape == (8, 2, 2)
    assert_array_equal(stacked[4], bands.ll.numpy()[1])
    assert_array_equal(stacked[7], bands.hh.numpy()[1])
    again = SubBands.from_stacked(bands.stacked())
    assert_array_equal(again.lh.numpy(), bands.lh.numpy())


def test_sub_bands_must_agree_on_shape():
    with pytest.raises(ShapeError):
        SubBands(zeros((1, 2, 2)), zeros((1, 2, 2)), zeros((1, 2, 2)), zeros((1, 2, 3)))


def test_transform_is_differentiable():
    assert grad_check(lambda t: square(dwt2d_stacked(t) * 1.5).sum(), _image((2, 4, 4), "grad")) < 1e-6
