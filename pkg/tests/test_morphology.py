import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from boundary_transfer.datamodel import Mask, complement
from boundary_transfer.errors import InvalidValueError, ShapeMismatchError, SoftMaskError
from boundary_transfer.morphology import DiskStrel, dilate, erode, weight_map

from .conftest import hard_mask, oracle_dilate, oracle_erode

RADII = st.sampled_from([1, 2, 3, 5])
MASKS_32 = arrays(np.bool_, (32, 32))


def _single(size=9, at=(4, 4)):
    m = np.zeros((size, size))
    m[at] = 1
    return hard_mask(m)


def _square(size=9, lo=3, hi=6):
    m = np.zeros((size, size))
    m[lo:hi, lo:hi] = 1
    return hard_mask(m)


def test_disk_offsets():
    assert DiskStrel.of(1).offsets == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}
    assert DiskStrel.of(2).size == 13
    assert DiskStrel.of(3).footprint().sum() == 29
    for r in (1, 2, 3, 5):
        fp = DiskStrel.of(r).footprint()
        assert np.array_equal(fp, fp[::-1, ::-1])


def test_dilate_single_pixel_gives_cross():
    out = dilate(_single(), 1).to_array()
    expected = np.zeros((9, 9))
    expected[4, 3:6] = 1
    expected[3:6, 4] = 1
    assert np.array_equal(out, expected)


def test_erode_single_pixel_vanishes():
    assert erode(_single(), 1).to_array().sum() == 0


def test_erode_all_ones_keeps_interior():
    out = erode(hard_mask(np.ones((9, 9))), 1).to_array()
    expected = np.zeros((9, 9))
    expected[1:-1, 1:-1] = 1
    assert np.array_equal(out, expected)


def test_all_zero_and_all_one_dilation():
    assert dilate(hard_mask(np.zeros((9, 9))), 2).to_array().sum() == 0
    assert dilate(hard_mask(np.ones((9, 9))), 2).to_array().sum() == 81


def test_weight_map_of_square():
    out = weight_map(_square(), 1).to_array()
    # plus-shaped dilation of the 3x3 square minus its single eroded centre
    assert out.sum() == 20
    assert out[4, 4] == 0
    assert out[2, 4] == 1 and out[4, 6] == 1
    assert out[2, 2] == 0


def test_weight_map_all_ones_is_border_frame():
    out = weight_map(hard_mask(np.ones((9, 9))), 1).to_array()
    frame = np.ones((9, 9))
    frame[1:-1, 1:-1] = 0
    assert np.array_equal(out, frame)


def test_weight_map_binarizes_soft_input():
    soft = Mask.from_array(_square().to_array() * 0.7 + 0.1, hard=False)
    assert np.array_equal(weight_map(soft, 1).to_array(), weight_map(_square(), 1).to_array())


def test_soft_mask_rejected():
    soft = Mask(torch.full((1, 9, 9), 0.5))
    with pytest.raises(SoftMaskError):
        dilate(soft, 1)
    with pytest.raises(SoftMaskError):
        erode(soft, 1)


@pytest.mark.parametrize("r", [0, -1, 5, 9])
def test_radius_bounds(r):
    with pytest.raises(InvalidValueError):
        dilate(_single(), r)


def test_per_sample_radii_match_individual_calls(rng):
    data = (rng.random((3, 1, 16, 16)) < 0.3).astype(np.float32)
    batch = Mask(torch.from_numpy(data), hard=True)
    out = dilate(batch, [1, 3, 1]).data
    for i, r in enumerate([1, 3, 1]):
        single = dilate(Mask(batch.data[i], hard=True), r).data
        assert torch.equal(out[i], single)


def test_radii_count_must_match_batch(rng):
    batch = Mask(torch.zeros(2, 1, 16, 16), hard=True)
    with pytest.raises(ShapeMismatchError):
        erode(batch, [1, 2, 3])


@settings(max_examples=500, deadline=None)
@given(m=MASKS_32, r=RADII)
def test_matches_structuring_element_oracle(m, r):
    mask = hard_mask(m)
    d = dilate(mask, r).to_array().astype(bool)
    e = erode(mask, r).to_array().astype(bool)
    assert np.array_equal(d, oracle_dilate(m, r))
    assert np.array_equal(e, oracle_erode(m, r))
    assert np.array_equal(weight_map(mask, r).to_array().astype(bool), d & ~e)


@settings(max_examples=500, deadline=None)
@given(m=MASKS_32, r=RADII)
def test_matches_scipy(m, r):
    fp = DiskStrel.of(r).footprint()
    mask = hard_mask(m)
    assert np.array_equal(
        dilate(mask, r).to_array().astype(bool), ndimage.binary_dilation(m, structure=fp)
    )
    assert np.array_equal(
        erode(mask, r).to_array().astype(bool),
        ndimage.binary_erosion(m, structure=fp, border_value=0),
    )


@settings(max_examples=500, deadline=None)
@given(m=MASKS_32, r=RADII)
def test_duality_away_from_border(m, r):
    mask = hard_mask(m)
    lhs = erode(mask, r).to_array()
    rhs = complement(dilate(complement(mask), r)).to_array()
    assert np.array_equal(lhs[r:-r, r:-r], rhs[r:-r, r:-r])


@settings(max_examples=40, deadline=None)
@given(m=MASKS_32, r=st.sampled_from([1, 2, 3]))
def test_extensive_and_monotone_in_radius(m, r):
    mask = hard_mask(m)
    d, d_next = dilate(mask, r).to_array(), dilate(mask, r + 1).to_array()
    e, e_next = erode(mask, r).to_array(), erode(mask, r + 1).to_array()
    assert np.all(e <= m) and np.all(m <= d)
    assert np.all(d <= d_next) and np.all(e_next <= e)
    w = weight_map(mask, r).to_array()
    assert np.all(w <= weight_map(mask, r + 1).to_array())
