import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodule_cloud.errors import MalformedFile, SlabOutOfBounds
from nodule_cloud.volume import (
    Volume, decode_nvol, encode_nvol, mip, normalize_hu, normalize_hu_value, read_mask, read_volume,
    resample_isotropic, resample_mask, write_mask, write_volume,
)


def vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.int16), spacing)


@pytest.mark.parametrize("hu, expected", [(-1000, 0.0), (400, 1.0), (-300, 0.5), (-2000, 0.0), (1000, 1.0)])
def test_normalize_window_points(hu, expected):
    out = normalize_hu(vol(np.full((1, 1, 1), hu)))
    assert out.data[0, 0, 0] == expected
    assert normalize_hu_value(hu) == expected


def test_normalize_keeps_geometry_and_range(rng):
    v = vol(rng.integers(-3000, 3000, size=(5, 6, 7)), (0.7, 0.8, 2.5))
    n = normalize_hu(v)
    assert n.dims == v.dims and n.spacing == v.spacing
    assert n.data.dtype == np.float32
    assert n.data.min() >= 0.0 and n.data.max() <= 1.0


@given(st.integers(-32768, 32767), st.integers(-32768, 32767))
def test_normalize_monotone(a, b):
    lo, hi = sorted((a, b))
    assert normalize_hu_value(lo) <= normalize_hu_value(hi)


@given(st.integers(-32768, 32767))
def test_normalize_idempotent_after_clamp(x):
    clamped = min(max(x, -1000), 400)
    assert normalize_hu_value(clamped) == normalize_hu_value(x)


def test_resample_identity_is_bit_exact(rng):
    v = vol(rng.integers(-1000, 400, size=(9, 8, 7)))
    out = resample_isotropic(v, 1.0)
    assert out.data.dtype == np.int16
    assert np.array_equal(out.data, v.data) and out.spacing == (1.0, 1.0, 1.0)


def test_resample_dims_formula():
    v = vol(np.zeros((10, 10, 5)), (1.0, 1.0, 2.0))
    assert resample_isotropic(v, 1.0).dims == (10, 10, 10)
    v = vol(np.zeros((3, 7, 1)), (0.7, 1.3, 0.2))
    out = resample_isotropic(v, 1.0)
    expected = tuple(max(1, round(n * s)) for n, s in zip((3, 7, 1), (0.7, 1.3, 0.2)))
    assert out.dims == expected


@given(st.integers(-1000, 400), st.floats(0.4, 3.0))
@settings(max_examples=25, deadline=None)
def test_resample_constant(value, target):
    v = vol(np.full((6, 5, 4), value), (0.8, 1.1, 2.0))
    out = resample_isotropic(v, target)
    assert np.all(out.data == value)


def test_resample_linear_ramp_is_trilinear():
    # a linear ramp along z sampled at 2 mm is exactly recovered at 1 mm between samples
    z = np.arange(6) * 100
    v = vol(np.broadcast_to(z, (2, 2, 6)).copy(), (1.0, 1.0, 2.0))
    out = resample_isotropic(v, 1.0)
    # output voxel centers in mm: (k + 0.5); input centers at 2j + 1 -> value 50*(c - 1)
    centers = np.arange(out.dims[2]) + 0.5
    expected = np.clip(50.0 * (centers - 1.0), 0, 500)
    assert np.allclose(out.data[0, 0], np.rint(expected))


def test_resample_mask_nearest():
    m = np.zeros((4, 4, 2), dtype=np.uint8)
    m[1, 1, 1] = 1
    out = resample_mask(m, (1.0, 1.0, 2.0), 1.0)
    assert out.shape == (4, 4, 4)
    assert set(np.unique(out)) <= {0, 1}
    assert out[1, 1, 2] == 1 and out[1, 1, 3] == 1 and out.sum() == 2


def test_mip_single_slice_is_that_slice(rng):
    v = vol(rng.integers(-1000, 400, size=(5, 6, 7)))
    m = mip(v, "z", 1.0, 3)
    assert np.array_equal(m.data, v.data[:, :, 3])
    assert mip(v, "x", 0.5, 2).data.shape == (6, 7)


def test_mip_max_dominance():
    data = np.full((8, 8, 20), -1000)
    data[3, 4, 7] = 400
    m = mip(vol(data), "z", 5.0, 5)
    assert m.data[3, 4] == 400
    assert (m.data == -1000).sum() == 63


@pytest.mark.parametrize("slab", [5.0, 10.0, 15.0, 20.0])
def test_mip_standard_slabs(slab):
    v = vol(np.zeros((4, 4, 20)))
    out = mip(v, "z", slab, 0)
    assert out.slab_mm == slab and out.data.shape == (4, 4)


def test_mip_slice_count_uses_ceil():
    data = np.full((2, 2, 10), -1000)
    data[0, 0, 3] = 100  # reached only when the slab covers 3 slices from 1 with 0.7 mm spacing
    v = vol(data, (1.0, 1.0, 0.7))
    assert mip(v, "z", 1.4, 1).data[0, 0] == -1000  # ceil(2.0) = 2 slices
    assert mip(v, "z", 1.5, 1).data[0, 0] == 100  # ceil(2.14) = 3 slices


def test_mip_out_of_bounds():
    v = vol(np.zeros((4, 4, 10)))
    with pytest.raises(SlabOutOfBounds):
        mip(v, "z", 5.0, 6)
    with pytest.raises(SlabOutOfBounds):
        mip(v, "y", 1.0, -1)


@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_mip_monotone_in_slab(n, origin, seed):
    v = vol(np.random.default_rng(seed).integers(-1000, 400, size=(3, 4, 10)))
    small = mip(v, "z", float(n), origin).data
    big = mip(v, "z", float(n + 1), origin).data
    assert np.all(big >= small)


def test_nvol_roundtrip(tmp_path, rng):
    v = vol(rng.integers(-32768, 32767, size=(3, 4, 5)), (0.5, 0.75, 2.5))
    p = tmp_path / "v.nvol"
    write_volume(p, v)
    raw = p.read_bytes()
    assert raw.startswith(b"NVOL1\ndims 3 4 5\nspacing 0.5 0.75 2.5\ndtype i16\n\n")
    payload = raw.split(b"\n\n", 1)[1]
    # x-fastest little-endian payload
    assert payload == v.data.astype("<i2").tobytes(order="F")
    back = read_volume(p)
    assert np.array_equal(back.data, v.data) and back.spacing == v.spacing


def test_mask_roundtrip_cropped(tmp_path):
    m = np.zeros((10, 11, 12), dtype=np.uint8)
    m[2:4, 5, 7:10] = 1
    p = tmp_path / "m.nvol"
    write_mask(p, m, (1.0, 1.0, 1.0))
    assert b"dtype u8" in p.read_bytes()
    assert np.array_equal(read_mask(p, m.shape), m)
    write_mask(p, m, (1.0, 1.0, 1.0), crop=False)
    assert b"offset" not in p.read_bytes()
    assert np.array_equal(read_mask(p), m)


@pytest.mark.parametrize("buf", [
    b"NVOL2\ndims 1 1 1\nspacing 1 1 1\ndtype i16\n\n\x00\x00",
    b"NVOL1\ndims 1 1 2\nspacing 1 1 1\ndtype i16\n\n\x00\x00",
    b"NVOL1\ndims 1 1 1\nspacing 1 1 1\ndtype f32\n\n\x00\x00\x00\x00",
    b"NVOL1\ndims 1 1 1\nspacing 1 0 1\ndtype i16\n\n\x00\x00",
])
def test_nvol_rejects_malformed(buf):
    with pytest.raises(MalformedFile):
        decode_nvol(buf)


def test_nvol_mask_values_checked():
    buf = encode_nvol(np.array([[[0, 2]]], dtype=np.uint8), (1, 1, 1))
    with pytest.raises(MalformedFile):
        decode_nvol(buf)


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 1, 1), np.int16), (1, 1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 1, 1), np.int16), (1, -1, 1))
    assert math.isclose(float(vol(np.zeros((2, 3, 4)), (0.5, 1, 2)).extent_mm.prod()), 1.0 * 3 * 8)
