import struct

import numpy as np
import pytest

from subcortseg import nifti_io as nio
from subcortseg.errors import (
    InvalidVolume,
    MalformedHeader,
    TruncatedData,
    UnsupportedDatatype,
    WrongChannelCount,
)

CODES = {np.dtype("u1"): 2, np.dtype("i2"): 4, np.dtype("f4"): 16}


def handmade_nifti(data, endian="<", slope=1.0, inter=0.0, spacing=None, code=None):
    """Build a NIfTI-1 file from the published field offsets, independently of the writer."""
    data = np.asarray(data)
    dtype = data.dtype
    code = CODES[dtype] if code is None else code
    spacing = spacing or (1.0,) * data.ndim
    hdr = bytearray(352)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, data.ndim, *data.shape, *([1] * (7 - data.ndim)))
    struct.pack_into(endian + "2h", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *spacing, *([0.0] * (7 - data.ndim)))
    struct.pack_into(endian + "3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + data.astype(dtype.newbyteorder(endian)).tobytes(order="F")


def test_header_constants_accepted(tmp_path):
    path = tmp_path / "a.nii"
    path.write_bytes(handmade_nifti(np.arange(24, dtype=np.float32).reshape(2, 3, 4)))
    vol = nio.read_volume(path)
    assert vol.shape == (2, 3, 4)
    np.testing.assert_array_equal(vol.data, np.arange(24).reshape(2, 3, 4))


def test_big_endian_file_decodes_identically(tmp_path):
    data = np.random.default_rng(0).integers(-300, 300, size=(4, 5, 3)).astype(np.int16)
    little, big = tmp_path / "le.nii", tmp_path / "be.nii"
    little.write_bytes(handmade_nifti(data, "<", spacing=(1.0, 2.0, 0.5)))
    big.write_bytes(handmade_nifti(data, ">", spacing=(1.0, 2.0, 0.5)))
    a, b = nio.read_volume(little), nio.read_volume(big)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.data, data)
    assert a.spacing == b.spacing == (1.0, 2.0, 0.5)


def test_scaling_applied(tmp_path):
    path = tmp_path / "s.nii"
    path.write_bytes(handmade_nifti(np.array([[[1, 2], [3, 4]]], np.int16), slope=2.0, inter=-1.0))
    np.testing.assert_array_equal(nio.read_volume(path).data.ravel(order="F"), [1, 5, 3, 7])


def test_zero_slope_means_no_scaling(tmp_path):
    path = tmp_path / "s.nii"
    path.write_bytes(handmade_nifti(np.full((2, 2, 2), 7, np.uint8), slope=0.0, inter=5.0))
    np.testing.assert_array_equal(nio.read_volume(path).data, 7.0)


def test_bad_magic(tmp_path):
    blob = bytearray(handmade_nifti(np.zeros((2, 2, 2), np.float32)))
    blob[344:348] = b"ni1\x00"
    path = tmp_path / "m.nii"
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeader):
        nio.read_volume(path)


def test_bad_sizeof_hdr(tmp_path):
    blob = bytearray(handmade_nifti(np.zeros((2, 2, 2), np.float32)))
    struct.pack_into("<i", blob, 0, 540)
    path = tmp_path / "m.nii"
    path.write_bytes(bytes(blob))
    with pytest.raises(MalformedHeader):
        nio.read_volume(path)


def test_unsupported_datatype(tmp_path):
    path = tmp_path / "d.nii"
    path.write_bytes(handmade_nifti(np.zeros((2, 2, 2), np.float32), code=64))
    with pytest.raises(UnsupportedDatatype):
        nio.read_volume(path)


def test_truncated_data(tmp_path):
    path = tmp_path / "t.nii"
    path.write_bytes(handmade_nifti(np.zeros((3, 3, 3), np.float32))[:-10])
    with pytest.raises(TruncatedData):
        nio.read_volume(path)


def test_written_size_arithmetic(tmp_path):
    path = tmp_path / "z.nii"
    nio.write_volume(nio.ScalarVolume.from_array(np.zeros((2, 2, 2))), path)
    blob = path.read_bytes()
    assert len(blob) == 352 + 32
    assert struct.unpack_from("<i", blob, 0)[0] == 348
    assert blob[344:348] == b"n+1\x00"
    assert struct.unpack_from("<3f", blob, 108) == (352.0, 1.0, 0.0)
    assert struct.unpack_from("<h", blob, 70)[0] == 16


def test_label_written_as_uint8(tmp_path):
    path = tmp_path / "l.nii"
    labels = np.random.default_rng(1).integers(0, 15, size=(5, 4, 3)).astype(np.uint8)
    nio.write_volume(nio.LabelVolume.from_array(labels, (0.8, 0.8, 1.2)), path)
    blob = path.read_bytes()
    assert struct.unpack_from("<h", blob, 70)[0] == 2
    assert len(blob) == 352 + labels.size
    back = nio.read_labels(path)
    assert back.data.tobytes() == labels.tobytes()
    assert back.spacing == tuple(np.float32([0.8, 0.8, 1.2]).astype(float))


@pytest.mark.parametrize("code, values", [
    (2, np.arange(60) % 256),
    (4, (np.arange(60) - 30) * 1000),
    (16, np.linspace(-3.5, 9.25, 60)),
])
def test_round_trip_all_datatypes(tmp_path, code, values):
    data = values.reshape(3, 4, 5).astype(np.float64)
    spacing = (0.5, 1.25, 3.0)
    path = tmp_path / f"r{code}.nii"
    nio.write_volume(nio.ScalarVolume.from_array(data, spacing), path, datatype=code)
    back = nio.read_volume(path)
    assert back.shape == data.shape and back.spacing == spacing
    assert struct.unpack_from("<h", path.read_bytes(), 70)[0] == code
    stored = {2: np.uint8, 4: np.int16, 16: np.float32}[code]
    np.testing.assert_array_equal(back.data, data.astype(stored).astype(np.float64))


def test_round_trip_through_handmade_reader_layout(tmp_path):
    data = np.random.default_rng(2).standard_normal((3, 4, 2)).astype(np.float32)
    path = tmp_path / "x.nii"
    nio.write_volume(nio.ScalarVolume.from_array(data), path)
    assert path.read_bytes()[352:] == data.astype("<f4").tobytes(order="F")


def test_non_finite_rejected():
    with pytest.raises(InvalidVolume):
        nio.ScalarVolume.from_array(np.array([[[np.nan]]]))


def test_unrepresentable_integers_rejected(tmp_path):
    vol = nio.ScalarVolume.from_array(np.full((2, 2, 2), 300.0))
    with pytest.raises(InvalidVolume):
        nio.write_volume(vol, tmp_path / "x.nii", datatype=2)
    with pytest.raises(InvalidVolume):
        nio.write_volume(nio.ScalarVolume.from_array(np.full((2, 2, 2), 0.5)), tmp_path / "y.nii", datatype=4)


def test_label_values_validated():
    with pytest.raises(InvalidVolume):
        nio.LabelVolume.from_array(np.full((2, 2, 2), 15))


def test_orientation_preserved(tmp_path):
    data = np.zeros((2, 2, 2), np.float32)
    blob = bytearray(handmade_nifti(data))
    struct.pack_into("<2h", blob, 252, 1, 2)
    struct.pack_into("<12f", blob, 280, *range(1, 13))
    src, dst = tmp_path / "o.nii", tmp_path / "o2.nii"
    src.write_bytes(bytes(blob))
    nio.write_volume(nio.read_volume(src), dst)
    out = dst.read_bytes()
    assert struct.unpack_from("<2h", out, 252) == (1, 2)
    assert struct.unpack_from("<12f", out, 280) == tuple(float(v) for v in range(1, 13))


def test_header_validation():
    with pytest.raises(MalformedHeader):
        nio.VolumeHeader.create((2, 0, 2))
    with pytest.raises(MalformedHeader):
        nio.VolumeHeader.create((2, 2, 2), (1.0, -1.0, 1.0))
    with pytest.raises(UnsupportedDatatype):
        nio.VolumeHeader.create((2, 2, 2), datatype_code=8)


# ---------------------------------------------------------------------------
# atlas


def write_atlas(tmp_path, channels):
    path = tmp_path / "atlas.nii"
    path.write_bytes(handmade_nifti(np.asarray(channels, np.float32)))
    return nio.read_atlas(path)


def test_atlas_14_channels_all_zero_is_background(tmp_path):
    atlas = write_atlas(tmp_path, np.zeros((2, 2, 2, 14)))
    expected = np.zeros(15)
    expected[0] = 1
    np.testing.assert_array_equal(atlas.data.reshape(-1, 15), np.tile(expected, (8, 1)))


def test_atlas_overshoot_clamps_background(tmp_path):
    ch = np.zeros((1, 1, 1, 14))
    ch[..., 2] = 0.7
    ch[..., 5] = 0.5
    v = write_atlas(tmp_path, ch).data[0, 0, 0]
    assert v[0] == 0.0
    np.testing.assert_allclose(v[3], 0.7 / 1.2, rtol=1e-6)
    np.testing.assert_allclose(v[6], 0.5 / 1.2, rtol=1e-6)
    assert abs(v.sum() - 1) < 1e-6


def test_atlas_14_channels_partial_mass(tmp_path):
    ch = np.zeros((1, 1, 1, 14))
    ch[..., 4] = 0.7  # class 5
    v = write_atlas(tmp_path, ch).data[0, 0, 0]
    np.testing.assert_allclose(v[[0, 5]], [0.3, 0.7], rtol=1e-6)


def test_atlas_15_channels_normalized_unchanged(tmp_path):
    ch = np.zeros((1, 1, 1, 15))
    ch[..., :2] = 0.5
    np.testing.assert_array_equal(write_atlas(tmp_path, ch).data[0, 0, 0], ch[0, 0, 0])


def test_atlas_rows_sum_to_one(tmp_path):
    rng = np.random.default_rng(3)
    atlas = write_atlas(tmp_path, rng.random((4, 3, 5, 15)) * (rng.random((4, 3, 5, 1)) < 0.8))
    sums = atlas.data.astype(np.float64).sum(axis=-1)
    assert np.all(np.abs(sums - 1) <= 1e-5)
    assert atlas.data.min() >= 0 and atlas.data.max() <= 1


def test_atlas_wrong_channel_count(tmp_path):
    path = tmp_path / "atlas.nii"
    path.write_bytes(handmade_nifti(np.zeros((2, 2, 2, 13), np.float32)))
    with pytest.raises(WrongChannelCount):
        nio.read_atlas(path)
    path.write_bytes(handmade_nifti(np.zeros((2, 2, 2), np.float32)))
    with pytest.raises(WrongChannelCount):
        nio.read_atlas(path)


def test_atlas_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    probs = nio.normalize_priors(rng.random((3, 3, 2, 15))).astype(np.float32)
    path = tmp_path / "a.nii"
    nio.write_volume(nio.AtlasVolume.from_array(probs), path)
    back = nio.read_atlas(path)
    assert back.shape == (3, 3, 2)
    np.testing.assert_allclose(back.data, probs, atol=1e-6)


def test_class_names():
    assert nio.CLASS_NAMES[1:5] == ("Tha.L", "Tha.R", "Cau.L", "Cau.R")
    assert nio.CLASS_NAMES[13:] == ("Acc.L", "Acc.R")
    assert len(nio.CLASS_NAMES) == 15
