import gzip
import struct

import numpy as np
import pytest

from regionmae.errors import (
    FormatError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    ValidationError,
)
from regionmae.nifti import (
    LabelVolume,
    Volume4D,
    parse_header,
    read_nifti,
    write_nifti,
)


def make_raw(order, shape, datatype, data, pixdim=None, vox_offset=352,
             scl=(0.0, 0.0), sform=None, quatern=None, xyzt_units=10,
             magic=b"n+1\x00"):
    """Assemble a minimal NIfTI-1 byte string field by field.

    Deliberately independent of the writer under test: every offset is set
    by hand into a zeroed 348-byte buffer.
    """
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, 0, 348)
    dims = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into(order + "8h", hdr, 40, *dims)
    struct.pack_into(order + "h", hdr, 70, datatype)
    struct.pack_into(order + "h", hdr, 72, data.dtype.itemsize * 8)
    if pixdim is None:
        pixdim = [1.0] * 8
    struct.pack_into(order + "8f", hdr, 76, *pixdim)
    struct.pack_into(order + "f", hdr, 108, float(vox_offset))
    struct.pack_into(order + "2f", hdr, 112, *scl)
    struct.pack_into(order + "B", hdr, 123, xyzt_units)
    if quatern is not None:
        struct.pack_into(order + "h", hdr, 252, 1)  # qform_code
        struct.pack_into(order + "6f", hdr, 256, *quatern)
    if sform is not None:
        struct.pack_into(order + "h", hdr, 254, 2)  # sform_code
        struct.pack_into(order + "12f", hdr, 280, *np.asarray(sform)[:3, :].ravel())
    hdr[344:348] = magic
    payload = np.asarray(data).astype(data.dtype.newbyteorder(order)).tobytes(order="F")
    pad = b"\x00" * (vox_offset - 348)
    return bytes(hdr) + pad + payload


def test_volume_roundtrip(tmp_path, rng):
    data = rng.normal(size=(5, 4, 3, 6)).astype(np.float32)
    affine = np.eye(4)
    affine[:3, 3] = (-10.0, 5.0, 2.5)
    affine[0, 0] = 2.0
    vol = Volume4D(data=data, affine=affine, tr_seconds=0.8)
    p = tmp_path / "vol.nii"
    write_nifti(vol, p)
    back = read_nifti(p, kind="volume")
    assert isinstance(back, Volume4D)
    np.testing.assert_array_equal(back.data, data)
    np.testing.assert_allclose(back.affine, affine, atol=1e-6)
    assert back.tr_seconds == pytest.approx(0.8, abs=1e-7)


def test_gzip_transparency(tmp_path, rng):
    data = rng.normal(size=(4, 4, 4, 2)).astype(np.float32)
    vol = Volume4D(data=data, affine=np.eye(4), tr_seconds=2.0)
    plain = tmp_path / "v.nii"
    packed = tmp_path / "v.nii.gz"
    write_nifti(vol, plain)
    write_nifti(vol, packed)
    assert plain.read_bytes() == gzip.decompress(packed.read_bytes())
    a = read_nifti(plain)
    b = read_nifti(packed)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.affine, b.affine)


def test_label_roundtrip_smallest_dtype(tmp_path):
    labels = np.zeros((6, 5, 4), dtype=np.int32)
    labels[1:3, 1:3, 1:3] = 7
    labels[4, 4, 3] = 200
    lab = LabelVolume(labels=labels, affine=np.diag([2.0, 2.0, 2.0, 1.0]))
    p = tmp_path / "labels.nii"
    write_nifti(lab, p)
    raw = p.read_bytes()
    (datatype,) = struct.unpack("<h", raw[70:72])
    assert datatype == 2  # fits in uint8
    back = read_nifti(p)
    assert isinstance(back, LabelVolume)
    np.testing.assert_array_equal(back.labels, labels)

    big = LabelVolume(labels=labels.astype(np.int32) * 300, affine=np.eye(4))
    p2 = tmp_path / "big.nii"
    write_nifti(big, p2)
    (datatype2,) = struct.unpack("<h", p2.read_bytes()[70:72])
    assert datatype2 == 512  # uint16


def test_scl_scaling_applied(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    raw = make_raw("<", data.shape, 4, data, scl=(2.0, 1.0))
    p = tmp_path / "scaled.nii"
    p.write_bytes(raw)
    vol = read_nifti(p)
    assert isinstance(vol, Volume4D)  # scaling forces the float path
    expect = data.astype(np.float32) * 2.0 + 1.0
    np.testing.assert_array_equal(vol.data[..., 0], expect)


def test_zero_slope_means_unscaled(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    raw = make_raw("<", data.shape, 16, data, scl=(0.0, 99.0))
    p = tmp_path / "noscale.nii"
    p.write_bytes(raw)
    vol = read_nifti(p, kind="volume")
    np.testing.assert_array_equal(vol.data[..., 0], data)


def test_big_endian_detected(tmp_path):
    data = np.arange(12, dtype=np.int16).reshape(3, 2, 2)
    raw = make_raw(">", data.shape, 4, data)
    p = tmp_path / "be.nii"
    p.write_bytes(raw)
    out = read_nifti(p)
    assert isinstance(out, LabelVolume)
    np.testing.assert_array_equal(out.labels, data)


def test_affine_priority_sform_over_qform(tmp_path):
    data = np.ones((2, 2, 2), dtype=np.int16)
    sform = np.array([[0, -3, 0, 1], [3, 0, 0, 2], [0, 0, 3, 3], [0, 0, 0, 1.0]])
    raw = make_raw("<", data.shape, 4, data, sform=sform,
                   quatern=(0.0, 0.0, 0.0, 9.0, 9.0, 9.0))
    p = tmp_path / "s.nii"
    p.write_bytes(raw)
    out = read_nifti(p)
    np.testing.assert_allclose(out.affine, sform, atol=1e-6)


def test_affine_qform_rotation():
    # Quaternion (a, b, c, d) = (sqrt(.5), 0, 0, sqrt(.5)): 90 degrees about z.
    data = np.ones((2, 2, 2), dtype=np.int16)
    s = np.sqrt(0.5)
    raw = make_raw("<", data.shape, 4, data,
                   pixdim=[1.0, 2.0, 2.0, 2.0, 0, 0, 0, 0],
                   quatern=(0.0, 0.0, s, 10.0, 20.0, 30.0))
    hdr = parse_header(raw)
    aff = hdr.affine()
    expect = np.array([
        [0.0, -2.0, 0.0, 10.0],
        [2.0, 0.0, 0.0, 20.0],
        [0.0, 0.0, 2.0, 30.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    np.testing.assert_allclose(aff, expect, atol=1e-6)


def test_affine_qfac_flips_z():
    data = np.ones((2, 2, 2), dtype=np.int16)
    raw = make_raw("<", data.shape, 4, data,
                   pixdim=[-1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0],
                   quatern=(0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
    aff = parse_header(raw).affine()
    np.testing.assert_allclose(np.diag(aff), [1.0, 1.0, -1.0, 1.0], atol=1e-6)


def test_affine_fallback_pixdim():
    data = np.ones((2, 2, 2), dtype=np.int16)
    raw = make_raw("<", data.shape, 4, data,
                   pixdim=[1.0, 1.5, 2.5, 3.5, 0, 0, 0, 0])
    aff = parse_header(raw).affine()
    np.testing.assert_allclose(aff, np.diag([1.5, 2.5, 3.5, 1.0]))


def test_tr_unit_conversion(tmp_path):
    data = np.zeros((2, 2, 2, 3), dtype=np.float32)
    # xyzt_units = mm | msec = 2 | 16; pixdim[4] = 2000 ms -> 2 s
    raw = make_raw("<", data.shape, 16, data,
                   pixdim=[1, 1, 1, 1, 2000.0, 0, 0, 0], xyzt_units=2 | 16)
    p = tmp_path / "ms.nii"
    p.write_bytes(raw)
    vol = read_nifti(p)
    assert vol.tr_seconds == pytest.approx(2.0)


def test_extensions_preserved(tmp_path, rng):
    data = rng.normal(size=(3, 3, 3, 2)).astype(np.float32)
    vol = Volume4D(data=data, affine=np.eye(4), tr_seconds=1.5)
    ext = struct.pack("<2i", 16, 42) + b"payload!"  # one 16-byte extension
    p = tmp_path / "ext.nii"
    write_nifti(vol, p, extensions=ext)
    raw = p.read_bytes()
    assert raw[348] == 1  # extender flag set
    hdr = parse_header(raw)
    assert hdr.extensions == b""  # populated by read path, not parse
    back = read_nifti(p)
    np.testing.assert_array_equal(back.data, data)
    assert raw[352:352 + len(ext)] == ext


def test_bad_magic_rejected(tmp_path):
    data = np.ones((2, 2, 2), dtype=np.int16)
    raw = make_raw("<", data.shape, 4, data, magic=b"xxx\x00")
    p = tmp_path / "bad.nii"
    p.write_bytes(raw)
    with pytest.raises(FormatError):
        read_nifti(p)


def test_truncated_rejected(tmp_path):
    data = np.ones((4, 4, 4), dtype=np.int16)
    raw = make_raw("<", data.shape, 4, data)
    p = tmp_path / "trunc.nii"
    p.write_bytes(raw[:400])
    with pytest.raises(TruncatedFileError):
        read_nifti(p)
    p.write_bytes(raw[:100])
    with pytest.raises(TruncatedFileError):
        read_nifti(p)


def test_unsupported_datatype_rejected(tmp_path):
    # 32 is DT_COMPLEX64, which the reader does not handle.
    raw = make_raw("<", (2, 2, 2), 32, np.ones((2, 2, 2), dtype=np.float64))
    p = tmp_path / "cplx.nii"
    p.write_bytes(raw)
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(p)


def test_oversized_axis_rejected():
    from regionmae.nifti import _build_header_bytes

    with pytest.raises(ValidationError):
        _build_header_bytes((40000, 2, 2), np.dtype(np.float32), np.eye(4), 1.0, b"")


def test_trailing_singleton_squeezed(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2, 1, 1)
    raw = make_raw("<", data.shape, 16, data)
    p = tmp_path / "sq.nii"
    p.write_bytes(raw)
    vol = read_nifti(p, kind="volume")
    assert vol.data.shape == (2, 2, 2, 1)
