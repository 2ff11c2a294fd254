import gzip
import struct

import numpy as np
import pytest

from i2ibench.nifti import (
    NiftiFormatError,
    UnsupportedDatatypeError,
    read_nifti,
    write_nifti,
)
from i2ibench.volume import Modality, ShapeError, Volume


def make_volume(data, spacing=(1.0, 1.0, 1.0), modality=Modality.CT, **kw):
    return Volume(np.asarray(data, dtype=np.float32), spacing, modality=modality, **kw)


def test_constant_volume_roundtrip(tmp_path):
    v = make_volume(np.full((4, 4, 4), 7.0))
    p = tmp_path / "c.nii"
    write_nifti(v, p)
    r = read_nifti(p)
    assert r.voxel_count == 64
    assert (r.data == 7.0).all()
    assert r.spacing == (1.0, 1.0, 1.0)


def test_random_roundtrip_bit_equal(tmp_path):
    rng = np.random.default_rng(11)
    v = make_volume(rng.normal(size=(7, 6, 5)) * 100, spacing=(0.7, 1.1, 2.4),
                    origin=(4.5, -3.0, 12.0), modality=Modality.PET)
    for name in ("a.nii", "a.nii.gz"):
        p = tmp_path / name
        write_nifti(v, p)
        r = read_nifti(p)
        assert np.array_equal(r.data, v.data)
        assert np.allclose(r.spacing, v.spacing, atol=1e-5)
        assert np.allclose(r.origin, v.origin, atol=1e-5)
        assert r.modality is Modality.PET


def test_double_roundtrip_identical(tmp_path):
    rng = np.random.default_rng(3)
    v = make_volume(rng.normal(size=(5, 5, 5)))
    p1, p2 = tmp_path / "1.nii", tmp_path / "2.nii"
    write_nifti(v, p1)
    v2 = read_nifti(p1)
    write_nifti(v2, p2)
    v3 = read_nifti(p2)
    assert v2.dims == v3.dims
    assert np.array_equal(v2.data, v3.data)
    assert np.allclose(v2.spacing, v3.spacing, atol=1e-5)


def test_anisotropic_spacing_preserved(tmp_path):
    v = make_volume(np.zeros((3, 3, 3)), spacing=(1.0, 1.0, 3.0))
    p = tmp_path / "s.nii"
    write_nifti(v, p)
    assert read_nifti(p).spacing == (1.0, 1.0, 3.0)


def test_written_file_parses_with_independent_reader(tmp_path):
    # independent struct-level parse of the standard header layout
    v = make_volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4, order="F").reshape(2, 3, 4),
                    spacing=(1.5, 2.0, 2.5), origin=(1.0, 2.0, 3.0))
    p = tmp_path / "t.nii"
    write_nifti(v, p)
    raw = p.read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert raw[344:348] == b"n+1\x00"
    dim = struct.unpack_from("<8h", raw, 40)
    assert dim[0] == 3 and dim[1:4] == (2, 3, 4)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    assert (datatype, bitpix) == (16, 32)
    pixdim = struct.unpack_from("<8f", raw, 76)
    assert pixdim[1:4] == pytest.approx((1.5, 2.0, 2.5))
    vox_offset = struct.unpack_from("<f", raw, 108)[0]
    srow = struct.unpack_from("<12f", raw, 280)
    assert (srow[3], srow[7], srow[11]) == pytest.approx((1.0, 2.0, 3.0))
    payload = np.frombuffer(raw, dtype="<f4", count=24, offset=int(vox_offset))
    assert np.array_equal(payload.reshape((2, 3, 4), order="F"), v.data)


def _minimal_header(dims, datatype=16, bitpix=32, endian="<", scl=(1.0, 0.0)):
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into(endian + "2h", hdr, 70, datatype, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, *scl)
    hdr[344:348] = b"n+1\x00"
    return hdr


def test_scl_slope_inter_applied(tmp_path):
    hdr = _minimal_header((2, 2, 2), datatype=4, bitpix=16, scl=(2.0, 1.0))
    payload = np.full(8, 3, dtype="<i2").tobytes()
    p = tmp_path / "scl.nii"
    p.write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
    r = read_nifti(p)
    assert (r.data == 7.0).all()  # 2 * 3 + 1


def test_big_endian_header_accepted(tmp_path):
    hdr = _minimal_header((2, 2, 2), datatype=16, bitpix=32, endian=">")
    payload = np.arange(8, dtype=">f4").tobytes()
    p = tmp_path / "be.nii"
    p.write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
    r = read_nifti(p)
    assert np.array_equal(np.sort(r.data.ravel()), np.arange(8, dtype=np.float32))


def test_gzip_detected_by_magic(tmp_path):
    hdr = _minimal_header((2, 2, 2))
    payload = np.zeros(8, dtype="<f4").tobytes()
    p = tmp_path / "odd_extension.nii"  # gzipped despite the plain extension
    p.write_bytes(gzip.compress(bytes(hdr) + b"\x00" * 4 + payload))
    assert read_nifti(p).dims == (2, 2, 2)


def test_malformed_header_reports_byte_offset(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(b"\x00" * 400)
    with pytest.raises(NiftiFormatError) as exc:
        read_nifti(p)
    assert exc.value.byte_offset == 0

    short = tmp_path / "short.nii"
    short.write_bytes(b"\x00" * 100)
    with pytest.raises(NiftiFormatError) as exc:
        read_nifti(short)
    assert exc.value.byte_offset == 100

    hdr = _minimal_header((2, 2, 2))
    hdr[344:348] = b"oops"
    bad_magic = tmp_path / "magic.nii"
    bad_magic.write_bytes(bytes(hdr) + b"\x00" * 4 + np.zeros(8, dtype="<f4").tobytes())
    with pytest.raises(NiftiFormatError) as exc:
        read_nifti(bad_magic)
    assert exc.value.byte_offset == 344


def test_unsupported_datatype_rejected(tmp_path):
    hdr = _minimal_header((2, 2, 2), datatype=128, bitpix=24)  # RGB
    p = tmp_path / "rgb.nii"
    p.write_bytes(bytes(hdr) + b"\x00" * 4 + b"\x00" * 24)
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(p)


def test_non_3d_rejected(tmp_path):
    hdr = _minimal_header((2, 2, 2))
    struct.pack_into("<8h", hdr, 40, 4, 2, 2, 2, 5, 1, 1, 1)
    p = tmp_path / "4d.nii"
    p.write_bytes(bytes(hdr) + b"\x00" * 4 + np.zeros(40, dtype="<f4").tobytes())
    with pytest.raises(ShapeError):
        read_nifti(p)


def test_truncated_payload_reports_offset(tmp_path):
    hdr = _minimal_header((4, 4, 4))
    p = tmp_path / "trunc.nii"
    p.write_bytes(bytes(hdr) + b"\x00" * 4 + b"\x00" * 16)
    with pytest.raises(NiftiFormatError):
        read_nifti(p)


def test_qform_fallback_geometry(tmp_path):
    hdr = _minimal_header((2, 2, 2))
    struct.pack_into("<8f", hdr, 76, 1.0, 0.5, 0.75, 1.25, 0, 0, 0, 0)
    struct.pack_into("<2h", hdr, 252, 1, 0)  # qform only, identity quaternion
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 268, 9.0, 8.0, 7.0)
    p = tmp_path / "q.nii"
    p.write_bytes(bytes(hdr) + b"\x00" * 4 + np.zeros(8, dtype="<f4").tobytes())
    r = read_nifti(p)
    assert r.spacing == pytest.approx((0.5, 0.75, 1.25))
    assert r.origin == pytest.approx((9.0, 8.0, 7.0))
    assert np.allclose(r.direction, np.eye(3))
