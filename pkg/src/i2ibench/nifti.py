"""Minimal NIfTI-1 single-file reader/writer.

Reads .nii / .nii.gz with either endianness, decodes geometry from the
sform (preferred when sform_code > 0) or qform, and applies
scl_slope/scl_inter. Writes little-endian float32 single files that
round-trip bit-exactly through :func:`read_nifti`. gzip members are
emitted with a zeroed mtime so identical volumes produce identical bytes.
"""

from __future__ import annotations

import gzip
import io
import math
import os
import struct

import numpy as np

from .volume import Modality, ShapeError, Volume

HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# NIfTI-1 datatype codes for plain scalar grids.
_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
    1024: "i8",
    1280: "u8",
}
_UNSUPPORTED = {32: "complex64", 128: "rgb24", 1792: "complex128", 2304: "rgba32"}


class NiftiFormatError(ValueError):
    """Malformed NIfTI stream; carries the byte offset of the defect."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class UnsupportedDatatypeError(ValueError):
    pass


def _open_for_read(path):
    f = open(path, "rb")
    magic = f.read(2)
    f.seek(0)
    if magic == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=f, mode="rb")
    return f


def read_nifti(path, modality: Modality | None = None) -> Volume:
    """Read a NIfTI-1 single file into a Volume (float32 voxels).

    ``modality`` overrides the tag; otherwise a tag embedded in descrip by
    :func:`write_nifti` is honored, falling back to CT.
    """
    with _open_for_read(path) as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("file shorter than the 348-byte NIfTI-1 header", len(raw))

    (sizeof_hdr_le,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr_le == HEADER_SIZE:
        end = "<"
    else:
        (sizeof_hdr_be,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr_be != HEADER_SIZE:
            raise NiftiFormatError("sizeof_hdr is not 348 in either byte order", 0)
        end = ">"

    magic = raw[344:348]
    if magic == _MAGIC_PAIR:
        raise NiftiFormatError("two-file (.hdr/.img) NIfTI pairs are not supported", 344)
    if magic != _MAGIC_SINGLE:
        raise NiftiFormatError(f"bad magic {magic!r}, expected 'n+1\\x00'", 344)

    dim = struct.unpack_from(end + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", raw, 70)
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(end + "2f", raw, 112)
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("ascii", errors="replace")
    qform_code, sform_code = struct.unpack_from(end + "2h", raw, 252)
    quatern = struct.unpack_from(end + "3f", raw, 256)
    qoffset = struct.unpack_from(end + "3f", raw, 268)
    srow = np.array(struct.unpack_from(end + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    if datatype in _UNSUPPORTED:
        raise UnsupportedDatatypeError(
            f"datatype {datatype} ({_UNSUPPORTED[datatype]}) is not a scalar grid"
        )
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"unknown NIfTI datatype code {datatype}")
    if dim[0] != 3:
        raise ShapeError(f"expected a 3D volume, header declares dim[0] = {dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise ShapeError(f"non-positive dimensions {dims}")

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else HEADER_SIZE + 4
    count = dims[0] * dims[1] * dims[2]
    dtype = np.dtype(end + _DTYPES[datatype])
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiFormatError(
            f"voxel payload truncated: need {nbytes} bytes at offset {offset}", len(raw)
        )
    voxels = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = voxels.astype(np.float32).reshape(dims, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = (data.astype(np.float64) * slope + scl_inter).astype(np.float32)

    spacing, origin, direction = _decode_geometry(
        sform_code, srow, qform_code, quatern, qoffset, pixdim
    )

    if modality is None:
        modality = _modality_from_descrip(descrip)
    return Volume(data=data, spacing=spacing, origin=origin, direction=direction,
                  modality=modality)


def _decode_geometry(sform_code, srow, qform_code, quatern, qoffset, pixdim):
    if sform_code > 0:
        m = srow[:, :3]
        spacing = np.linalg.norm(m, axis=0)
        if np.any(spacing <= 0):
            raise NiftiFormatError("sform has a zero-length column", 280)
        direction = m / spacing
        return tuple(spacing), tuple(srow[:, 3]), direction
    if qform_code > 0:
        b, c, d = (float(q) for q in quatern)
        a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        r = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
                [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
                [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c],
            ]
        )
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        r[:, 2] *= qfac
        spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
        return spacing, tuple(qoffset), r
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    return spacing, (0.0, 0.0, 0.0), np.eye(3)


def _modality_from_descrip(descrip: str) -> Modality:
    if "modality=" in descrip:
        tag = descrip.split("modality=", 1)[1].split(";", 1)[0].strip()
        try:
            return Modality(tag)
        except ValueError:
            pass
    return Modality.CT


def write_nifti(vol: Volume, path) -> None:
    """Write a Volume as a little-endian float32 NIfTI-1 single file.

    Extension selects compression: .nii.gz is gzip-compressed with a fixed
    (zero) mtime, anything else is raw.
    """
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))  # regular
    nx, ny, nz = vol.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<B", hdr, 123, 2 | 8)  # mm | sec
    descrip = f"i2ibench modality={vol.modality.value}".encode("ascii")[:79]
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform aligned
    srow = vol.direction * np.asarray(vol.spacing)[None, :]
    struct.pack_into("<12f", hdr, 280,
                     *srow[0], vol.origin[0], *srow[1], vol.origin[1], *srow[2], vol.origin[2])
    hdr[344:348] = _MAGIC_SINGLE

    payload = vol.data.astype("<f4").ravel(order="F").tobytes()
    buf = io.BytesIO()
    buf.write(hdr)
    buf.write(b"\x00\x00\x00\x00")  # no extensions
    buf.write(payload)

    path = os.fspath(path)
    blob = buf.getvalue()
    if path.endswith(".gz"):
        with open(path, "wb") as f:
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as f:
            f.write(blob)
