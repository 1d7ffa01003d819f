"""Minimal single-file NIfTI-1 reader/writer for volumes, masks and fields.

Only what the pipeline needs: ``.nii`` / ``.nii.gz``, datatypes uint8, int16
and float32, axis-aligned orientation. Scalars and fields are written as
float32, masks as uint8, always little-endian with the data at byte 352.
"""
from __future__ import annotations

import gzip
import io
import os
import struct

import numpy as np

from .volume import DisplacementField, GridGeometry, LabelMask, ScalarVolume

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.uint8, DT_INT16: np.int16, DT_FLOAT32: np.float32}
_BITPIX = {DT_UINT8: 8, DT_INT16: 16, DT_FLOAT32: 32}

INTENT_DISPVECT = 1006
# carried in descrip/intent_name instead of a header extension so that the data
# offset stays at 352
FIELD_NOTE = b"displacement in voxel units"
FIELD_INTENT_NAME = b"disp_voxel"

# (name, struct code) in on-disk order; see the NIfTI-1 header layout
_LAYOUT = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"), ("qoffset_x", "f"),
    ("qoffset_y", "f"), ("qoffset_z", "f"), ("srow_x", "4f"), ("srow_y", "4f"),
    ("srow_z", "4f"), ("intent_name", "16s"), ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _LAYOUT)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(ValueError):
    """Base class for unreadable or unwritable NIfTI content."""


class MagicError(NiftiError):
    pass


class DatatypeError(NiftiError):
    pass


class OrientationError(NiftiError):
    pass


def _counts(code):
    if code[0].isdigit():
        return int(code[:-1])
    return 1


def _unpack(raw: bytes, endian: str) -> dict:
    flat = struct.unpack(endian + _FORMAT, raw)
    out, k = {}, 0
    for name, code in _LAYOUT:
        n = _counts(code) if code[-1] != "s" else 1
        out[name] = flat[k] if n == 1 else tuple(flat[k:k + n])
        k += n
    return out


def _pack(h: dict) -> bytes:
    flat = []
    for name, code in _LAYOUT:
        v = h[name]
        flat.extend(v if isinstance(v, tuple) else [v])
    return struct.pack("<" + _FORMAT, *flat)


def _blank_header() -> dict:
    h = {}
    for name, code in _LAYOUT:
        kind = code[-1]
        n = _counts(code) if kind != "s" else 1
        zero = b"" if kind == "s" else (b"\0" if kind == "c" else 0)
        h[name] = zero if n == 1 else tuple([0] * n)
    h.update(sizeof_hdr=HEADER_SIZE, regular=b"r", vox_offset=float(VOX_OFFSET),
             magic=b"n+1\0", xyzt_units=2)  # millimetres
    return h


def _decimal32(x: float) -> float:
    # shortest decimal that rounds to the stored float32 (0.8f reads back as 0.8)
    return float(str(np.float32(x)))


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _quaternion_matrix(b, c, d):
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def _check_axis_aligned(h):
    mats = []
    if h["sform_code"] > 0:
        mats.append(np.array([h["srow_x"][:3], h["srow_y"][:3], h["srow_z"][:3]]))
    if h["qform_code"] > 0:
        mats.append(_quaternion_matrix(h["quatern_b"], h["quatern_c"], h["quatern_d"]))
    for m in mats:
        off = m - np.diag(np.diag(m))
        scale = max(float(np.abs(m).max()), 1e-12)
        if np.abs(off).max() > 1e-6 * scale:
            raise OrientationError("only axis-aligned orientations are supported")


def read_nifti(path):
    """Load a ``.nii``/``.nii.gz`` file as ScalarVolume, LabelMask or DisplacementField.

    uint8 data holding only 0/1 load as masks; 5-D data with ``dim[5] == 3``
    loads as a displacement field; everything else as a scalar volume.
    """
    data = _read_bytes(path)
    if len(data) < HEADER_SIZE:
        raise MagicError(f"{path}: shorter than a NIfTI-1 header")
    endian = "<"
    if struct.unpack("<i", data[:4])[0] != HEADER_SIZE:
        if struct.unpack(">i", data[:4])[0] != HEADER_SIZE:
            raise MagicError(f"{path}: bad header size")
        endian = ">"
    h = _unpack(data[:HEADER_SIZE], endian)
    if h["magic"] != b"n+1\0":
        raise MagicError(f"{path}: magic {h['magic']!r} is not single-file NIfTI-1")
    dt = h["datatype"]
    if dt not in _DTYPES:
        raise DatatypeError(f"{path}: unsupported datatype code {dt}")
    _check_axis_aligned(h)
    dim = h["dim"]
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiError(f"{path}: invalid dim[0] = {ndim}")
    shape = [max(int(dim[i]), 1) for i in range(1, ndim + 1)]
    shape += [1] * (3 - len(shape))
    dims = tuple(shape[:3])
    is_field = ndim == 5 and shape[3] == 1 and shape[4] == 3
    if not is_field and any(n != 1 for n in shape[3:]):
        raise NiftiError(f"{path}: unsupported dimensions {tuple(shape)}")
    spacing = tuple(_decimal32(abs(h["pixdim"][i])) or 1.0 for i in (1, 2, 3))
    geom = GridGeometry(dims, spacing)
    dtype = np.dtype(_DTYPES[dt]).newbyteorder(endian)
    count = int(np.prod(shape))
    offset = int(h["vox_offset"])
    if len(data) < offset + count * dtype.itemsize:
        raise NiftiError(f"{path}: truncated data")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    arr = raw.reshape(shape, order="F")
    slope, inter = h["scl_slope"], h["scl_inter"]
    scaled = slope not in (0.0, 1.0) or (slope != 0.0 and inter != 0.0)
    if is_field:
        vec = np.moveaxis(arr[:, :, :, 0, :], -1, 0).astype(np.float64)
        if scaled:
            vec = vec * slope + inter
        return DisplacementField(geom, vec)
    vol = arr.reshape(dims, order="F") if arr.shape != dims else arr
    if dt == DT_UINT8 and not scaled and vol.max(initial=0) <= 1:
        return LabelMask(geom, vol.astype(bool))
    vals = vol.astype(np.float64)
    if scaled:
        vals = vals * slope + inter
    return ScalarVolume(geom, vals)


def _header_for(geom: GridGeometry, datatype: int, field: bool) -> dict:
    h = _blank_header()
    nx, ny, nz = geom.dims
    if field:
        h["dim"] = (5, nx, ny, nz, 1, 3, 1, 1)
        h["intent_code"] = INTENT_DISPVECT
        h["descrip"] = FIELD_NOTE
        h["intent_name"] = FIELD_INTENT_NAME
    else:
        h["dim"] = (3, nx, ny, nz, 1, 1, 1, 1)
    sx, sy, sz = (float(s) for s in geom.spacing)
    h["pixdim"] = (1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    h["datatype"] = datatype
    h["bitpix"] = _BITPIX[datatype]
    h["qform_code"] = 1
    h["sform_code"] = 1
    h["srow_x"] = (sx, 0.0, 0.0, 0.0)
    h["srow_y"] = (0.0, sy, 0.0, 0.0)
    h["srow_z"] = (0.0, 0.0, sz, 0.0)
    return h


def encode_nifti(value) -> bytes:
    """Serialise a volume, mask or field to uncompressed NIfTI-1 bytes."""
    if isinstance(value, LabelMask):
        h = _header_for(value.geometry, DT_UINT8, False)
        payload = value.values.astype("<u1").tobytes(order="F")
    elif isinstance(value, ScalarVolume):
        h = _header_for(value.geometry, DT_FLOAT32, False)
        payload = value.values.astype("<f4").tobytes(order="F")
    elif isinstance(value, DisplacementField):
        h = _header_for(value.geometry, DT_FLOAT32, True)
        payload = np.moveaxis(value.vectors, 0, -1).astype("<f4").tobytes(order="F")
    else:
        raise TypeError(f"cannot write {type(value).__name__} as NIfTI")
    if isinstance(value, (ScalarVolume, DisplacementField)):
        arr = value.values if isinstance(value, ScalarVolume) else value.vectors
        with np.errstate(over="ignore"):
            if not np.all(np.isfinite(arr.astype(np.float32))):
                raise NiftiError("values overflow float32")
    return _pack(h) + b"\0" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti(value, path) -> None:
    """Write ``value``; a ``.gz`` suffix selects gzip (with a fixed timestamp)."""
    blob = encode_nifti(value)
    path = os.fspath(path)
    if path.endswith(".gz"):
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(blob)
        blob = buf.getvalue()
    with open(path, "wb") as f:
        f.write(blob)


def read_header(path) -> dict:
    """Decoded header fields (for inspection and tests)."""
    data = _read_bytes(path)
    return _unpack(data[:HEADER_SIZE], "<")
