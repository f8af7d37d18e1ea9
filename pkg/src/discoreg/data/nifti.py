"""Minimal single-file NIfTI-1 reader and writer.

Supported subset: uncompressed little-endian ``.nii`` with magic ``n+1``,
datatypes uint8, int16, float32 and float64, and either 3-D scalar images
(dim[0] == 3) or vector fields stored with dim[0] == 5 and three components
in the fifth dimension (intent code 1007). Orientation beyond pixdim is not
interpreted.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..grid import ROLES, Grid, LabelMap, VectorField, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
INTENT_LABEL = 1002
INTENT_VECTOR = 1007

DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_CODES = {np.dtype(v): k for k, v in DATATYPES.items()}

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE


class NiftiError(ValueError):
    pass


class MalformedHeaderError(NiftiError):
    pass


class UnsupportedCompressionError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class UnsupportedOrientationError(NiftiError):
    pass


class UnsupportedLayoutError(NiftiError):
    pass


def _header(shape, datatype: int, spacing, intent: int = 0, descrip: str = "") -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = len(shape)
    dim[1 : 1 + len(shape)] = shape
    hdr["dim"] = dim
    hdr["intent_code"] = intent
    hdr["datatype"] = datatype
    hdr["bitpix"] = np.dtype(DATATYPES[datatype]).itemsize * 8
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip.encode("ascii")[:79]
    hdr["magic"] = b"n+1\x00"
    return hdr


def write_nifti(obj, path) -> None:
    """Write a Volume (float64), LabelMap (uint8) or VectorField (float64)."""
    if isinstance(obj, LabelMap):
        data = obj.labels.astype(np.uint8)
        hdr = _header(data.shape, 2, obj.grid.spacing, INTENT_LABEL, "labels")
    elif isinstance(obj, VectorField):
        # (3, W, H, D) -> (W, H, D, 1, 3)
        data = np.moveaxis(obj.array, 0, -1)[:, :, :, None, :].astype(np.float64)
        hdr = _header(data.shape, 64, obj.grid.spacing, INTENT_VECTOR, f"role={obj.role}")
    elif isinstance(obj, Volume):
        data = obj.array.astype(np.float64)
        hdr = _header(data.shape, 64, obj.grid.spacing, 0, "volume")
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as NIfTI")
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(np.asarray(data, order="F").tobytes(order="F"))


def read_header(raw: bytes) -> np.ndarray:
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedCompressionError("compressed NIfTI (gzip) is not supported")
    if len(raw) < HEADER_SIZE:
        raise MalformedHeaderError(f"malformed NIfTI header: {len(raw)} bytes, need {HEADER_SIZE}")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        if int(np.frombuffer(raw[:4], dtype=">i4")[0]) == HEADER_SIZE:
            raise UnsupportedLayoutError("big-endian NIfTI is not supported")
        raise MalformedHeaderError("malformed NIfTI header: sizeof_hdr != 348")
    if hdr["magic"] != b"n+1":  # numpy strips the trailing NUL
        raise MalformedHeaderError(f"malformed NIfTI header: magic {hdr['magic']!r} is not single-file 'n+1'")
    return hdr


def read_nifti(path, kind: str | None = None):
    """Read a supported NIfTI file.

    ``kind`` forces the result type ("volume", "labels" or "field"); by
    default the intent code and dimensionality decide.
    """
    raw = Path(path).read_bytes()
    hdr = read_header(raw)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype {code} is not supported (use uint8, int16, float32, float64)")
    for name in ("qform_code", "sform_code"):
        if not 0 <= int(hdr[name]) <= 4:
            raise UnsupportedOrientationError(f"invalid orientation code {name}={int(hdr[name])}")
    if float(hdr["pixdim"][0]) not in (-1.0, 0.0, 1.0):
        raise UnsupportedOrientationError(f"invalid qfac pixdim[0]={float(hdr['pixdim'][0])}")
    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if ndim == 3:
        shape = tuple(dim[1:4])
    elif ndim == 4 and dim[4] == 1:
        shape = tuple(dim[1:4])
    elif ndim == 5 and dim[4] == 1 and dim[5] == 3:
        shape = (dim[1], dim[2], dim[3], 1, 3)
    else:
        raise UnsupportedLayoutError(f"unsupported NIfTI dimensions {dim[: ndim + 1]}")
    offset = int(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise MalformedHeaderError(f"malformed NIfTI header: vox_offset {offset} < {VOX_OFFSET}")
    dtype = np.dtype(DATATYPES[code]).newbyteorder("<")
    count = int(np.prod(shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise MalformedHeaderError("NIfTI data block is truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    spacing = tuple(float(s) for s in hdr["pixdim"][1:4])
    grid = Grid(shape[:3], spacing)
    intent = int(hdr["intent_code"])

    if kind is None:
        if ndim == 5:
            kind = "field"
        elif intent == INTENT_LABEL:
            kind = "labels"
        else:
            kind = "volume"
    if kind == "field":
        if ndim != 5:
            raise UnsupportedLayoutError("vector fields need dim[0] == 5 with three components")
        descrip = hdr["descrip"].decode("ascii", "replace")
        role = descrip[5:] if descrip.startswith("role=") and descrip[5:] in ROLES else "deformation"
        arr = np.moveaxis(data[:, :, :, 0, :], -1, 0).astype(np.float64)
        return VectorField(grid, arr, role)
    if ndim == 5:
        raise UnsupportedLayoutError(f"file holds a vector field, cannot read as {kind}")
    data = data.reshape(shape[:3])
    if kind == "labels":
        return LabelMap(grid, np.array(data))
    if kind == "volume":
        arr = data.astype(np.float64)
        slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
        if slope not in (0.0, 1.0) or inter != 0.0:
            arr = arr * (slope if slope != 0.0 else 1.0) + inter
        return Volume(grid, arr)
    raise ValueError(f"unknown kind {kind!r}")


def read_grid(path) -> Grid:
    """Grid (extents and spacing) of a NIfTI file without loading voxel data."""
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    hdr = read_header(raw)
    dim = [int(d) for d in hdr["dim"]]
    return Grid(tuple(dim[1:4]), tuple(float(s) for s in hdr["pixdim"][1:4]))
