"""Minimal single-file NIfTI-1 (.nii) reader/writer plus a raw sidecar format.

Only little-endian files with ``dim[0] == 3`` and datatypes uint8, int16 or
float32 are supported. Orientation fields (qform/sform, quaternions, srow)
are carried through as opaque bytes and never interpreted.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_CODE_TO_DTYPE = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
}
_DTYPE_TO_CODE = {np.dtype(v).name: k for k, v in _CODE_TO_DTYPE.items()}

# qform_code .. srow_z: the orientation block kept verbatim
_ORIENT_START, _ORIENT_END = 252, 328
LABEL_VALUES = (0, 1, 2)


class NiftiFormatError(ValueError):
    """Header is not a valid single-file little-endian NIfTI-1 header."""


class UnsupportedDatatypeError(NiftiFormatError):
    """Header is valid but declares a datatype or layout outside the supported subset."""


class NiftiIOError(OSError):
    """Payload missing or truncated, or the file could not be written."""


class LabelValueError(ValueError):
    """Label map contains a value outside {0, 1, 2}."""


def _default_orientation():
    return bytes(_ORIENT_END - _ORIENT_START)


@dataclass
class Volume:
    """3D scalar grid indexed ``data[x, y, z]`` with voxel spacing in mm.

    ``meta`` holds provenance such as the normalisation divisor; it is not
    written to disk.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: bytes = field(default_factory=_default_orientation, repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing = tuple(float(s) for s in self.spacing)
        validate_volume(self)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    @property
    def dtype_tag(self):
        return self.data.dtype.name


@dataclass
class LabelMap:
    """Class-id grid: 0 background, 1 left ventricle, 2 right ventricle."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    orientation: bytes = field(default_factory=_default_orientation, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {data.shape}")
        check_labels(data)
        self.data = data.astype(np.uint8, copy=False)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def as_volume(self):
        return Volume(self.data, self.spacing, self.orientation)


def check_labels(data):
    data = np.asarray(data)
    bad = ~np.isin(data, LABEL_VALUES)
    if bad.any():
        raise LabelValueError(f"label values outside {{0,1,2}}: {np.unique(data[bad])[:5].tolist()}")


def validate_volume(volume):
    data = volume.data
    if data.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {data.shape}")
    if any(d <= 0 for d in data.shape):
        raise ValueError(f"volume dims must be positive, got {data.shape}")
    if data.dtype.name not in _DTYPE_TO_CODE:
        raise UnsupportedDatatypeError(f"unsupported dtype {data.dtype}; use float32, int16 or uint8")
    if len(volume.spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in volume.spacing):
        raise ValueError(f"spacing must be three positive finite values, got {volume.spacing}")
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise ValueError("volume contains non-finite values")
    if len(volume.orientation) != _ORIENT_END - _ORIENT_START:
        raise ValueError("orientation block has the wrong length")


def _build_header(volume):
    code = _DTYPE_TO_CODE[volume.data.dtype.name]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")  # 'regular', as other writers set it
    dim = [3, *volume.dims, 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, code, volume.data.dtype.itemsize * 8)
    pixdim = [1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    hdr[_ORIENT_START:_ORIENT_END] = volume.orientation
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_nifti(volume, path):
    """Write ``volume`` as a single-file NIfTI-1 image.

    The layout is a 348-byte header, 4 zero extension bytes and the voxel
    payload in x-fastest order, so ``read_nifti`` returns identical data.
    """
    validate_volume(volume)
    expected = int(np.prod(volume.dims))
    if volume.data.size != expected:
        raise ValueError(f"data length {volume.data.size} != {expected}")
    payload = np.asarray(volume.data, dtype=volume.data.dtype.newbyteorder("<")).tobytes(order="F")
    blob = _build_header(volume) + bytes(VOX_OFFSET - HEADER_SIZE) + payload
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise NiftiIOError(f"cannot write {path}: {exc}") from exc


def parse_header(raw):
    """Decode the fields this module relies on from a 348-byte header."""
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"header truncated: {len(raw)} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    dim = struct.unpack_from("<8h", raw, 40)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedDatatypeError("big-endian NIfTI files are not supported")
        raise NiftiFormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}")
    if not 1 <= dim[0] <= 7:
        raise UnsupportedDatatypeError(f"dim[0]={dim[0]} outside [1,7]; byte order not little-endian")
    magic = bytes(raw[344:348])
    if magic != MAGIC:
        raise NiftiFormatError(f"magic {magic!r} is not single-file NIfTI-1")
    datatype, bitpix = struct.unpack_from("<hh", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<fff", raw, 108)
    return {
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "orientation": bytes(raw[_ORIENT_START:_ORIENT_END]),
    }


def read_nifti(path):
    """Read a single-file NIfTI-1 image into a :class:`Volume`.

    Raises
    ------
    NiftiFormatError
        Wrong ``sizeof_hdr`` or magic.
    UnsupportedDatatypeError
        Datatype other than uint8/int16/float32, big-endian data, or ``dim[0] != 3``.
    NiftiIOError
        File missing, or the payload is shorter than the header declares.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise NiftiIOError(f"cannot read {path}: {exc}") from exc
    hdr = parse_header(raw)
    dim = hdr["dim"]
    if dim[0] != 3:
        raise UnsupportedDatatypeError(f"only 3D images are supported, dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d <= 0 for d in dims):
        raise NiftiFormatError(f"non-positive dimension in {dims}")
    if hdr["datatype"] not in _CODE_TO_DTYPE:
        raise UnsupportedDatatypeError(f"datatype code {hdr['datatype']} not supported")
    dtype = _CODE_TO_DTYPE[hdr["datatype"]]
    offset = int(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise NiftiFormatError(f"vox_offset {offset} < {VOX_OFFSET}")
    nbytes = int(np.prod(dims)) * dtype.itemsize
    if offset + nbytes > len(raw):
        raise NiftiIOError(f"{path}: payload needs {nbytes} bytes at offset {offset}, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    # identity scaling leaves the stored dtype alone
    if slope != 0 and np.isfinite(slope) and (slope, inter) != (1.0, 0.0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    return Volume(data, spacing, hdr["orientation"])


def write_labelmap(labelmap, path):
    check_labels(labelmap.data)
    write_nifti(Volume(labelmap.data.astype(np.uint8), labelmap.spacing, labelmap.orientation), path)


def read_labelmap(path):
    vol = read_nifti(path)
    data = vol.data
    if data.dtype.kind == "f":
        if not np.array_equal(data, np.round(data)):
            raise LabelValueError("label map holds non-integer values")
    check_labels(data)
    return LabelMap(data.astype(np.uint8), vol.spacing, vol.orientation)


def write_raw(volume, path):
    """Raw format: x-fastest little-endian payload at ``path`` plus ``path + '.json'``."""
    validate_volume(volume)
    meta = {"dims": list(volume.dims), "spacing": list(volume.spacing), "dtype": volume.dtype_tag}
    try:
        with open(path, "wb") as fh:
            fh.write(np.asarray(volume.data, dtype=volume.data.dtype.newbyteorder("<")).tobytes(order="F"))
        with open(os.fspath(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise NiftiIOError(f"cannot write {path}: {exc}") from exc


def read_raw(path):
    try:
        with open(os.fspath(path) + ".json") as fh:
            meta = json.load(fh)
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise NiftiIOError(f"cannot read {path}: {exc}") from exc
    if meta["dtype"] not in _DTYPE_TO_CODE:
        raise UnsupportedDatatypeError(f"dtype {meta['dtype']} not supported")
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    dims = tuple(meta["dims"])
    if len(raw) != int(np.prod(dims)) * dtype.itemsize:
        raise NiftiIOError(f"{path}: size {len(raw)} does not match dims {dims}")
    data = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F").astype(dtype.newbyteorder("="))
    return Volume(data, tuple(meta["spacing"]))
