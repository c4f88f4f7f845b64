"""Minimal single-file NIfTI-1 reader/writer for 3D scalar volumes.

Covers exactly what the pipeline needs: ``.nii``/``.nii.gz``, the common
scalar datatypes, voxel spacing from pixdim and the qform offset as origin.
Written files are byte-deterministic (gzip mtime pinned to zero).
"""

from __future__ import annotations

import gzip
import io
import os
import struct

import numpy as np

from .errors import IngestionError

HEADER_SIZE = 348
DATA_OFFSET = 352  # header + 4-byte extension flag

_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.float32): 16, np.dtype(np.float64): 64,
          np.dtype(np.int16): 4, np.dtype(np.int32): 8}


def _read_bytes(path):
    if not os.path.exists(path):
        raise IngestionError(f"no such volume file: {path}")
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc


def read_nifti(path):
    """Load a NIfTI-1 volume.

    Returns ``(data, spacing, origin)`` where data is a 3D array in (x, y, z)
    index order, spacing is the voxel size in mm per axis and origin is the
    qform offset in mm.
    """
    raw = _read_bytes(path)
    if len(raw) < DATA_OFFSET:
        raise IngestionError(f"{path}: truncated header")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise IngestionError(f"{path}: corrupt header (sizeof_hdr={sizeof_hdr})")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise IngestionError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 3:
        raise IngestionError(f"{path}: {ndim}D image, need a 3D volume")
    if ndim > 3 and any(d > 1 for d in dim[4:ndim + 1]):
        raise IngestionError(f"{path}: non-scalar {ndim}D image")
    shape = tuple(dim[1:4])
    if any(d < 1 for d in shape):
        raise IngestionError(f"{path}: bad dims {shape}")

    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    if datatype not in _DTYPES:
        raise IngestionError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    slope, inter = struct.unpack_from(order + "2f", raw, 112)
    origin = struct.unpack_from(order + "3f", raw, 268)

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    count = int(np.prod(shape))
    offset = int(vox_offset) if vox_offset else DATA_OFFSET
    if len(raw) < offset + count * dtype.itemsize:
        raise IngestionError(f"{path}: truncated data section")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope or 1.0) + inter
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    return np.ascontiguousarray(data), spacing, tuple(float(o) for o in origin)


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Write a 3D array as NIfTI-1; float arrays as float32, masks as uint8."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise IngestionError(f"can only write 3D volumes, got shape {data.shape}")
    if data.dtype == bool:
        data = data.astype(np.uint8)
    elif data.dtype not in _CODES:
        data = data.astype(np.float32)
    code = _CODES[data.dtype]

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    header[38] = ord("r")  # regular
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<h", header, 252, 1)          # qform: scaling only
    struct.pack_into("<h", header, 254, 1)          # sform present
    struct.pack_into("<3f", header, 268, *origin)
    struct.pack_into("<4f", header, 280, spacing[0], 0, 0, origin[0])
    struct.pack_into("<4f", header, 296, 0, spacing[1], 0, origin[1])
    struct.pack_into("<4f", header, 312, 0, 0, spacing[2], origin[2])
    header[344:348] = b"n+1\x00"

    payload = bytes(header) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    if str(path).endswith(".gz"):
        buf = io.BytesIO()
        # mtime pinned so identical volumes produce identical bytes
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
            gz.write(payload)
        blob = buf.getvalue()
    else:
        blob = payload
    with open(path, "wb") as fh:
        fh.write(blob)
