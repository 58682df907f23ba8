"""Minimal NIfTI-1 single-file reader/writer.

Only little-endian ``n+1`` files are handled, with datatypes uint8, int16,
int32 and float32, optionally gzip-compressed.  On disk the array is stored
x-fastest, which is exactly C order for our ``(slice, row, col)`` indexing, so
no transposition is needed.
"""
from __future__ import annotations

import gzip
import io
import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..core import MASK_DTYPE, LabelMask, LabelSchema, Spacing, Volume
from ..errors import DataError, FormatError, SchemaError, UnsupportedError

PathLike = Union[str, os.PathLike]

HEADER_SIZE = 348
VOX_OFFSET = 352
ORIENTATION_SLICE = slice(252, 328)  # qform_code .. srow_z

DT_UINT8, DT_INT16, DT_INT32, DT_FLOAT32 = 2, 4, 8, 16
DATATYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_INT32: np.dtype("<i4"),
    DT_FLOAT32: np.dtype("<f4"),
}
INTEGER_TYPES = (DT_UINT8, DT_INT16, DT_INT32)


def _is_gz(path: Path) -> bool:
    return path.name.endswith(".gz")


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"{path}: corrupt gzip stream ({e})") from None
    return raw


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write via a sibling temp file and rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _parse(raw: bytes, path: PathLike):
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedError(f"{path}: big-endian NIfTI files are not supported")
        raise FormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: 'ni1' header/image pairs are not supported; convert to single-file 'n+1'")
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 2 <= ndim <= 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedError(f"{path}: only 2-D/3-D images are supported, dim={dim}")
    nx, ny = dim[1], dim[2]
    nz = dim[3] if ndim >= 3 else 1
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive extent in dim={dim}")

    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in DATATYPES:
        raise UnsupportedError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<3f", raw, 108)

    dtype = DATATYPES[datatype]
    offset = int(vox_offset)
    count = nx * ny * nz
    if len(raw) < offset + count * dtype.itemsize:
        raise FormatError(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(nz, ny, nx)
    # float32 header fields: recover the shortest decimal that round-trips
    px = [float(str(np.float32(abs(v)))) for v in pixdim[1:4]]
    spacing = Spacing(dx=px[0], dy=px[1], dz=px[2] if ndim >= 3 else 1.0)
    return data, datatype, spacing, slope, inter, raw[ORIENTATION_SLICE]


def read_header_spacing(path: PathLike) -> Spacing:
    return _parse(_read_bytes(path), path)[2]


def read_volume(path: PathLike, case_id: Optional[str] = None) -> Volume:
    data, _, spacing, slope, inter, orient = _parse(_read_bytes(path), path)
    data = data.astype(np.float64)
    # slope 0 means "no scaling" in NIfTI-1
    if slope != 0.0 and np.isfinite(slope):
        data = data * slope + inter
    if not np.isfinite(data).all():
        raise DataError(f"{path}: volume contains NaN or Inf voxels")
    if case_id is None:
        case_id = _stem(Path(path))
    return Volume(data.astype(np.float32), spacing, case_id, orient)


def read_mask(path: PathLike, schema: LabelSchema) -> LabelMask:
    data, datatype, _, slope, inter, _ = _parse(_read_bytes(path), path)
    if datatype not in INTEGER_TYPES:
        raise FormatError(f"{path}: masks must use an integer datatype, got code {datatype}")
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise FormatError(f"{path}: masks must not carry intensity scaling")
    if data.size and data.min() < 0:
        raise SchemaError(f"{path}: negative label ids in mask")
    return LabelMask(data.astype(MASK_DTYPE), schema)


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _default_orientation(spacing: Spacing) -> bytes:
    buf = bytearray(76)
    struct.pack_into("<hh", buf, 0, 0, 1)  # qform_code, sform_code
    struct.pack_into("<4f", buf, 28, spacing.dx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", buf, 44, 0.0, spacing.dy, 0.0, 0.0)
    struct.pack_into("<4f", buf, 60, 0.0, 0.0, spacing.dz, 0.0)
    return bytes(buf)


def encode(array: np.ndarray, spacing: Spacing, datatype: int, orientation: Optional[bytes] = None) -> bytes:
    dtype = DATATYPES[datatype]
    nz, ny, nx = array.shape
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing.dx, spacing.dy, spacing.dz, 0, 0, 0, 0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    hdr[ORIENTATION_SLICE] = orientation if orientation is not None else _default_orientation(spacing)
    hdr[344:348] = b"n+1\x00"
    body = np.ascontiguousarray(array, dtype=dtype).tobytes()
    return bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body


def _finish(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    if _is_gz(path):
        buf = io.BytesIO()
        # fixed mtime and empty filename keep the output byte-reproducible
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        payload = buf.getvalue()
    atomic_write(path, payload)


def write_volume(volume: Volume, path: PathLike) -> None:
    _finish(path, encode(volume.data, volume.spacing, DT_FLOAT32, volume.orientation))


def write_mask(mask: LabelMask, path: PathLike, spacing: Spacing, orientation: Optional[bytes] = None) -> None:
    top = max(mask.label_schema.ids)
    datatype = DT_UINT8 if top < 256 else DT_INT16
    _finish(path, encode(mask.data, spacing, datatype, orientation))
