"""Single-file NIfTI-1 (.nii / .nii.gz) reading and writing.

Only the fields needed to recover a 3-D voxel grid are interpreted:
dims, datatype, bitpix, vox_offset, scl_slope/scl_inter and the magic.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# datatype code -> numpy base type
DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODES = {np.dtype(v): k for k, v in DATATYPES.items()}


class NiftiFormatError(ValueError):
    pass


class UnsupportedDatatypeError(NiftiFormatError):
    pass


@dataclass
class VolumeRecord:
    voxels: np.ndarray  # X x Y x Z
    source: str = ""
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise NiftiFormatError(f"expected a 3-D volume, got shape {self.voxels.shape}")
        if self.mask is not None and self.mask.shape != self.voxels.shape:
            raise ValueError(f"mask shape {self.mask.shape} differs from image {self.voxels.shape}")

    @property
    def value_range(self) -> tuple[float, float]:
        return float(self.voxels.min()), float(self.voxels.max())


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path) -> np.ndarray:
    """Voxel array of a NIfTI-1 file, rescaled when scl_slope is set."""
    path = Path(path)
    raw = _open_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        end = ">"
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not {HEADER_SIZE}")
    if raw[344:348] != MAGIC:
        raise NiftiFormatError(f"{path}: bad magic {raw[344:348]!r}, expected {MAGIC!r}")
    dim = struct.unpack(end + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(end + "2h", raw[70:74])
    vox_offset = struct.unpack(end + "f", raw[108:112])[0]
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} not supported")
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    while len(shape) < 3:
        shape = shape + (1,)
    if len(shape) > 3:
        if any(d != 1 for d in shape[3:]):
            raise NiftiFormatError(f"{path}: only 3-D volumes are supported, dims {shape}")
        shape = shape[:3]
    dt = np.dtype(DATATYPES[datatype]).newbyteorder(end)
    if bitpix != dt.itemsize * 8:
        raise NiftiFormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    start = int(vox_offset)
    count = int(np.prod(shape))
    if start + count * dt.itemsize > len(raw):
        raise NiftiFormatError(f"{path}: voxel payload truncated")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=start).reshape(shape, order="F")
    data = data.astype(dt.newbyteorder("="))
    if slope != 0 and not (slope == 1 and inter == 0):
        data = data.astype(np.float64) * slope + inter
    return data


def read_nifti_volume(path, mask_path=None) -> VolumeRecord:
    voxels = read_nifti(path)
    mask = read_nifti(mask_path) if mask_path is not None else None
    return VolumeRecord(voxels, str(path), mask)


def write_nifti(path, voxels: np.ndarray, scl_slope: float = 0.0, scl_inter: float = 0.0,
                byteorder: str = "<") -> None:
    """Write a single-file NIfTI-1; gzip-compressed when the name ends in .gz."""
    arr = np.asarray(voxels)
    base = np.dtype(arr.dtype.type) if arr.dtype.byteorder in "=|" else arr.dtype.newbyteorder("=")
    if base not in CODES:
        raise UnsupportedDatatypeError(f"dtype {arr.dtype} not supported")
    if arr.ndim != 3:
        raise NiftiFormatError("only 3-D volumes are written")
    end = byteorder
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(end + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(end + "8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into(end + "2h", hdr, 70, CODES[base], base.itemsize * 8)
    struct.pack_into(end + "8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(end + "f", hdr, 108, 352.0)
    struct.pack_into(end + "2f", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = MAGIC
    payload = np.asarray(arr, dtype=base.newbyteorder(end)).tobytes(order="F")
    blob = bytes(hdr) + b"\x00" * 4 + payload
    path = Path(path)
    if path.name.endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
