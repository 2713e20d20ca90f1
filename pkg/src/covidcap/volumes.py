"""3D scalar volumes with physical voxel spacing, stored as NIfTI-1 files.

Grids are indexed ``[z, y, x]`` (depth, height, width) and spacing triples
follow the same ``(z, y, x)`` order, in millimetres.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_HEADER_SIZE = 348
_VOX_OFFSET = 352
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# NIfTI-1 datatype codes we read and write.
_CODE_TO_DTYPE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_DTYPE_TO_CODE = {v: k for k, v in _CODE_TO_DTYPE.items()}


@dataclass
class Volume:
    """A 3D scalar grid plus its voxel spacing in mm, ordered (z, y, x)."""

    grid: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise ValueError(f"expected a 3D grid, got shape {self.grid.shape}")
        if min(self.grid.shape) < 1:
            raise ValueError(f"grid has an empty axis: {self.grid.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        self.spacing = spacing

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write a volume as a single-file NIfTI-1 image (.nii or .nii.gz).

    The grid dtype must be uint8, int16, int32, float32 or float64; bool
    grids are stored as uint8.
    """
    grid = volume.grid
    if grid.dtype == np.bool_:
        grid = grid.astype(np.uint8)
    code = _DTYPE_TO_CODE.get(grid.dtype)
    if code is None:
        raise ValueError(f"unsupported grid dtype {grid.dtype}")

    nz, ny, nx = grid.shape
    dz, dy, dx = volume.spacing
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, grid.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", header, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<4f", header, 280, dx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, dy, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, dz, 0.0)
    header[344:348] = _MAGIC_SINGLE

    # NIfTI stores x fastest; a C-ordered (z, y, x) grid already matches.
    payload = bytes(header) + b"\x00" * (_VOX_OFFSET - _HEADER_SIZE)
    payload += np.ascontiguousarray(grid).tobytes()

    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_volume(path: str | Path) -> Volume:
    """Read a single-file NIfTI-1 image written by :func:`save_volume` or
    any little-endian NIfTI-1 writer."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                raw = gz.read()
        else:
            raw = fh.read()

    if len(raw) < _HEADER_SIZE:
        raise ValueError(f"{path}: file too short for a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HEADER_SIZE:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    magic = bytes(raw[344:348])
    if magic == _MAGIC_PAIR:
        raise ValueError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != _MAGIC_SINGLE:
        raise ValueError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or any(d not in (0, 1) for d in dim[4 : 1 + max(3, ndim)] if ndim > 3):
        raise ValueError(f"{path}: expected a 3D image, got dim={dim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    (datatype,) = struct.unpack_from("<h", raw, 70)
    dtype = _CODE_TO_DTYPE.get(datatype)
    if dtype is None:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)

    offset = int(vox_offset)
    count = nx * ny * nz
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    grid = flat.reshape(nz, ny, nx).copy()
    if slope not in (0.0, 1.0) or inter != 0.0:
        grid = grid * slope + inter

    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return Volume(grid=grid, spacing=spacing)
