"""Voxel masks and displacement fields, with their binary file formats.

Both formats are little-endian with an x-fastest flat voxel order
(index = ix + nx*(iy + ny*iz)):

* ``DFLD``: magic ``DFLD``, u32 version=1, u32 nx, ny, nz, f64 sx, sy, sz,
  then nx*ny*nz*3 f32 values (per voxel: ux, uy, uz), displacements in mm.
* ``MSK1``: magic ``MSK1``, u32 version=1, u32 nx, ny, nz, f64 sx, sy, sz,
  then nx*ny*nz bytes in {0, 1}.

In memory, arrays are indexed ``[ix, iy, iz]`` (C-contiguous after load).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError

DFLD_MAGIC = b"DFLD"
MASK_MAGIC = b"MSK1"
_HEADER = struct.Struct("<4sIIIIddd")


def _check_geometry(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValidationError(f"dims must be three integers >= 1, got {dims!r}")
    if len(spacing) != 3 or any(not (s > 0 and np.isfinite(s)) for s in spacing):
        raise ValidationError(f"spacing must be three positive reals, got {spacing!r}")


@dataclass(frozen=True)
class VoxelMask:
    """Boolean occupancy grid with physical voxel spacing in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxels: np.ndarray  # bool, shape dims

    def __post_init__(self):
        _check_geometry(self.dims, self.spacing)
        if self.voxels.shape != tuple(self.dims):
            raise ValidationError(
                f"voxel array shape {self.voxels.shape} does not match dims {self.dims}"
            )
        if self.voxels.dtype != np.bool_:
            raise ValidationError("voxels must be a boolean array")

    def count(self) -> int:
        return int(np.count_nonzero(self.voxels))

    def touches_boundary(self) -> bool:
        """True when any occupied voxel lies on a face of the grid."""
        m = self.voxels
        if not m.any():
            return False
        return bool(
            m[0, :, :].any() or m[-1, :, :].any()
            or m[:, 0, :].any() or m[:, -1, :].any()
            or m[:, :, 0].any() or m[:, :, -1].any()
        )


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-component displacement (mm), indexed [ix, iy, iz, c]."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    vectors: np.ndarray  # float64, shape dims + (3,)

    def __post_init__(self):
        _check_geometry(self.dims, self.spacing)
        if self.vectors.shape != tuple(self.dims) + (3,):
            raise ValidationError(
                f"vector array shape {self.vectors.shape} does not match dims {self.dims} + (3,)"
            )
        if not np.isfinite(self.vectors).all():
            raise ValidationError("displacement components must all be finite")


def _read_header(fh, magic, path):
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    got_magic, version, nx, ny, nz, sx, sy, sz = _HEADER.unpack(raw)
    if got_magic != magic:
        raise ParseError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != 1:
        raise ParseError(f"{path}: unsupported version {version}")
    dims = (int(nx), int(ny), int(nz))
    spacing = (float(sx), float(sy), float(sz))
    try:
        _check_geometry(dims, spacing)
    except ValidationError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return dims, spacing


def load_mask(path) -> VoxelMask:
    with open(path, "rb") as fh:
        dims, spacing = _read_header(fh, MASK_MAGIC, path)
        nx, ny, nz = dims
        n = nx * ny * nz
        raw = fh.read(n)
        if len(raw) != n:
            raise ParseError(f"{path}: expected {n} mask bytes, got {len(raw)}")
        flags = np.frombuffer(raw, dtype=np.uint8)
        if not np.isin(flags, (0, 1)).all():
            raise ParseError(f"{path}: mask bytes must be 0 or 1")
    # flat x-fastest -> [ix, iy, iz]
    voxels = np.ascontiguousarray(flags.reshape((nz, ny, nx)).transpose(2, 1, 0).astype(bool))
    return VoxelMask(dims, spacing, voxels)


def save_mask(mask: VoxelMask, path) -> None:
    nx, ny, nz = mask.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MASK_MAGIC, 1, nx, ny, nz, *mask.spacing))
        fh.write(mask.voxels.astype(np.uint8).transpose(2, 1, 0).tobytes())


def load_field(path) -> DisplacementField:
    with open(path, "rb") as fh:
        dims, spacing = _read_header(fh, DFLD_MAGIC, path)
        nx, ny, nz = dims
        n = nx * ny * nz * 3
        raw = fh.read(n * 4)
        if len(raw) != n * 4:
            raise ParseError(f"{path}: expected {n} f32 values, got {len(raw) // 4}")
        flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    # rows are (ux, uy, uz) per voxel in x-fastest order -> [ix, iy, iz, c]
    vectors = np.ascontiguousarray(flat.reshape((nz, ny, nx, 3)).transpose(2, 1, 0, 3))
    if not np.isfinite(vectors).all():
        raise ParseError(f"{path}: non-finite displacement component")
    return DisplacementField(dims, spacing, vectors)


def save_field(field: DisplacementField, path) -> None:
    nx, ny, nz = field.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DFLD_MAGIC, 1, nx, ny, nz, *field.spacing))
        fh.write(field.vectors.transpose(2, 1, 0, 3).astype("<f4").tobytes())
