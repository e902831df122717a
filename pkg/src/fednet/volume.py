"""Voxel volume container and the MVOL binary file format.

MVOL layout (little-endian throughout):

    magic   6 bytes  b"MVOL1\\0"
    nx, ny, nz       3x u32
    dtype   u8       1 = signed 16-bit HU, 2 = 32-bit IEEE-754, 3 = unsigned 8-bit labels
    spacing 3x f32   voxel size in millimeters (sx, sy, sz)
    payload          raw voxels, x fastest, then y, then z

In memory, voxels are stored as a C-contiguous array of shape (nz, ny, nx),
so the on-disk payload is exactly ``voxels.tobytes()``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MVOL1\x00"
_HEADER = struct.Struct("<3I B 3f")
_DTYPE_CODES = {1: np.dtype("<i2"), 2: np.dtype("<f4"), 3: np.dtype("u1")}
_CODE_FOR_KIND = {np.dtype(np.int16): 1, np.dtype(np.float32): 2, np.dtype(np.uint8): 3}
_MAX_VOXELS = 2 ** 31


class MVolError(ValueError):
    """Base class for MVOL format errors."""


class BadMagic(MVolError):
    pass


class TruncatedPayload(MVolError):
    pass


class DimOverflow(MVolError):
    pass


@dataclass
class Volume:
    """A voxel grid with physical spacing.

    ``voxels`` has shape (nz, ny, nx): int16 for HU data, float32 for
    normalized or probability data, uint8 for label masks.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume voxels must be 3-d (nz, ny, nx), got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz


# Aliases kept for readability at call sites.
CtVolume = Volume
MaskVolume = Volume


def write_mvol(vol: Volume, path) -> None:
    dt = vol.voxels.dtype
    code = _CODE_FOR_KIND.get(np.dtype(dt))
    if code is None:
        raise MVolError(f"unsupported voxel dtype {dt}; use int16, float32 or uint8")
    nx, ny, nz = vol.dims
    arr = np.ascontiguousarray(vol.voxels, dtype=_DTYPE_CODES[code])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(nx, ny, nz, code, *vol.spacing))
        fh.write(arr.tobytes())


def read_mvol(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC):
        raise TruncatedPayload(f"{path}: file shorter than the magic header")
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    head_end = len(MAGIC) + _HEADER.size
    if len(blob) < head_end:
        raise TruncatedPayload(f"{path}: truncated header")
    nx, ny, nz, code, sx, sy, sz = _HEADER.unpack(blob[len(MAGIC):head_end])
    if nx == 0 or ny == 0 or nz == 0 or nx * ny * nz > _MAX_VOXELS:
        raise DimOverflow(f"{path}: invalid dims {nx}x{ny}x{nz}")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise MVolError(f"{path}: unknown dtype code {code}")
    expected = nx * ny * nz * dtype.itemsize
    payload = blob[head_end:]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise MVolError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    return Volume(voxels.copy(), (sx, sy, sz))
