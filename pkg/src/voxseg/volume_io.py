"""Bit-exact binary volume format, multi-modal container, crop, PGM export.

The SG3D file layout is a 28-byte little-endian header followed by the
raw voxel payload with no padding:

    bytes 0..3    magic "SG3D"
    bytes 4..7    version (uint32)
    bytes 8..11   channels C (uint32)
    bytes 12..23  dims D, H, W (uint32 each)
    bytes 24..27  dtype code (uint32): 1 = float32, 2 = uint8
    bytes 28..    C*D*H*W voxels, C-major then row-major with W fastest

Slice figures are written as binary PGM (P5, maxval 255).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SG3D_MAGIC",
    "DTYPE_FLOAT32",
    "DTYPE_UINT8",
    "VolumeHeader",
    "MultiModalVolume",
    "VolumeFormatError",
    "MODALITY_NAMES",
    "read_volume",
    "write_volume",
    "center_crop",
    "crop_volume",
    "export_slice_pgm",
]

SG3D_MAGIC = b"SG3D"
SG3D_VERSION = 1
DTYPE_FLOAT32 = 1
DTYPE_UINT8 = 2
_HEADER = struct.Struct("<4sIIIIII")

MODALITY_NAMES = ("flair", "t1ce", "t1", "t2")

_DTYPE_BY_CODE = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT8: np.dtype("u1")}
_CODE_BY_KIND = {"f": DTYPE_FLOAT32, "u": DTYPE_UINT8}


class VolumeFormatError(Exception):
    """Malformed or truncated SG3D data."""


@dataclass(frozen=True)
class VolumeHeader:
    version: int
    channels: int
    dims: tuple[int, int, int]
    dtype_code: int

    def __post_init__(self):
        if any(n < 1 for n in self.dims) or self.channels < 1:
            raise VolumeFormatError(f"non-positive dims {self.dims} / channels {self.channels}")
        if self.dtype_code not in _DTYPE_BY_CODE:
            raise VolumeFormatError(f"unknown dtype code {self.dtype_code}")

    @property
    def numpy_dtype(self) -> np.dtype:
        return _DTYPE_BY_CODE[self.dtype_code]

    @property
    def payload_bytes(self) -> int:
        d, h, w = self.dims
        return self.channels * d * h * w * self.numpy_dtype.itemsize


@dataclass
class MultiModalVolume:
    """Four co-registered modality grids plus an optional label grid.

    Modality order is fixed: FLAIR, T1ce, T1, T2. Labels use the codes
    0 background, 1 necrosis, 2 edema, 4 enhancing tumor.
    """

    modalities: np.ndarray  # (4, D, H, W) float32
    labels: np.ndarray | None = None  # (D, H, W) uint8

    def __post_init__(self):
        self.modalities = np.asarray(self.modalities, dtype=np.float32)
        if self.modalities.ndim != 4 or self.modalities.shape[0] != 4:
            raise ValueError(f"modalities must be (4, D, H, W), got {self.modalities.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.modalities.shape[1:]:
                raise ValueError(
                    f"label dims {self.labels.shape} != modality dims {self.modalities.shape[1:]}"
                )
            bad = set(np.unique(self.labels)) - {0, 1, 2, 4}
            if bad:
                raise ValueError(f"unknown label codes {sorted(bad)}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.modalities.shape[1:])

    @property
    def flair(self) -> np.ndarray:
        return self.modalities[0]


def write_volume(path, grids: np.ndarray, version: int = SG3D_VERSION) -> VolumeHeader:
    """Write a (C, D, H, W) array as SG3D; dtype must be float32 or uint8."""
    grids = np.asarray(grids)
    if grids.ndim == 3:
        grids = grids[None]
    if grids.ndim != 4:
        raise VolumeFormatError(f"expected (C, D, H, W) grids, got shape {grids.shape}")
    code = _CODE_BY_KIND.get(grids.dtype.kind)
    if code is None or grids.dtype.itemsize != _DTYPE_BY_CODE[code].itemsize:
        raise VolumeFormatError(f"unsupported dtype {grids.dtype}; use float32 or uint8")
    header = VolumeHeader(version, grids.shape[0], tuple(grids.shape[1:]), code)
    payload = np.ascontiguousarray(grids, dtype=header.numpy_dtype)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SG3D_MAGIC, header.version, header.channels, *header.dims, header.dtype_code))
        f.write(payload.tobytes())
    return header


def read_volume(path) -> tuple[VolumeHeader, np.ndarray]:
    """Read an SG3D file; round-trips write_volume bit-exactly."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"file too short for header: {len(raw)} bytes")
    magic, version, channels, d, h, w, code = _HEADER.unpack_from(raw)
    if magic != SG3D_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}")
    header = VolumeHeader(version, channels, (d, h, w), code)
    payload = raw[_HEADER.size :]
    if len(payload) != header.payload_bytes:
        raise VolumeFormatError(
            f"payload is {len(payload)} bytes, header promises {header.payload_bytes}"
        )
    grids = np.frombuffer(payload, dtype=header.numpy_dtype).reshape(channels, d, h, w)
    return header, grids.copy()


def _crop_slices(src: tuple[int, int, int], target: tuple[int, int, int]) -> tuple[slice, ...]:
    for s, t in zip(src, target):
        if t > s:
            raise ValueError(f"crop target {target} exceeds source {src}")
    return tuple(slice((s - t) // 2, (s - t) // 2 + t) for s, t in zip(src, target))


def center_crop(grid: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    """Center crop of the trailing three axes; start index floor((src-target)/2)."""
    sl = _crop_slices(tuple(grid.shape[-3:]), tuple(target))
    return grid[(...,) + sl]


def crop_volume(volume: MultiModalVolume, target: tuple[int, int, int]) -> MultiModalVolume:
    """Center-crop every modality and the labels with the same window."""
    labels = None if volume.labels is None else center_crop(volume.labels, target)
    return MultiModalVolume(center_crop(volume.modalities, target), labels)


def export_slice_pgm(grid: np.ndarray, axis: str, index: int, value_range: tuple[float, float], path) -> None:
    """Write one slice as 8-bit PGM; lo maps to 0 and hi to 255, clamped."""
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {value_range}")
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected a (D, H, W) grid, got {grid.shape}")
    # W is the slice axis of a (in-plane, in-plane, slices) scan grid
    axis_idx = {"sagittal": 0, "coronal": 1, "axial": 2}.get(axis)
    if axis_idx is None:
        raise ValueError(f"axis {axis!r} not in ('axial', 'coronal', 'sagittal')")
    if not 0 <= index < grid.shape[axis_idx]:
        raise IndexError(f"slice index {index} out of bounds for axis {axis} ({grid.shape[axis_idx]})")
    img = np.take(grid, index, axis=axis_idx).astype(np.float64)
    scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.floor(255.0 * scaled + 0.5).astype(np.uint8)  # round half up
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
