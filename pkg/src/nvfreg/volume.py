"""3D scalar volumes and the NVF1 binary container.

NVF1 layout (little-endian, 32-byte header):
  bytes 0-3   magic "NVF1"
  byte  4     dtype code (0 = float32, 1 = uint32)
  byte  5     channels (1 for volumes, 3 for vector fields)
  bytes 6-7   reserved, must be zero
  bytes 8-19  dims X, Y, Z as uint32
  bytes 20-31 spacing (mm) as float32 x3
  payload     voxels in x-fastest order (offset = x + X*(y + Y*z)),
              channels interleaved per voxel

Intensity data is held as float64 in memory (files store float32); labels
are uint32 with label 0 reserved for background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptFileError,
    DegenerateInputError,
    FormatError,
    ShapeError,
    ValidationError,
)

MAGIC = b"NVF1"
HEADER_FMT = "<4sBBH3I3f"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 32

DTYPE_FLOAT32 = 0
DTYPE_UINT32 = 1

# guard against absurd headers before allocating
_MAX_VOXELS = 1 << 34


@dataclass
class Volume:
    """A 3D scalar grid with spacing metadata.

    data is indexed [x, y, z]; kind is "intensity" (float64) or
    "label" (uint32). Instances are treated as immutable after
    construction.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise ValidationError(f"volume dims must be positive, got {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be strictly positive, got {self.spacing}")
        if self.kind == "intensity":
            self.data = np.ascontiguousarray(self.data, dtype=np.float64)
            if not np.all(np.isfinite(self.data)):
                raise ValidationError("intensity volume contains NaN or Inf")
        elif self.kind == "label":
            if not np.issubdtype(self.data.dtype, np.integer):
                raise ValidationError("label volume requires integer data")
            self.data = np.ascontiguousarray(self.data, dtype=np.uint32)
        else:
            raise ValidationError(f"unknown volume kind {self.kind!r}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def _pack_header(dtype_code: int, channels: int, dims, spacing) -> bytes:
    return struct.pack(HEADER_FMT, MAGIC, dtype_code, channels, 0, *dims, *spacing)


def read_header(raw: bytes):
    """Parse and validate the 32-byte NVF1 header."""
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for NVF1 header ({len(raw)} bytes)")
    magic, dtype_code, channels, reserved, x, y, z, sx, sy, sz = struct.unpack(
        HEADER_FMT, raw[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if reserved != 0:
        raise FormatError("reserved header bytes must be zero")
    if dtype_code not in (DTYPE_FLOAT32, DTYPE_UINT32):
        raise FormatError(f"unknown dtype code {dtype_code}")
    if channels not in (1, 3):
        raise FormatError(f"channels must be 1 or 3, got {channels}")
    dims = (int(x), int(y), int(z))
    if any(d == 0 for d in dims):
        raise CorruptFileError(f"zero dimension in header: {dims}")
    if dims[0] * dims[1] * dims[2] > _MAX_VOXELS:
        raise CorruptFileError(f"dims product overflow: {dims}")
    return dtype_code, channels, dims, (float(sx), float(sy), float(sz))


def _read_payload(raw: bytes, dims, channels: int, np_dtype) -> np.ndarray:
    n = dims[0] * dims[1] * dims[2] * channels
    expected = HEADER_SIZE + n * 4
    if len(raw) != expected:
        raise CorruptFileError(
            f"payload size mismatch: file has {len(raw)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(raw, dtype=np_dtype, offset=HEADER_SIZE)
    if channels == 1:
        return flat.reshape(dims, order="F")
    # channel-fastest, then x, y, z
    return flat.reshape((channels,) + tuple(dims), order="F").transpose(1, 2, 3, 0)


def load_volume(path) -> Volume:
    """Load a single-channel NVF1 file as a Volume."""
    with open(path, "rb") as f:
        raw = f.read()
    dtype_code, channels, dims, spacing = read_header(raw)
    if channels != 1:
        raise FormatError(f"expected a 1-channel volume, file has {channels} channels")
    if dtype_code == DTYPE_FLOAT32:
        data = _read_payload(raw, dims, 1, np.dtype("<f4"))
        return Volume(data=data.astype(np.float64), spacing=spacing, kind="intensity")
    data = _read_payload(raw, dims, 1, np.dtype("<u4"))
    return Volume(data=data.astype(np.uint32), spacing=spacing, kind="label")


def save_volume(v: Volume, path) -> None:
    """Write a Volume as NVF1. Intensity data is stored as float32."""
    if v.kind == "intensity":
        payload = np.asfortranarray(v.data.astype("<f4"))
        dtype_code = DTYPE_FLOAT32
    else:
        payload = np.asfortranarray(v.data.astype("<u4"))
        dtype_code = DTYPE_UINT32
    header = _pack_header(dtype_code, 1, v.dims, v.spacing)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="F"))


def normalize_intensity(v: Volume) -> Volume:
    """Divide every voxel by the volume maximum so the output peaks at 1."""
    if v.kind != "intensity":
        raise ValidationError("normalize_intensity requires an intensity volume")
    peak = float(v.data.max())
    if peak <= 0.0:
        raise DegenerateInputError("cannot normalize a volume with non-positive maximum")
    return Volume(data=v.data / peak, spacing=v.spacing, kind="intensity")


def import_raw(path, dims, spacing=(1.0, 1.0, 1.0), kind: str = "intensity") -> Volume:
    """Read a headerless little-endian float32/uint32 blob in x-fastest order."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValidationError(f"dims must be three positive integers, got {dims}")
    np_dtype = np.dtype("<f4") if kind == "intensity" else np.dtype("<u4")
    raw = np.fromfile(path, dtype=np_dtype)
    n = dims[0] * dims[1] * dims[2]
    if raw.size != n:
        raise CorruptFileError(
            f"raw file holds {raw.size} values, dims {dims} require {n}"
        )
    data = raw.reshape(dims, order="F")
    if kind == "intensity":
        return Volume(data=data.astype(np.float64), spacing=spacing, kind="intensity")
    return Volume(data=data.astype(np.uint32), spacing=spacing, kind="label")


def check_same_dims(a, b, what: str = "operands") -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{what} have mismatched dims: {a.dims} vs {b.dims}")
