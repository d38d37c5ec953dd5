"""Volume containers and on-disk formats.

A volume on disk is a pair of files: ``<name>.qvol`` holds the raw
little-endian payload (32-bit floats by default, 8-bit unsigned for label
volumes), ``<name>.qvol.json`` holds the JSON header.  The payload is laid
out channel-major, then z, y, x row-major.  In memory all image data is
64-bit; the 32-bit disk precision is a deliberate size/precision trade.

Also here: trilinear resampling of separately acquired B1 maps onto the
acquisition grid (clamped to the calibrated transmit range) and 8-bit PGM
previews of map slices.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import FormatError, NumericError, ShapeError

__all__ = [
    "B1_MIN",
    "B1_MAX",
    "SignalVolume",
    "ParameterMaps",
    "CONTRAST_CHANNELS",
    "MAP_CHANNELS",
    "read_qvol",
    "write_qvol",
    "resample_b1",
    "export_pgm_preview",
    "atomic_write_bytes",
]

B1_MIN = 0.65
B1_MAX = 1.35

QVOL_MAGIC = "QVOL"
QVOL_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}

CONTRAST_CHANNELS = ("acq1", "acq2", "acq3", "acq4", "acq5")
MAP_CHANNELS = ("t1", "t2", "pd", "ie")
_ALLOWED_CHANNELS = (1, 4, 5, 6)


@dataclass
class SignalVolume:
    """In-memory volume: ``data`` has shape (channels, nz, ny, nx), float64.

    Channel counts: 1 (single map / B1 / labels), 4 (parameter maps),
    5 (contrasts only), 6 (contrasts plus B1).
    """

    data: np.ndarray
    channel_names: tuple[str, ...]
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    disk_dtype: str = "float32"

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ShapeError(f"volume data must be 4-D (C, nz, ny, nx), got {self.data.shape}")
        c = self.data.shape[0]
        if c not in _ALLOWED_CHANNELS:
            raise ShapeError(f"channel count must be one of {_ALLOWED_CHANNELS}, got {c}")
        if len(self.channel_names) != c:
            raise ShapeError("channel_names length does not match channel count")
        if any(s <= 0 for s in self.data.shape[1:]):
            raise ShapeError("spatial dims must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("volume data must be finite")
        if self.disk_dtype not in _DTYPES:
            raise FormatError(f"unsupported disk dtype {self.disk_dtype!r}")
        self.channel_names = tuple(self.channel_names)
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz)"""
        _, nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.data.shape[1:]))

    @property
    def contrasts(self) -> np.ndarray:
        """The five acquisition channels, shape (5, nz, ny, nx)."""
        if self.n_channels < 5:
            raise ShapeError("volume has no contrast channels")
        return self.data[:5]

    @property
    def b1(self) -> np.ndarray:
        if self.n_channels != 6:
            raise ShapeError("volume has no B1 channel")
        return self.data[5]

    def subvolume_z(self, z_indices) -> "SignalVolume":
        z_indices = np.asarray(z_indices, dtype=int)
        return SignalVolume(
            self.data[:, z_indices].copy(),
            self.channel_names,
            self.voxel_size_mm,
            self.disk_dtype,
        )


@dataclass
class ParameterMaps:
    """Quantitative output maps, each of shape (nz, ny, nx)."""

    t1_ms: np.ndarray
    t2_ms: np.ndarray
    pd: np.ndarray
    ie: np.ndarray

    def __post_init__(self) -> None:
        shapes = {np.shape(m) for m in (self.t1_ms, self.t2_ms, self.pd, self.ie)}
        if len(shapes) != 1:
            raise ShapeError(f"map shapes differ: {shapes}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.t1_ms.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.t1_ms, self.t2_ms, self.pd, self.ie])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "ParameterMaps":
        if arr.ndim != 4 or arr.shape[0] != 4:
            raise ShapeError(f"expected (4, nz, ny, nx), got {arr.shape}")
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy(), arr[3].copy())

    def to_volume(self, voxel_size_mm=(1.0, 1.0, 1.0)) -> SignalVolume:
        return SignalVolume(self.stack(), MAP_CHANNELS, voxel_size_mm)

    @classmethod
    def from_volume(cls, vol: SignalVolume) -> "ParameterMaps":
        if vol.n_channels != 4:
            raise ShapeError("parameter-map volume must have 4 channels")
        return cls.from_stack(vol.data)


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header_path(path: str) -> str:
    return path + ".json"


def write_qvol(volume: SignalVolume, path: str) -> None:
    """Write ``<path>`` payload and ``<path>.json`` header."""
    if not path.endswith(".qvol"):
        raise FormatError(f"volume path must end in .qvol: {path}")
    nx, ny, nz = volume.dims
    header = {
        "magic": QVOL_MAGIC,
        "version": QVOL_VERSION,
        "dims": [nx, ny, nz],
        "channels": volume.n_channels,
        "voxel_size_mm": list(volume.voxel_size_mm),
        "channel_names": list(volume.channel_names),
        "endian": "little",
        "dtype": volume.disk_dtype,
    }
    payload = np.ascontiguousarray(volume.data).astype(_DTYPES[volume.disk_dtype]).tobytes()
    atomic_write_bytes(_header_path(path), (json.dumps(header, indent=1) + "\n").encode())
    atomic_write_bytes(path, payload)


def read_qvol(path: str) -> SignalVolume:
    try:
        with open(_header_path(path)) as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read qvol header {_header_path(path)}: {e}") from e
    if header.get("magic") != QVOL_MAGIC:
        raise FormatError(f"bad magic in {path}: {header.get('magic')!r}")
    if header.get("version") != QVOL_VERSION:
        raise FormatError(f"unsupported qvol version {header.get('version')}")
    if header.get("endian") != "little":
        raise FormatError(f"unsupported endian tag {header.get('endian')!r}")
    dtype_name = header.get("dtype", "float32")
    if dtype_name not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype_name!r}")
    nx, ny, nz = header["dims"]
    channels = header["channels"]
    dtype = _DTYPES[dtype_name]
    expected = nx * ny * nz * channels * dtype.itemsize
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) != expected:
        raise FormatError(
            f"payload length mismatch in {path}: expected {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(channels, nz, ny, nx)
    return SignalVolume(
        data.astype(np.float64),
        tuple(header["channel_names"]),
        tuple(header["voxel_size_mm"]),
        disk_dtype=dtype_name,
    )


def resample_b1(b1_volume: np.ndarray, target_dims: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resampling of a B1 map onto (nx, ny, nz), edge-clamped.

    Voxel centers are aligned; affine fields are reproduced exactly at
    interior points.  Output is clamped to the calibrated transmit range.
    """
    b1_volume = np.asarray(b1_volume, dtype=np.float64)
    if b1_volume.ndim != 3:
        raise ShapeError(f"b1 map must be 3-D (nz, ny, nx), got {b1_volume.shape}")
    nx, ny, nz = target_dims
    if min(nx, ny, nz) <= 0:
        raise ShapeError("target dims must be positive")
    src = b1_volume.shape  # (nz, ny, nx)
    coords = []
    for axis, n_out in zip(range(3), (nz, ny, nx)):
        n_in = src[axis]
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords.append(c)
    grid = np.meshgrid(*coords, indexing="ij")
    out = map_coordinates(b1_volume, np.stack(grid), order=1, mode="nearest")
    return np.clip(out, B1_MIN, B1_MAX)


def export_pgm_preview(map_slice: np.ndarray, window: tuple[float, float], path: str) -> None:
    """8-bit binary PGM of a 2-D slice with linear windowing (round half up)."""
    map_slice = np.asarray(map_slice, dtype=np.float64)
    if map_slice.ndim != 2:
        raise ShapeError(f"preview needs a 2-D slice, got shape {map_slice.shape}")
    lo, hi = window
    if not lo < hi:
        raise NumericError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    t = np.clip((map_slice - lo) / (hi - lo), 0.0, 1.0)
    gray = np.floor(t * 255.0 + 0.5).astype(np.uint8)
    h, w = gray.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())
