"""Polar radar scans, Cartesian rasterization and scan file formats.

Axis convention used everywhere in the package: azimuth row 0 points along
+x of the scan-local frame and azimuth grows counter-clockwise. In a
Cartesian raster the column index grows along +x and the row index along +y,
so ``local = gamma * (pixel - center)`` with ``pixel = (col, row)``.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

OXFORD_RANGE_RESOLUTION = 0.0432
OXFORD_ENCODER_SIZE = 5600
# Oxford radar PNG rows: int64 timestamp (8), uint16 encoder (2), valid flag (1)
OXFORD_META_COLUMNS = 11

_BIN_HEADER = struct.Struct("<IIdd")


class ScanFormatError(ValueError):
    """Raised for unreadable or malformed scan files."""


@dataclass(frozen=True, eq=False)
class PolarScan:
    """Azimuth x range power matrix with values in [0, 1]."""

    power: np.ndarray
    range_resolution: float
    timestamp: float = 0.0

    def __post_init__(self):
        power = np.ascontiguousarray(self.power, dtype=np.float32)
        if power.ndim != 2:
            raise ValueError("power must be a 2-D azimuth x range matrix")
        if power.shape[0] < 4 or power.shape[1] < 1:
            raise ValueError(f"need >= 4 azimuths and >= 1 bin, got {power.shape}")
        if not np.all(np.isfinite(power)) or power.min() < 0.0 or power.max() > 1.0:
            raise ValueError("power values must lie in [0, 1]")
        if not self.range_resolution > 0:
            raise ValueError("range_resolution must be positive")
        object.__setattr__(self, "power", power)

    @property
    def n_azimuths(self) -> int:
        return self.power.shape[0]

    @property
    def n_bins(self) -> int:
        return self.power.shape[1]

    @property
    def max_range(self) -> float:
        return (self.n_bins - 1) * self.range_resolution


@dataclass(frozen=True, eq=False)
class CartesianImage:
    pixels: np.ndarray
    gamma: float
    center: float

    @property
    def width(self) -> int:
        return self.pixels.shape[0]


def polar_point_to_cartesian(a: float, r: float, scan: PolarScan) -> np.ndarray:
    """Metric scan-local point of azimuth index ``a`` and range bin ``r``."""
    n = scan.n_azimuths
    if not 0 <= a < n:
        raise IndexError(f"azimuth index {a} outside [0, {n})")
    if r < 0:
        raise ValueError("range must be non-negative")
    rho = r * scan.range_resolution
    theta = 2.0 * math.pi * a / n
    return np.array([rho * math.cos(theta), rho * math.sin(theta)])


def polar_to_cartesian_points(
    rows: np.ndarray, bins: np.ndarray, n_azimuths: int, range_resolution: float
) -> np.ndarray:
    """Vectorized form of :func:`polar_point_to_cartesian`, shape ``(N, 2)``."""
    theta = 2.0 * np.pi * np.asarray(rows, dtype=float) / n_azimuths
    rho = np.asarray(bins, dtype=float) * range_resolution
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta)])


def default_gamma(scan: PolarScan, width: int = 801) -> float:
    """Meters per pixel so that the full range fits inside ``width``."""
    return scan.max_range / ((width - 1) / 2) if scan.n_bins > 1 else scan.range_resolution


@functools.lru_cache(maxsize=8)
def _raster_operator(
    n_azimuths: int, n_bins: int, range_resolution: float, width: int, gamma: float
) -> sp.csr_matrix:
    # Sparse (width^2, n_azimuths * n_bins) bilinear sampling matrix.
    c = (width - 1) / 2
    v, u = np.mgrid[0:width, 0:width]
    x = gamma * (u.ravel() - c)
    y = gamma * (v.ravel() - c)
    r = np.hypot(x, y) / range_resolution
    a = np.mod(np.arctan2(y, x), 2 * np.pi) * (n_azimuths / (2 * np.pi))
    pix = np.flatnonzero(r <= n_bins - 1)
    r, a = r[pix], a[pix]
    a0 = np.floor(a).astype(np.int64)
    fa = a - a0
    a0 %= n_azimuths
    a1 = (a0 + 1) % n_azimuths
    r0 = np.minimum(np.floor(r).astype(np.int64), n_bins - 1)
    fr = r - r0
    r1 = np.minimum(r0 + 1, n_bins - 1)
    rows = np.tile(pix, 4)
    cols = np.concatenate(
        [a0 * n_bins + r0, a0 * n_bins + r1, a1 * n_bins + r0, a1 * n_bins + r1]
    )
    vals = np.concatenate(
        [(1 - fa) * (1 - fr), (1 - fa) * fr, fa * (1 - fr), fa * fr]
    )
    op = sp.csr_matrix((vals, (rows, cols)), shape=(width * width, n_azimuths * n_bins))
    op.sum_duplicates()
    return op


def polar_to_cartesian_image(
    scan: PolarScan, width: int = 801, gamma: float | None = None
) -> CartesianImage:
    """Bilinearly resample a polar scan onto a square Cartesian grid.

    Pixels beyond the last range bin are zero. Azimuth interpolation wraps
    between the last and the first row.
    """
    if width % 2 != 1:
        raise ValueError("width must be odd")
    if gamma is None:
        gamma = default_gamma(scan, width)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    op = _raster_operator(scan.n_azimuths, scan.n_bins, float(scan.range_resolution), width, float(gamma))
    pixels = (op @ scan.power.ravel().astype(np.float64)).reshape(width, width)
    return CartesianImage(pixels.astype(np.float32), float(gamma), (width - 1) / 2)


def pixel_to_local(px, img: CartesianImage) -> np.ndarray:
    """Metric scan-local coordinates of pixel ``(col, row)`` (or an ``(N, 2)`` array)."""
    return img.gamma * (np.asarray(px, dtype=float) - img.center)


def local_to_pixel(q, img: CartesianImage) -> np.ndarray:
    return np.asarray(q, dtype=float) / img.gamma + img.center


# --- file formats -----------------------------------------------------------


def write_binary(scan: PolarScan, path) -> None:
    """Portable format: ``<u32 N_s, u32 N_b, f64 res, f64 t>`` + row-major LE f32."""
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(scan.n_azimuths, scan.n_bins, scan.range_resolution, scan.timestamp))
        fh.write(scan.power.astype("<f4").tobytes())


def read_binary(path) -> PolarScan:
    data = Path(path).read_bytes()
    if len(data) < _BIN_HEADER.size:
        raise ScanFormatError(f"{path}: truncated header")
    n_s, n_b, res, stamp = _BIN_HEADER.unpack_from(data)
    expected = _BIN_HEADER.size + 4 * n_s * n_b
    if len(data) != expected:
        raise ScanFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    power = np.frombuffer(data, dtype="<f4", offset=_BIN_HEADER.size).reshape(n_s, n_b)
    try:
        return PolarScan(power.astype(np.float32), res, stamp)
    except ValueError as err:
        raise ScanFormatError(f"{path}: {err}") from err


def read_oxford_png(path, range_resolution: float = OXFORD_RANGE_RESOLUTION) -> PolarScan:
    """Read an Oxford Radar RobotCar polar PNG.

    The first 11 columns of every row are metadata and are stripped: bytes
    0-7 hold the int64 timestamp in microseconds, 8-9 the uint16 encoder
    angle and 10 the valid flag. Rows are assumed evenly spaced in azimuth.
    """
    from PIL import Image

    try:
        raw = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    except OSError as err:
        raise ScanFormatError(f"{path}: {err}") from err
    if raw.ndim != 2 or raw.shape[1] <= OXFORD_META_COLUMNS:
        raise ScanFormatError(f"{path}: too few columns for Oxford layout")
    stamp_us = np.ascontiguousarray(raw[:, :8]).view("<i8")[0, 0]
    power = raw[:, OXFORD_META_COLUMNS:].astype(np.float32) / 255.0
    return PolarScan(power, range_resolution, float(stamp_us) * 1e-6)


def write_oxford_png(scan: PolarScan, path) -> None:
    from PIL import Image

    n = scan.n_azimuths
    meta = np.zeros((n, OXFORD_META_COLUMNS), dtype=np.uint8)
    stamp = np.full((n, 1), int(round(scan.timestamp * 1e6)), dtype="<i8")
    meta[:, :8] = stamp.view(np.uint8)
    encoder = (np.arange(n) * OXFORD_ENCODER_SIZE // n).astype("<u2").reshape(n, 1)
    meta[:, 8:10] = encoder.view(np.uint8)
    meta[:, 10] = 255
    body = np.round(scan.power * 255.0).astype(np.uint8)
    Image.fromarray(np.hstack([meta, body])).save(path)


SCAN_SUFFIXES = (".bin", ".png")


def load_scan(path, range_resolution: float = OXFORD_RANGE_RESOLUTION) -> PolarScan:
    path = Path(path)
    if path.suffix == ".bin":
        return read_binary(path)
    if path.suffix == ".png":
        return read_oxford_png(path, range_resolution)
    raise ScanFormatError(f"unsupported scan file {path}")


def list_scans(directory) -> list[Path]:
    """Scan files in a directory, sorted by name (binary preferred over PNG)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ScanFormatError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix == ".bin")
    if not files:
        files = sorted(p for p in directory.iterdir() if p.suffix == ".png")
    return files
