"""Point clouds from polar scans by per-azimuth peak statistics.

Each azimuth row yields prominent local maxima; a peak survives when its
power is at least one standard deviation above the mean peak power of its
row, which keeps strong reflectors and drops speckle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .scan import PolarScan, polar_to_cartesian_points


@dataclass(frozen=True)
class PeakParams:
    delta_p: float = 0.05  # minimum prominence, normalized power
    delta_d: int = 10  # minimum peak spacing, range bins

    def __post_init__(self):
        if not self.delta_p > 0:
            raise ValueError("delta_p must be positive")
        if self.delta_d < 1:
            raise ValueError("delta_d must be >= 1")


@dataclass(frozen=True, eq=False)
class RadarPointCloud:
    points: np.ndarray  # (n, 2) scan-local meters
    rows: np.ndarray
    bins: np.ndarray
    scan_id: int | float | None = None

    def __len__(self) -> int:
        return len(self.points)


def _suppress_close(rows: np.ndarray, idx: np.ndarray, power: np.ndarray, delta_d: int, n_bins: int) -> np.ndarray:
    """Per row, keep peaks highest first (ties to the lower bin) and drop any within ``delta_d`` bins of a kept one."""
    # strict priority by rank so equal powers cannot reorder
    order = np.lexsort((idx, -power))
    priority = np.empty(len(idx))
    priority[order] = np.arange(len(idx), 0, -1)
    stride = n_bins + delta_d
    spikes = np.zeros(int(rows.max() + 1) * stride + 2)
    pos = rows * stride + idx + 1
    spikes[pos] = priority
    kept, _ = signal.find_peaks(spikes, distance=delta_d)
    return np.flatnonzero(np.isin(pos, kept))


def _scan_peaks(power: np.ndarray, params: PeakParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Peaks of every row at once, as ``(rows, bins, power)`` in row-major order."""
    power = np.asarray(power, dtype=float)
    n_rows, n_bins = power.shape
    # rows joined by zero separators; valleys never need to look past a zero
    flat = np.zeros((n_rows, n_bins + 1))
    flat[:, 1:] = power
    flat = np.append(flat.ravel(), 0.0)
    idx, _ = signal.find_peaks(flat, prominence=params.delta_p)
    rows, bins = np.divmod(idx, n_bins + 1)
    bins = bins - 1
    flatrow = np.ptp(power, axis=1) == 0
    sel = ~flatrow[rows]
    rows, bins = rows[sel], bins[sel]
    pw = power[rows, bins]
    if params.delta_d > 1 and len(rows):
        sel = _suppress_close(rows, bins, pw, params.delta_d, n_bins)
        rows, bins, pw = rows[sel], bins[sel], pw[sel]
    return rows, bins, pw


def find_peaks(row, params: PeakParams = PeakParams()) -> list[tuple[int, float]]:
    """Prominent local maxima of one range profile as ``(bin, power)`` pairs.

    Prominence is measured against the higher of the two valley minima that
    enclose a peak, with the row padded by zero at both ends. Among peaks
    closer than ``delta_d`` bins only the highest survives.
    """
    row = np.asarray(row, dtype=float).ravel()
    if row.size == 0:
        raise ValueError("row must be non-empty")
    _, bins, pw = _scan_peaks(row[None, :], params)
    return [(int(b), float(p)) for b, p in zip(bins, pw)]


def extract(scan: PolarScan, params: PeakParams = PeakParams()) -> RadarPointCloud:
    """Keep per-row peaks with power >= mean + std of that row's peaks.

    Rows with one peak are tested against the mean + std over all peaks of
    the scan. Population standard deviation throughout.
    """
    rows, bins, pw = _scan_peaks(scan.power, params)
    global_thr = float(pw.mean() + pw.std()) if pw.size else np.inf
    counts = np.bincount(rows, minlength=scan.n_azimuths)
    sums = np.bincount(rows, weights=pw, minlength=scan.n_azimuths)
    mean = sums / np.maximum(counts, 1)
    var = np.bincount(rows, weights=(pw - mean[rows]) ** 2, minlength=scan.n_azimuths) / np.maximum(counts, 1)
    thr = np.where(counts == 1, global_thr, mean + np.sqrt(var))
    keep = pw >= thr[rows]
    rows, bins = rows[keep], bins[keep]
    rows_a = rows.astype(np.int64)
    bins_a = bins.astype(np.int64)
    pts = polar_to_cartesian_points(rows_a, bins_a, scan.n_azimuths, scan.range_resolution)
    return RadarPointCloud(pts.reshape(-1, 2), rows_a, bins_a, scan.timestamp)


def write_cloud_csv(cloud: RadarPointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in cloud.points:
            w.writerow([repr(float(x)), repr(float(y))])
