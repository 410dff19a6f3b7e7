"""Synthetic 360-degree FMCW radar scans with ground truth.

Landmarks are point reflectors rendered as Gaussian blobs in polar space.
Every noise source is composed with ``max`` so a true blob peak is never
shifted by clutter weaker than itself.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .scan import PolarScan, write_binary
from .se2 import Pose2

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True, eq=False)
class World:
    landmarks: np.ndarray
    reflectivity: np.ndarray
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=float).reshape(-1, 2)
        refl = np.asarray(self.reflectivity, dtype=float).ravel()
        if len(lm) != len(refl):
            raise ValueError("one reflectivity per landmark")
        if np.any(refl <= 0) or np.any(refl > 1):
            raise ValueError("reflectivity must lie in (0, 1]")
        if not any(self.contains(p) for p in lm):
            raise ValueError("world needs at least one landmark inside its bounds")
        object.__setattr__(self, "landmarks", lm)
        object.__setattr__(self, "reflectivity", refl)

    def contains(self, p) -> bool:
        xmin, xmax, ymin, ymax = self.bounds
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def __len__(self) -> int:
        return len(self.landmarks)


@dataclass(frozen=True)
class SimConfig:
    n_azimuths: int = 400
    n_bins: int = 1000
    range_resolution: float = 0.0432
    speckle_rate: float = 20.0
    speckle_power: float = 0.1
    speckle_power_std: float = 0.02
    floor_sigma: float = 0.02
    saturation_prob: float = 0.01
    saturation_level: float = 0.6
    multipath_prob: float = 0.05
    multipath_gain: float = 0.5
    beam_width: float = 2.0
    range_sigma: float = 3.0
    frame_period: float = 0.25
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("saturation_prob", "multipath_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1 azimuth row")
        if self.speckle_rate < 0 or self.floor_sigma < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def max_range(self) -> float:
        return (self.n_bins - 1) * self.range_resolution

    def noiseless(self) -> SimConfig:
        return replace(self, speckle_rate=0.0, floor_sigma=0.0, saturation_prob=0.0, multipath_prob=0.0)


def random_world(
    n_landmarks: int,
    bounds=(-80.0, 80.0, -80.0, 80.0),
    seed: int = 0,
    reflectivity=(0.4, 1.0),
    min_separation: float = 1.5,
) -> World:
    """Uniformly scattered reflectors, rejection-sampled to a minimum spacing."""
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = bounds
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < n_landmarks and attempts < 200 * n_landmarks:
        attempts += 1
        p = rng.uniform((xmin, ymin), (xmax, ymax))
        if pts and np.min(np.linalg.norm(np.asarray(pts) - p, axis=1)) < min_separation:
            continue
        pts.append(p)
    if len(pts) < n_landmarks:
        raise ValueError(f"could only place {len(pts)} of {n_landmarks} landmarks at spacing {min_separation}")
    refl = rng.uniform(*reflectivity, size=len(pts))
    return World(np.asarray(pts), refl, tuple(bounds))


def circle_trajectory(radius: float, n_frames: int, laps: float = 1.0, center=(0.0, 0.0)) -> list[Pose2]:
    """Counter-clockwise circular drive with the sensor heading along the tangent."""
    out = []
    for i in range(n_frames):
        phi = 2.0 * math.pi * laps * i / n_frames
        out.append(
            Pose2(
                phi + math.pi / 2,
                center[0] + radius * math.cos(phi),
                center[1] + radius * math.sin(phi),
            )
        )
    return out


def _blob(power, a_c, r_c, amp, sigma_a, sigma_r):
    n_s, n_b = power.shape
    ha = int(math.ceil(4 * sigma_a))
    hr = int(math.ceil(4 * sigma_r))
    r0 = max(0, int(math.floor(r_c)) - hr)
    r1 = min(n_b, int(math.floor(r_c)) + hr + 2)
    if r0 >= r1:
        return
    a_idx = np.arange(int(math.floor(a_c)) - ha, int(math.floor(a_c)) + ha + 2)
    ga = np.exp(-0.5 * ((a_idx - a_c) / sigma_a) ** 2)
    gr = np.exp(-0.5 * ((np.arange(r0, r1) - r_c) / sigma_r) ** 2)
    rows = a_idx % n_s
    patch = amp * np.outer(ga, gr)
    power[rows, r0:r1] = np.maximum(power[rows, r0:r1], patch)


def _speckle(power, rng, cfg: SimConfig) -> None:
    # Poisson false peaks per azimuth row: narrow blobs (0.5 row x 1 bin sigma)
    n_s, n_b = power.shape
    counts = rng.poisson(cfg.speckle_rate, size=n_s)
    rows = np.repeat(np.arange(n_s), counts)
    centers = rng.uniform(0, n_b - 1, size=len(rows))
    amps = np.clip(rng.normal(cfg.speckle_power, cfg.speckle_power_std, size=len(rows)), 0.0, 1.0)
    da = np.arange(-2, 3)
    db = np.arange(-4, 6)
    base = np.floor(centers).astype(np.int64)
    r_idx = (rows[:, None, None] + da[None, :, None]) % n_s
    b_idx = base[:, None, None] + db[None, None, :]
    vals = (
        amps[:, None, None]
        * np.exp(-0.5 * (da[None, :, None] / 0.5) ** 2)
        * np.exp(-0.5 * (b_idx - centers[:, None, None]) ** 2)
    )
    r_idx, b_idx = np.broadcast_arrays(r_idx, b_idx)
    inside = (b_idx >= 0) & (b_idx < n_b)
    np.maximum.at(power, (r_idx[inside], b_idx[inside]), vals[inside])


def render_scan(
    world: World, pose: Pose2, cfg: SimConfig, frame_index: int = 0, timestamp: float | None = None
) -> PolarScan:
    """Render the polar scan seen from ``pose``; deterministic in (seed, frame_index)."""
    rng = np.random.default_rng([cfg.rng_seed, frame_index])
    n_s, n_b = cfg.n_azimuths, cfg.n_bins
    power = np.zeros((n_s, n_b))
    if cfg.floor_sigma > 0:
        power = rng.rayleigh(cfg.floor_sigma, size=(n_s, n_b))

    local = pose.inverse().transform_point(world.landmarks)
    rho = np.hypot(local[:, 0], local[:, 1])
    bearing = np.mod(np.arctan2(local[:, 1], local[:, 0]), 2 * math.pi)
    sigma_a = cfg.beam_width * FWHM_TO_SIGMA
    steps = n_s / (2 * math.pi)
    # draw ghost decisions for every landmark so the stream is layout independent
    ghosts = rng.random(len(world)) < cfg.multipath_prob
    for i in np.flatnonzero((rho <= cfg.max_range) & (rho > 0)):
        a_c = bearing[i] * steps
        r_c = rho[i] / cfg.range_resolution
        _blob(power, a_c, r_c, world.reflectivity[i], sigma_a, cfg.range_sigma)
        if ghosts[i] and 2 * r_c <= n_b - 1:
            _blob(power, a_c, 2 * r_c, cfg.multipath_gain * world.reflectivity[i], sigma_a, cfg.range_sigma)

    if cfg.speckle_rate > 0:
        _speckle(power, rng, cfg)

    if cfg.saturation_prob > 0:
        sat = np.flatnonzero(rng.random(n_s) < cfg.saturation_prob)
        power[sat] = np.maximum(power[sat], cfg.saturation_level)

    np.clip(power, 0.0, 1.0, out=power)
    stamp = frame_index * cfg.frame_period if timestamp is None else timestamp
    return PolarScan(power.astype(np.float32), cfg.range_resolution, stamp)


def render_sequence(world: World, trajectory, cfg: SimConfig) -> list[PolarScan]:
    return [render_scan(world, pose, cfg, i) for i, pose in enumerate(trajectory)]


def write_trajectory_csv(path, poses, timestamps) -> None:
    """Ground-truth CSV with columns ``timestamp, x, y, theta``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "theta"])
        for t, p in zip(timestamps, poses):
            w.writerow([repr(float(t)), repr(p.x), repr(p.y), repr(p.theta)])


def write_dataset(directory, world: World, trajectory, cfg: SimConfig, world_meta: dict | None = None) -> Path:
    """Render and store a sequence: ``scan_NNNNNN.bin``, ``groundtruth.csv``, ``metadata.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(trajectory):
        write_binary(render_scan(world, pose, cfg, i), directory / f"scan_{i:06d}.bin")
    write_trajectory_csv(directory / "groundtruth.csv", trajectory, [i * cfg.frame_period for i in range(len(trajectory))])
    meta = {
        "n_frames": len(trajectory),
        "n_landmarks": len(world),
        "bounds": list(world.bounds),
        "sim": asdict(cfg),
    }
    meta.update(world_meta or {})
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    np.savetxt(directory / "landmarks.csv", np.column_stack([world.landmarks, world.reflectivity]),
               delimiter=",", header="x,y,reflectivity", comments="")
    return directory
