"""Trajectory accuracy metrics and reports.

``kitti_errors`` averages relative-pose errors over ground-truth segments of
fixed length; ``ate`` is the RMS position error after the best rigid
alignment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .association import estimate_se2_svd
from .se2 import Pose2

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class MetricUndefined(ValueError):
    """No segment of the requested lengths fits in the trajectory."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose2]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).ravel()
        if len(ts) != len(self.poses):
            raise ValueError("one timestamp per pose")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", list(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.poses]).reshape(-1, 2)

    @property
    def arc_length(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def subset(self, idx) -> Trajectory:
        idx = np.asarray(idx, dtype=np.int64)
        return Trajectory(self.timestamps[idx], [self.poses[i] for i in idx])


def associate(estimate: Trajectory, truth: Trajectory, tolerance: float = 0.02) -> tuple[Trajectory, Trajectory]:
    """Pair every estimate pose with the nearest ground-truth timestamp within ``tolerance``."""
    if not len(estimate) or not len(truth):
        return estimate.subset([]), truth.subset([])
    pos = np.clip(np.searchsorted(truth.timestamps, estimate.timestamps), 1, max(len(truth) - 1, 1))
    cand = np.stack([pos - 1, np.minimum(pos, len(truth) - 1)])
    gaps = np.abs(truth.timestamps[cand] - estimate.timestamps)
    nearest = cand[np.argmin(gaps, axis=0), np.arange(len(estimate))]
    ok = np.abs(truth.timestamps[nearest] - estimate.timestamps) <= tolerance
    # keep the association one-to-one and ordered
    _, first = np.unique(nearest[ok], return_index=True)
    e_idx = np.flatnonzero(ok)[first]
    return estimate.subset(e_idx), truth.subset(nearest[e_idx])


def kitti_errors(
    estimate: Trajectory, truth: Trajectory, lengths=KITTI_LENGTHS, scale: float = 1.0, stride: int = 1
) -> tuple[float, float]:
    """Mean segment errors as ``(translation percent, rotation deg/m)``.

    Both trajectories must already be associated pose by pose. Segments
    start at every ``stride``-th pose and end at the first pose whose
    ground-truth arc length reaches ``L * scale``.

    Raises
    ------
    MetricUndefined
        When no segment fits.
    """
    if len(estimate) != len(truth):
        raise ValueError("trajectories must be associated (equal length)")
    dist = truth.arc_length
    t_err, r_err = [], []
    for first in range(0, len(truth), stride):
        for length in lengths:
            seg = length * scale
            last = int(np.searchsorted(dist, dist[first] + seg, side="left"))
            if last >= len(truth):
                continue
            dt = truth.poses[first].between(truth.poses[last])
            de = estimate.poses[first].between(estimate.poses[last])
            err = de.between(dt)
            t_err.append(err.norm() / seg)
            r_err.append(abs(err.theta) / seg)
    if not t_err:
        raise MetricUndefined("trajectory shorter than the shortest segment")
    return 100.0 * float(np.mean(t_err)), math.degrees(float(np.mean(r_err)))


def align(estimate: Trajectory, truth: Trajectory) -> Pose2:
    """Rigid transform carrying estimate positions onto truth positions."""
    return estimate_se2_svd(estimate.positions, truth.positions)


def ate(estimate: Trajectory, truth: Trajectory) -> float:
    """RMS position error after least-squares rigid alignment."""
    if len(estimate) != len(truth):
        raise ValueError("trajectories must be associated (equal length)")
    if len(estimate) == 0:
        return 0.0
    e, t = estimate.positions, truth.positions
    if len(e) == 1:
        return 0.0
    try:
        moved = align(estimate, truth).transform_point(e)
    except ValueError:
        moved = e - e.mean(0) + t.mean(0)
    return float(np.sqrt(np.mean(np.sum((moved - t) ** 2, axis=1))))


def final_pose_error(estimate: Trajectory, truth: Trajectory) -> float:
    """Position error of the last pose, with both trajectories anchored at their first pose."""
    e0, t0 = estimate.poses[0], truth.poses[0]
    e = e0.between(estimate.poses[-1])
    t = t0.between(truth.poses[-1])
    return float(math.hypot(e.x - t.x, e.y - t.y))


# --- file formats ------------------------------------------------------------


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "theta"])
        for ts, p in zip(traj.timestamps, traj.poses):
            w.writerow([repr(float(ts)), repr(p.x), repr(p.y), repr(p.theta)])


def read_trajectory(path) -> Trajectory:
    """Read ``timestamp, x, y, theta`` CSV (a ``frame`` column is accepted as timestamp)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trajectory file")
    header = [h.strip().lower() for h in rows[0]]
    if header[0] not in ("timestamp", "frame") or header[1:4] != ["x", "y", "theta"]:
        raise ValueError(f"{path}: expected header timestamp,x,y,theta")
    ts, poses = [], []
    for row in rows[1:]:
        if not row:
            continue
        ts.append(float(row[0]))
        poses.append(Pose2(float(row[3]), float(row[1]), float(row[2])))
    return Trajectory(np.asarray(ts), poses)


@dataclass
class Report:
    n_poses: int
    ate: float
    translation_pct: float | None
    rotation_deg_per_m: float | None
    final_error: float
    scale: float
    stride: int

    def text(self) -> str:
        lines = [
            f"# segment lengths {', '.join(f'{L * self.scale:g}' for L in KITTI_LENGTHS)} m; segment start stride {self.stride} pose(s)",
            f"poses               {self.n_poses}",
            f"ate_rmse_m          {self.ate:.6f}",
        ]
        if self.translation_pct is None:
            lines.append("translation_pct     undefined (trajectory shorter than shortest segment)")
            lines.append("rotation_deg_per_m  undefined")
        else:
            lines.append(f"translation_pct     {self.translation_pct:.6f}")
            lines.append(f"rotation_deg_per_m  {self.rotation_deg_per_m:.8f}")
        lines.append(f"final_pose_error_m  {self.final_error:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, text_path, csv_path) -> None:
        with open(text_path, "w") as fh:
            fh.write(self.text())
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_poses", "ate_m", "translation_pct", "rotation_deg_per_m", "final_error_m", "scale", "stride"])
            w.writerow([self.n_poses, self.ate, self.translation_pct, self.rotation_deg_per_m, self.final_error,
                        self.scale, self.stride])


def evaluate(estimate: Trajectory, truth: Trajectory, scale: float = 1.0, tolerance: float = 0.02) -> Report:
    est, gt = associate(estimate, truth, tolerance)
    if len(est) == 0:
        raise MetricUndefined("no poses could be associated by timestamp")
    try:
        tr, rot = kitti_errors(est, gt, scale=scale)
    except MetricUndefined:
        tr = rot = None
    return Report(len(est), ate(est, gt), tr, rot, final_pose_error(est, gt), scale, 1)


def plot_svg(path, estimate: Trajectory, truth: Trajectory | None = None, points: np.ndarray | None = None) -> None:
    """Overlay of estimated and true trajectories (and map points) as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    if points is not None and len(points):
        ax.scatter(points[:, 0], points[:, 1], s=1, c="0.7", label="map points")
    if truth is not None and len(truth):
        gt = truth.positions
        ax.plot(gt[:, 0], gt[:, 1], "k--", lw=1, label="ground truth")
    est = estimate.positions
    if len(est):
        ax.plot(est[:, 0], est[:, 1], "r-", lw=1, label="estimate")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="best", fontsize=8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
