"""Tracking, local mapping and loop closure wired into one SLAM system.

In threaded mode the three stages run on their own workers connected by
queues; single-thread mode runs the identical stage functions in order, so
its output is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
import queue
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .evaluation import Trajectory, evaluate, plot_svg, read_trajectory, write_trajectory
from .loop_closure import DescriptorDatabase, DescriptorError, LoopCandidate, describe, pca_initial_guesses, verify_icp
from .mapping import Map, create_map_points, cull_map_points, local_bundle_adjust
from .pointcloud import PeakParams, extract
from .pose_graph import PoseGraph
from .pose_graph import update_map as reanchor_points
from .scan import PolarScan, list_scans, load_scan
from .se2 import Pose2
from .tracking import Status, Tracker, TrackingConfig

log = logging.getLogger(__name__)

_STOP = object()


def tracking_config(cfg: PipelineConfig) -> TrackingConfig:
    return TrackingConfig(
        raster_width=cfg.raster_width,
        gamma=cfg.gamma or None,
        max_keypoints=cfg.max_keypoints,
        detect_threshold=cfg.detect_threshold,
        v_max=cfg.v_max,
        frame_period=cfg.frame_period,
        gate_margin=cfg.gate_margin,
        ratio=cfg.ratio,
        delta_c=cfg.delta_c,
        displacement_gate=cfg.displacement_gate,
        length_gate=cfg.length_gate,
        clique_exact_limit=cfg.clique_exact_limit,
        clique_node_budget=cfg.clique_node_budget,
        clique_time_budget=cfg.clique_time_budget,
        min_inliers=cfg.min_inliers,
        kf_min_matches=cfg.kf_min_matches,
        kf_max_translation=cfg.kf_max_translation,
        kf_max_rotation=cfg.kf_max_rotation,
        huber=cfg.track_huber,
        lost_frames=cfg.lost_frames,
        drift_per_keyframe=math.radians(cfg.drift_per_keyframe_deg),
    )


@dataclass
class FrameRecord:
    timestamp: float
    keyframe_id: int
    relative: Pose2  # pose in the frame of its reference keyframe
    status: Status
    n_matches: int


@dataclass
class LoopRecord:
    query_id: int
    match_id: int
    descriptor_distance: float
    inlier_fraction: float
    residual: float
    accepted: bool


@dataclass
class RunResult:
    frames: list[FrameRecord]
    keyframes: dict[int, Pose2]
    keyframe_times: dict[int, float]
    loops: list[LoopRecord]
    timings: dict[str, list[float]] = field(default_factory=dict)
    wall_time: float = 0.0

    def trajectory(self) -> Trajectory:
        """Per-frame poses re-expressed through the final keyframe poses."""
        poses = [self.keyframes[f.keyframe_id].compose(f.relative) for f in self.frames]
        return Trajectory(np.array([f.timestamp for f in self.frames]), poses)

    def keyframe_trajectory(self) -> Trajectory:
        ids = sorted(self.keyframes)
        return Trajectory(np.array([self.keyframe_times[k] for k in ids]), [self.keyframes[k] for k in ids])

    @property
    def accepted_loops(self) -> list[LoopRecord]:
        return [r for r in self.loops if r.accepted]

    def stage_means(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.timings.items() if v}


class SlamSystem:
    """Keyframe-based radar SLAM.

    ``process`` feeds scans; ``finish`` drains the workers and returns the
    run result. With ``odometry_only`` the loop stage is skipped entirely.
    """

    def __init__(self, cfg: PipelineConfig, initial_pose: Pose2 | None = None):
        self.cfg = cfg
        self.map = Map()
        self.lock = threading.RLock()
        self.tracker = Tracker(tracking_config(cfg), self._lookup_points, initial_pose)
        info = np.diag([cfg.odometry_sigma_t**-2, cfg.odometry_sigma_t**-2, cfg.odometry_sigma_theta**-2])
        self.graph = PoseGraph(cfg.loop_kernel_chi2, info)
        self.db = DescriptorDatabase()
        self.clouds: dict[int, np.ndarray] = {}
        self.frames: list[FrameRecord] = []
        self.loops: list[LoopRecord] = []
        self.timings: dict[str, list[float]] = defaultdict(list)
        self._corrections: list[dict[int, Pose2]] = []
        self._peak = PeakParams(cfg.peak_prominence, cfg.peak_distance)
        self._threads: list[threading.Thread] = []
        self._t0 = time.perf_counter()
        self._errors: list[BaseException] = []
        if not cfg.single_thread:
            self._map_q: queue.Queue = queue.Queue()
            self._loop_q: queue.Queue = queue.Queue()
            self._threads = [
                threading.Thread(target=self._worker, args=(self._map_q, self._mapping_step), daemon=True),
                threading.Thread(target=self._worker, args=(self._loop_q, self._loop_step), daemon=True),
            ]
            for t in self._threads:
                t.start()

    # --- shared helpers --------------------------------------------------

    def _lookup_points(self, kf, idx) -> np.ndarray:
        out = np.full((len(idx), 2), np.nan)
        with self.lock:
            pids = kf.point_ids[idx]
            for j, p in enumerate(pids):
                mp = self.map.points.get(int(p)) if p >= 0 else None
                if mp is not None:
                    out[j] = mp.position
        return out

    def _post_correction(self, correction: dict[int, Pose2]) -> None:
        with self.lock:
            self._corrections.append(correction)

    def _apply_corrections(self) -> None:
        with self.lock:
            pending, self._corrections = self._corrections, []
        for corr in pending:
            self.tracker.rebase(corr)

    def _time(self, stage: str, t0: float) -> None:
        self.timings[stage].append(time.perf_counter() - t0)

    def _worker(self, q: queue.Queue, fn) -> None:
        while True:
            item = q.get()
            if item is _STOP:
                break
            try:
                fn(item)
            except BaseException as exc:  # surfaced by finish()
                log.exception("worker failed")
                self._errors.append(exc)

    # --- stages ----------------------------------------------------------

    def process(self, scan: PolarScan) -> FrameRecord:
        t0 = time.perf_counter()
        self._apply_corrections()
        res = self.tracker.track_frame(scan)
        for k, v in res.timings.items():
            self.timings[k].append(v)
        kf_pose = self.tracker.keyframe.pose
        rec = FrameRecord(scan.timestamp, res.keyframe_id, kf_pose.inverse().compose(res.pose), res.status, res.n_matches)
        self.frames.append(rec)
        if res.status is Status.LOST:
            log.warning("frame at t=%.3f lost (%d matches)", scan.timestamp, res.n_matches)
        self._time("tracking", t0)
        if res.new_keyframe is not None:
            job = (res.new_keyframe, res.matched_points)
            if self.cfg.single_thread:
                self._mapping_step(job)
                self._apply_corrections()
            else:
                self._map_q.put(job)
        return rec

    def _mapping_step(self, job) -> None:
        kf, matched = job
        t0 = time.perf_counter()
        with self.lock:
            self.map.add_keyframe(kf)
            create_map_points(kf, self.map, matched, self.cfg.fuse_radius, self.cfg.fuse_max_distance, self.cfg.ba_window)
            before = {k: self.map.keyframes[k].pose for k in self.map.covisible(kf.id, self.cfg.ba_window)}
            local_bundle_adjust(
                self.map, kf.id, self.cfg.ba_window, self.cfg.ba_sigma, self.cfg.ba_huber, self.cfg.ba_max_iterations
            )
            cull_map_points(self.map, kf.id - 2)
            corr = {k: self.map.keyframes[k].pose.compose(p.inverse()) for k, p in before.items()}
            self._corrections.append(corr)
        self._time("mapping", t0)
        if self.cfg.odometry_only:
            kf.scan = None  # raw scans are only needed for loop clouds
            return
        if self.cfg.single_thread:
            self._loop_step(kf.id)
        else:
            self._loop_q.put(kf.id)

    def _loop_step(self, kf_id: int) -> None:
        cfg = self.cfg
        t0 = time.perf_counter()
        with self.lock:
            kf = self.map.keyframes[kf_id]
            pose = kf.pose
            prev = max((k for k in self.graph.nodes if k < kf_id), default=None)
            self.graph.add_node(kf_id, pose)
            if prev is not None:
                self.graph.add_odometry_edge(prev, kf_id, self.map.keyframes[prev].pose.between(pose))
        cloud = extract(kf.scan, self._peak).points
        kf.scan = None
        self.clouds[kf_id] = cloud
        try:
            desc = describe(cloud, cfg.loop_rings, cfg.loop_sectors, cfg.loop_max_radius)
        except DescriptorError:
            self._time("loop_detection", t0)
            return
        candidates = self.db.query(desc, kf_id, cfg.loop_candidates, cfg.loop_max_descriptor_distance, cfg.loop_guard)
        self.db.add(kf_id, desc)
        self._time("loop_detection", t0)
        for cand in candidates:
            t1 = time.perf_counter()
            verified = self._verify(cand, desc)
            self._time("loop_verification", t1)
            if verified:
                self._close_loop(cand)
                break

    def _verify(self, cand: LoopCandidate, desc) -> bool:
        cfg = self.cfg
        with self.lock:
            prior = self.map.keyframes[cand.match_id].pose.between(self.map.keyframes[cand.query_id].pose)
        inits = [prior] + pca_initial_guesses(desc, self.db.descriptors[self.db.ids.index(cand.match_id)])
        res = verify_icp(
            self.clouds[cand.query_id], self.clouds[cand.match_id], inits, cfg.icp_inlier_distance,
            cfg.icp_min_inlier_fraction, cfg.icp_max_mean_residual, cfg.ransac_iterations,
            seed=cfg.seed * 1_000_003 + cand.query_id,
        )
        self.loops.append(LoopRecord(cand.query_id, cand.match_id, cand.distance, res.inlier_fraction,
                                     res.mean_inlier_residual, res.success))
        if res.success:
            cand.transform = res.transform
            cand.inlier_fraction = res.inlier_fraction
            cand.residual = res.mean_inlier_residual
        return res.success

    def _close_loop(self, cand: LoopCandidate) -> None:
        t0 = time.perf_counter()
        with self.lock:
            old = self.map.poses()
            # odometry edges follow the latest locally refined poses
            for e in self.graph.edges:
                if e.kind.value == "ODOMETRY":
                    e.measurement = old[e.a].between(old[e.b])
            for k in self.graph.nodes:
                self.graph.nodes[k] = old[k]
            if not self.graph.add_loop_edge(cand):
                return
            self.graph.optimize(self.cfg.graph_max_iterations)
            new = dict(old)
            new.update(self.graph.nodes)
            reanchor_points(self.map, old, new)
            for k, p in self.graph.nodes.items():
                self.map.keyframes[k].pose = p
            self._corrections.append({k: new[k].compose(old[k].inverse()) for k in self.graph.nodes})
        log.info("loop closed: keyframe %d -> %d", cand.query_id, cand.match_id)
        self._time("pose_graph", t0)

    def finish(self) -> RunResult:
        for q, t in zip((getattr(self, "_map_q", None), getattr(self, "_loop_q", None)), self._threads):
            q.put(_STOP)
            t.join()
        if self._errors:
            raise self._errors[0]
        with self.lock:
            kfs = self.map.poses()
            times = {k: kf.timestamp for k, kf in self.map.keyframes.items()}
        # frames whose keyframe never reached the map (cannot happen once drained)
        return RunResult(list(self.frames), kfs, times, list(self.loops), dict(self.timings),
                         time.perf_counter() - self._t0)


def run(scans, cfg: PipelineConfig, initial_pose: Pose2 | None = None) -> tuple[RunResult, SlamSystem]:
    system = SlamSystem(cfg, initial_pose)
    for scan in scans:
        system.process(scan)
    return system.finish(), system


def iter_dataset(directory):
    for path in list_scans(directory):
        yield load_scan(path)


def write_outputs(out_dir, result: RunResult, system: SlamSystem, truth: Trajectory | None = None, scale: float = 0.1):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = result.trajectory()
    write_trajectory(out / "trajectory.csv", traj)
    write_trajectory(out / "keyframes.csv", result.keyframe_trajectory())
    with open(out / "map_points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "n_obs"])
        for pid in sorted(system.map.points):
            mp = system.map.points[pid]
            w.writerow([pid, repr(float(mp.position[0])), repr(float(mp.position[1])), mp.n_obs])
    with open(out / "loops.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "match", "descriptor_distance", "inlier_fraction", "residual", "accepted"])
        for r in result.loops:
            w.writerow([r.query_id, r.match_id, repr(r.descriptor_distance), repr(r.inlier_fraction),
                        repr(r.residual), int(r.accepted)])
    system.graph.dump(out / "pose_graph.txt")
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "calls", "mean_ms", "total_s"])
        for k in sorted(result.timings):
            v = result.timings[k]
            w.writerow([k, len(v), f"{1000 * np.mean(v):.3f}", f"{np.sum(v):.3f}"])
    pts = np.array([mp.position for mp in system.map.points.values()]).reshape(-1, 2)
    plot_svg(out / "map.svg", traj, truth, pts)
    if truth is not None:
        report = evaluate(traj, truth, scale=scale)
        report.write(out / "metrics.txt", out / "metrics.csv")
        return report
    return None


def load_truth(path) -> Trajectory | None:
    return read_trajectory(path) if path else None
