"""Keyframe-relative pose tracking.

Per frame: rasterize, detect, match against the active keyframe inside the
motion-prior radius, keep the maximum clique of pairwise-consistent matches,
align the clique by SVD and refine the world pose against the matched map
points with a robust Levenberg-Marquardt step.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .association import EstimationError, build_graph, estimate_se2_svd, max_clique
from .features import FeatureSet, MatchSet, detect, match_gated, motion_prior_radius
from .mapping import Keyframe, huber_rho, huber_weight
from .scan import PolarScan, polar_to_cartesian_image
from .se2 import Pose2, rotation, rotation_derivative


class Status(enum.Enum):
    OK = "OK"
    LOST = "LOST"


@dataclass
class TrackingConfig:
    raster_width: int = 801
    gamma: float | None = None
    max_keypoints: int = 400
    detect_threshold: float = 1e-3
    patch_scale: float = 20.0
    v_max: float = 30.0
    frame_period: float = 0.25
    gate_margin: float = 5.0
    ratio: float = 0.8
    delta_c: float = 0.5
    displacement_gate: bool = True
    length_gate: bool = True
    clique_exact_limit: int = 600
    clique_node_budget: int = 20_000
    clique_time_budget: float = 0.0  # seconds, 0 disables the wall-clock bound
    min_inliers: int = 5
    kf_min_matches: int = 60
    kf_max_translation: float = 2.0
    kf_max_rotation: float = math.radians(5.0)
    huber: float = 1.0
    refine_iterations: int = 20
    refine_tol: float = 1e-8
    lost_frames: int = 5
    # deterministic heading bias added to every new keyframe (drift injection)
    drift_per_keyframe: float = 0.0

    @property
    def gate_radius(self) -> float:
        return motion_prior_radius(self.v_max, self.frame_period, self.gate_margin)


@dataclass
class TrackState:
    pose: Pose2 = field(default_factory=Pose2.identity)
    keyframe_id: int = -1
    n_matches: int = 0
    status: Status = Status.OK
    velocity: Pose2 = field(default_factory=Pose2.identity)
    lost_count: int = 0


@dataclass
class FrameResult:
    timestamp: float
    pose: Pose2
    keyframe_id: int
    status: Status
    n_matches: int
    new_keyframe: Keyframe | None = None
    matched_points: dict[int, int] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def should_create_keyframe(
    n_inliers: int,
    relative: Pose2,
    min_matches: int = 60,
    max_translation: float = 2.0,
    max_rotation: float = math.radians(5.0),
) -> bool:
    return n_inliers < min_matches or relative.norm() > max_translation or abs(relative.theta) > max_rotation


def refine_pose(
    init: Pose2, local: np.ndarray, world: np.ndarray, huber: float = 1.0,
    max_iterations: int = 20, tol: float = 1e-8,
) -> tuple[Pose2, float, float]:
    """Robust fit of ``world_i ~ C local_i`` starting from ``init``.

    Returns the refined pose with its initial and final Huber cost.
    """

    def cost_of(p: np.ndarray) -> float:
        r = world - (local @ rotation(p[2]).T + p[:2])
        return float(np.sum(huber_rho(np.einsum("ij,ij->i", r, r), huber)))

    x = init.as_array()
    cost0 = cost = cost_of(x)
    lam = 1e-6
    for _ in range(max_iterations):
        r = world - (local @ rotation(x[2]).T + x[:2])
        w = huber_weight(np.einsum("ij,ij->i", r, r), huber)
        dr = local @ rotation_derivative(x[2]).T
        jac = np.zeros((len(local), 2, 3))
        jac[:, 0, 0] = jac[:, 1, 1] = -1.0
        jac[:, :, 2] = -dr
        h = np.einsum("m,mki,mkj->ij", w, jac, jac)
        g = np.einsum("m,mki,mk->i", w, jac, r)
        step = None
        while lam < 1e10:
            try:
                cand = -np.linalg.solve(h + lam * np.diag(np.diag(h) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            new = x + cand
            new_cost = cost_of(new)
            if new_cost <= cost:
                step = cand
                break
            lam *= 10
        if step is None:
            break
        x, cost = new, new_cost
        lam = max(lam * 0.1, 1e-12)
        if np.linalg.norm(step) < tol:
            break
    return Pose2.from_array(x), cost0, cost


class Tracker:
    """Sequential keyframe-relative tracker.

    ``point_lookup(kf, keypoint_indices)`` returns world positions of the map
    points seen by those keyframe keypoints (NaN when the keypoint has no
    point); it lets the tracker read map state without owning the map.
    """

    def __init__(self, config: TrackingConfig | None = None, point_lookup=None, initial_pose: Pose2 | None = None):
        self.config = config or TrackingConfig()
        self.state = TrackState(pose=initial_pose or Pose2.identity())
        self.keyframe: Keyframe | None = None
        self.point_lookup = point_lookup
        self._next_kf = 0
        self._prev_pose: Pose2 | None = None

    def features_of(self, scan: PolarScan) -> FeatureSet:
        cfg = self.config
        img = polar_to_cartesian_image(scan, cfg.raster_width, cfg.gamma)
        return detect(img, cfg.max_keypoints, cfg.detect_threshold, patch_scale=cfg.patch_scale)

    def set_keyframe(self, kf: Keyframe) -> None:
        self.keyframe = kf
        self.state.keyframe_id = kf.id

    def rebase(self, correction_by_kf: dict[int, Pose2]) -> None:
        """Apply a map correction ``C_new = delta * C_old`` to the live state."""
        kf = self.keyframe
        if kf is None or kf.id not in correction_by_kf:
            return
        delta = correction_by_kf[kf.id]
        self.state.pose = delta.compose(self.state.pose)
        if self._prev_pose is not None:
            self._prev_pose = delta.compose(self._prev_pose)

    def _make_keyframe(self, scan, feats, pose) -> Keyframe:
        if self.config.drift_per_keyframe and self._next_kf > 0:
            pose = pose.compose(Pose2(self.config.drift_per_keyframe, 0.0, 0.0))
        kf = Keyframe(self._next_kf, pose, feats, scan.timestamp, scan)
        self._next_kf += 1
        return kf

    def track_frame(self, scan: PolarScan) -> FrameResult:
        cfg = self.config
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        feats = self.features_of(scan)
        timings["features"] = time.perf_counter() - t0
        st = self.state

        if self.keyframe is None:
            kf = self._make_keyframe(scan, feats, st.pose)
            st.pose = kf.pose
            self.set_keyframe(kf)
            st.status, st.n_matches = Status.OK, len(feats)
            self._prev_pose = st.pose
            return FrameResult(scan.timestamp, st.pose, kf.id, st.status, len(feats), kf, {}, timings)

        kf = self.keyframe
        t1 = time.perf_counter()
        matches = match_gated(feats, kf.features, cfg.gate_radius, cfg.ratio)
        timings["match"] = time.perf_counter() - t1
        t1 = time.perf_counter()
        inliers = self._consistent(feats, kf.features, matches)
        timings["clique"] = time.perf_counter() - t1

        if len(inliers) < cfg.min_inliers:
            return self._lost(scan, feats, timings)

        t1 = time.perf_counter()
        qi, ti = matches.qi[inliers], matches.ti[inliers]
        p_t, p_k = feats.positions[qi], kf.features.positions[ti]
        try:
            rel = estimate_se2_svd(p_t, p_k)  # frame t -> keyframe k
        except EstimationError:
            return self._lost(scan, feats, timings)
        init = kf.pose.compose(rel)
        world = kf.pose.transform_point(p_k)
        pids = kf.point_ids[ti]
        if self.point_lookup is not None:
            mp = self.point_lookup(kf, ti)
            have = np.all(np.isfinite(mp), axis=1)
            world[have] = mp[have]
        pose, _, _ = refine_pose(init, p_t, world, cfg.huber, cfg.refine_iterations, cfg.refine_tol)
        timings["pose"] = time.perf_counter() - t1

        prev = self._prev_pose if self._prev_pose is not None else pose
        st.velocity = prev.inverse().compose(pose)
        st.pose, st.n_matches, st.status, st.lost_count = pose, len(inliers), Status.OK, 0
        self._prev_pose = pose
        relative = kf.pose.inverse().compose(pose)
        new_kf = None
        matched: dict[int, int] = {}
        if should_create_keyframe(
            len(inliers), relative, cfg.kf_min_matches, cfg.kf_max_translation, cfg.kf_max_rotation
        ):
            new_kf = self._make_keyframe(scan, feats, pose)
            st.pose = self._prev_pose = new_kf.pose
            matched = {int(q): int(p) for q, p in zip(qi, pids) if p >= 0}
            self.set_keyframe(new_kf)
        return FrameResult(scan.timestamp, st.pose, st.keyframe_id, st.status, len(inliers), new_kf, matched, timings)

    def _consistent(self, feats: FeatureSet, train: FeatureSet, matches: MatchSet) -> np.ndarray:
        cfg = self.config
        if len(matches) < 2:
            return np.arange(len(matches))
        g = build_graph(
            feats.positions[matches.qi], train.positions[matches.ti], cfg.delta_c,
            cfg.displacement_gate, cfg.length_gate,
        )
        clique = max_clique(g, cfg.clique_exact_limit, cfg.clique_time_budget or None, cfg.clique_node_budget)
        return np.asarray(clique, dtype=np.int64)

    def _lost(self, scan, feats, timings) -> FrameResult:
        cfg = self.config
        st = self.state
        st.status, st.n_matches = Status.LOST, 0
        st.lost_count += 1
        st.pose = st.pose.compose(st.velocity)
        self._prev_pose = st.pose
        new_kf = None
        if st.lost_count > cfg.lost_frames and len(feats) >= cfg.min_inliers:
            new_kf = self._make_keyframe(scan, feats, st.pose)
            st.pose = self._prev_pose = new_kf.pose
            self.set_keyframe(new_kf)
            st.lost_count = 0
        return FrameResult(scan.timestamp, st.pose, st.keyframe_id, st.status, 0, new_kf, {}, timings)
