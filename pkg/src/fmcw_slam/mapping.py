"""Keyframes, map points and local bundle adjustment.

The local map is refined by Levenberg-Marquardt over keyframe poses and
point positions. A residual is the difference between an observed
scan-local keypoint and the map point expressed in the observing keyframe,
``z_hat - R_k^T (P_w - t_k)``, weighted by ``1 / sigma^2`` and robustified
with a Huber kernel on its metric norm. Point blocks are eliminated with the
Schur complement, so each iteration solves only a small pose system.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .features import FeatureSet, descriptor_distances
from .se2 import Pose2, wrap_angle

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Keyframe:
    id: int
    pose: Pose2
    features: FeatureSet
    timestamp: float = 0.0
    scan: object = None
    point_ids: np.ndarray = None  # map point per keypoint, -1 when none

    def __post_init__(self):
        if self.point_ids is None:
            self.point_ids = np.full(len(self.features), -1, dtype=np.int64)


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    creator: int
    descriptor: np.ndarray
    observations: dict[int, int] = field(default_factory=dict)  # keyframe id -> keypoint index

    @property
    def n_obs(self) -> int:
        return len(self.observations)


class MapAuditError(AssertionError):
    pass


class Map:
    """Keyframes, map points and the covisibility counts between keyframes."""

    def __init__(self):
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self.covisibility: dict[int, Counter] = {}
        self._next_point = 0

    def add_keyframe(self, kf: Keyframe) -> None:
        if kf.id in self.keyframes:
            raise ValueError(f"keyframe {kf.id} already in map")
        if self.keyframes and kf.id <= max(self.keyframes):
            raise ValueError("keyframe ids must be increasing")
        self.keyframes[kf.id] = kf
        self.covisibility[kf.id] = Counter()

    def new_point(self, position, creator: int, descriptor) -> MapPoint:
        mp = MapPoint(self._next_point, np.asarray(position, dtype=float), creator, descriptor)
        self.points[mp.id] = mp
        self._next_point += 1
        return mp

    def add_observation(self, point_id: int, kf_id: int, kp_index: int) -> bool:
        mp = self.points[point_id]
        kf = self.keyframes[kf_id]
        if kf_id in mp.observations or kf.point_ids[kp_index] >= 0:
            return False
        for other in mp.observations:
            self.covisibility[kf_id][other] += 1
            self.covisibility[other][kf_id] += 1
        mp.observations[kf_id] = kp_index
        kf.point_ids[kp_index] = point_id
        return True

    def remove_point(self, point_id: int) -> None:
        mp = self.points.pop(point_id)
        kfs = list(mp.observations)
        for i, a in enumerate(kfs):
            self.keyframes[a].point_ids[mp.observations[a]] = -1
            for b in kfs[i + 1:]:
                for x, y in ((a, b), (b, a)):
                    self.covisibility[x][y] -= 1
                    if self.covisibility[x][y] <= 0:
                        del self.covisibility[x][y]

    def covisible(self, kf_id: int, n: int) -> list[int]:
        """``kf_id`` followed by its ``n - 1`` strongest covisible keyframes."""
        ranked = sorted(self.covisibility[kf_id].items(), key=lambda kv: (-kv[1], -kv[0]))
        return [kf_id] + [k for k, _ in ranked[: max(n - 1, 0)]]

    def observed_points(self, kf_ids) -> list[int]:
        ids = set()
        for k in kf_ids:
            pids = self.keyframes[k].point_ids
            ids.update(int(p) for p in pids[pids >= 0])
        return sorted(ids)

    def audit(self) -> None:
        """Check bidirectional observation links and covisibility symmetry."""
        for pid, mp in self.points.items():
            if not mp.observations:
                raise MapAuditError(f"point {pid} has no observations")
            if not np.all(np.isfinite(mp.position)):
                raise MapAuditError(f"point {pid} has non-finite position")
            for k, idx in mp.observations.items():
                if self.keyframes[k].point_ids[idx] != pid:
                    raise MapAuditError(f"point {pid} -> keyframe {k}[{idx}] not linked back")
        expected = {k: Counter() for k in self.keyframes}
        for kf in self.keyframes.values():
            for idx, pid in enumerate(kf.point_ids):
                if pid < 0:
                    continue
                if pid not in self.points or self.points[pid].observations.get(kf.id) != idx:
                    raise MapAuditError(f"keyframe {kf.id}[{idx}] -> point {pid} not linked back")
        for mp in self.points.values():
            obs = list(mp.observations)
            for a in obs:
                for b in obs:
                    if a != b:
                        expected[a][b] += 1
        for k in self.keyframes:
            if +self.covisibility[k] != +expected[k]:
                raise MapAuditError(f"covisibility of keyframe {k} out of date")

    def poses(self) -> dict[int, Pose2]:
        return {k: kf.pose for k, kf in self.keyframes.items()}


def create_map_points(
    kf: Keyframe,
    map_: Map,
    matched: dict[int, int] | None = None,
    fuse_radius: float = 0.5,
    fuse_max_distance: float = 0.6,
    window: int = 5,
) -> list[MapPoint]:
    """Attach keypoints of a registered keyframe to the map.

    ``matched`` maps keypoint indices to existing map point ids (from
    tracking); those gain an observation. Remaining keypoints fuse with a
    local-map point whose projection lies within ``fuse_radius`` meters and
    whose descriptor is closer than ``fuse_max_distance``; everything else
    spawns a new point at ``pose * keypoint``.
    """
    for idx, pid in sorted((matched or {}).items()):
        if pid in map_.points:
            map_.add_observation(pid, kf.id, idx)

    free = np.flatnonzero(kf.point_ids < 0)
    if len(free) and len(map_.keyframes) > 1:
        local_kfs = [k for k in map_.covisible(kf.id, window) if k != kf.id]
        if not local_kfs:
            prev = [k for k in map_.keyframes if k < kf.id]
            local_kfs = prev[-1:]
        cand = [p for p in map_.observed_points(local_kfs) if kf.id not in map_.points[p].observations]
        if cand:
            world = np.array([map_.points[p].position for p in cand])
            proj = kf.pose.inverse().transform_point(world)
            tree = cKDTree(proj)
            near = tree.query_ball_point(kf.features.positions[free], fuse_radius)
            options = []
            for j, idxs in zip(free, near):
                if not idxs:
                    continue
                d_desc = descriptor_distances(
                    kf.features.descriptors[j : j + 1], np.array([map_.points[cand[i]].descriptor for i in idxs])
                )[0]
                for i, dd in zip(idxs, d_desc):
                    if dd < fuse_max_distance:
                        geo = np.linalg.norm(proj[i] - kf.features.positions[j])
                        options.append((geo, dd, int(j), cand[i]))
            for _, _, j, pid in sorted(options):
                if kf.point_ids[j] < 0 and kf.id not in map_.points[pid].observations:
                    map_.add_observation(pid, kf.id, j)

    created = []
    world = kf.pose.transform_point(kf.features.positions)
    for j in np.flatnonzero(kf.point_ids < 0):
        mp = map_.new_point(world[j], kf.id, kf.features.descriptors[j].copy())
        map_.add_observation(mp.id, kf.id, int(j))
        created.append(mp)
    return created


def cull_map_points(map_: Map, kf_id: int, maturity: int = 2, min_observations: int = 3) -> list[int]:
    """Remove weak points created by ``kf_id`` once it has ``maturity`` successors.

    A point survives only if more than two keyframes observe it.
    """
    if kf_id not in map_.keyframes:
        return []
    newer = sum(1 for k in map_.keyframes if k > kf_id)
    if newer < maturity:
        return []
    doomed = [pid for pid, mp in map_.points.items() if mp.creator == kf_id and mp.n_obs < min_observations]
    for pid in doomed:
        map_.remove_point(pid)
    return doomed


# --- local bundle adjustment ---------------------------------------------


def huber_rho(s: np.ndarray, delta: float) -> np.ndarray:
    """Huber cost of squared norms ``s``; equals ``s`` inside ``delta``."""
    r = np.sqrt(s)
    return np.where(r <= delta, s, 2.0 * delta * r - delta * delta)


def huber_weight(s: np.ndarray, delta: float) -> np.ndarray:
    r = np.sqrt(s)
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


@dataclass
class BAProblem:
    """Flattened local BA problem.

    ``poses`` has one ``[x, y, theta]`` row per keyframe in ``kf_ids``;
    the first ``n_free`` keyframes are optimized, the rest are fixed.
    """

    kf_ids: list[int]
    n_free: int
    poses: np.ndarray
    point_ids: list[int]
    points: np.ndarray
    obs_kf: np.ndarray
    obs_pt: np.ndarray
    obs_z: np.ndarray

    def residuals(self, poses=None, points=None) -> np.ndarray:
        poses = self.poses if poses is None else poses
        points = self.points if points is None else points
        th = poses[self.obs_kf, 2]
        c, s = np.cos(th), np.sin(th)
        d = points[self.obs_pt] - poses[self.obs_kf, :2]
        pred = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])
        return self.obs_z - pred

    def jacobians(self, poses=None, points=None) -> tuple[np.ndarray, np.ndarray]:
        """d residual / d pose ``(M, 2, 3)`` and d residual / d point ``(M, 2, 2)``."""
        poses = self.poses if poses is None else poses
        points = self.points if points is None else points
        th = poses[self.obs_kf, 2]
        c, s = np.cos(th), np.sin(th)
        d = points[self.obs_pt] - poses[self.obs_kf, :2]
        rt = np.empty((len(th), 2, 2))
        rt[:, 0, 0], rt[:, 0, 1], rt[:, 1, 0], rt[:, 1, 1] = c, s, -s, c
        j_pose = np.empty((len(th), 2, 3))
        j_pose[:, :, :2] = rt  # residual = z - R^T (P - t)
        j_pose[:, 0, 2] = -(-s * d[:, 0] + c * d[:, 1])
        j_pose[:, 1, 2] = -(-c * d[:, 0] - s * d[:, 1])
        return j_pose, -rt

    def cost(self, sigma: float, huber: float, poses=None, points=None) -> float:
        r = self.residuals(poses, points)
        return 0.5 * float(np.sum(huber_rho(np.einsum("ij,ij->i", r, r), huber))) / sigma**2


def build_ba_problem(map_: Map, center_kf: int, window: int = 5) -> BAProblem | None:
    in_window = map_.covisible(center_kf, window)
    point_ids = map_.observed_points(in_window)
    if not point_ids:
        return None
    anchor_ids = sorted({k for p in point_ids for k in map_.points[p].observations} - set(in_window))
    fixed_inside = min(in_window)
    free = sorted(k for k in in_window if k != fixed_inside)
    kf_ids = free + [fixed_inside] + anchor_ids
    kf_index = {k: i for i, k in enumerate(kf_ids)}
    pt_index = {p: i for i, p in enumerate(point_ids)}
    obs_kf, obs_pt, obs_z = [], [], []
    for p in point_ids:
        for k, idx in map_.points[p].observations.items():
            obs_kf.append(kf_index[k])
            obs_pt.append(pt_index[p])
            obs_z.append(map_.keyframes[k].features.positions[idx])
    return BAProblem(
        kf_ids,
        len(free),
        np.array([map_.keyframes[k].pose.as_array() for k in kf_ids]),
        point_ids,
        np.array([map_.points[p].position for p in point_ids]),
        np.asarray(obs_kf, dtype=np.int64),
        np.asarray(obs_pt, dtype=np.int64),
        np.asarray(obs_z, dtype=float),
    )


@dataclass
class BAResult:
    initial_cost: float
    final_cost: float
    iterations: int
    costs: list[float]


def solve_ba(
    prob: BAProblem, sigma: float = 0.5, huber: float = 1.0, max_iterations: int = 50, rel_tol: float = 1e-9
) -> BAResult:
    """Levenberg-Marquardt on ``prob`` in place; cost never increases."""
    n_free, n_pts = prob.n_free, len(prob.points)
    w_info = 1.0 / sigma**2
    cost = prob.cost(sigma, huber)
    costs = [cost]
    lam = 1e-4
    it = 0
    free_obs = prob.obs_kf < n_free
    while it < max_iterations and cost > 0:
        it += 1
        r = prob.residuals()
        jc, jp = prob.jacobians()
        wt = w_info * huber_weight(np.einsum("ij,ij->i", r, r), huber)
        # point blocks
        hpp = np.zeros((n_pts, 2, 2))
        np.add.at(hpp, prob.obs_pt, wt[:, None, None] * np.einsum("mki,mkj->mij", jp, jp))
        gp = np.zeros((n_pts, 2))
        np.add.at(gp, prob.obs_pt, wt[:, None] * np.einsum("mki,mk->mi", jp, r))
        # pose blocks (free keyframes only)
        fo = np.flatnonzero(free_obs)
        cam = prob.obs_kf[fo]
        hcc = np.zeros((n_free, 3, 3))
        np.add.at(hcc, cam, wt[fo, None, None] * np.einsum("mki,mkj->mij", jc[fo], jc[fo]))
        gc = np.zeros((n_free, 3))
        np.add.at(gc, cam, wt[fo, None] * np.einsum("mki,mk->mi", jc[fo], r[fo]))
        hcp = np.zeros((n_free, n_pts, 3, 2))
        np.add.at(hcp, (cam, prob.obs_pt[fo]), wt[fo, None, None] * np.einsum("mki,mkj->mij", jc[fo], jp[fo]))

        while True:
            hpp_d = hpp + lam * np.eye(2)[None] * (1.0 + np.einsum("pii->p", hpp)[:, None, None] * 0.5)
            hpp_inv = np.linalg.inv(hpp_d)
            if n_free:
                hcc_d = hcc + lam * np.eye(3)[None] * (1.0 + np.einsum("cii->c", hcc)[:, None, None] / 3)
                s_mat = np.zeros((n_free, 3, n_free, 3))
                idx = np.arange(n_free)
                s_mat[idx, :, idx, :] = hcc_d
                t = np.einsum("cpij,pjk->cpik", hcp, hpp_inv)
                s_mat -= np.einsum("cpik,dplk->cidl", t, hcp)
                rhs = -gc + np.einsum("cpik,pk->ci", t, gp)
                try:
                    dc = np.linalg.solve(s_mat.reshape(3 * n_free, 3 * n_free), rhs.ravel()).reshape(n_free, 3)
                except np.linalg.LinAlgError:
                    dc = np.linalg.lstsq(s_mat.reshape(3 * n_free, 3 * n_free), rhs.ravel(), rcond=None)[0].reshape(n_free, 3)
                dp = np.einsum("pij,pj->pi", hpp_inv, -gp - np.einsum("cpij,ci->pj", hcp, dc))
            else:
                dc = np.zeros((0, 3))
                dp = np.einsum("pij,pj->pi", hpp_inv, -gp)
            new_poses = prob.poses.copy()
            new_poses[:n_free] += dc
            new_poses[:n_free, 2] = wrap_angle(new_poses[:n_free, 2])
            new_points = prob.points + dp
            new_cost = prob.cost(sigma, huber, new_poses, new_points)
            if new_cost <= cost:
                break
            lam *= 10.0
            if lam > 1e12:
                return BAResult(costs[0], cost, it, costs)
        prob.poses, prob.points = new_poses, new_points
        lam = max(lam / 10.0, 1e-9)
        rel = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        costs.append(cost)
        if rel < rel_tol:
            break
    return BAResult(costs[0], cost, it, costs)


def local_bundle_adjust(
    map_: Map, center_kf: int, window: int = 5, sigma: float = 0.5, huber: float = 1.0,
    max_iterations: int = 50, rel_tol: float = 1e-9,
) -> BAResult | None:
    """Refine the covisibility window around ``center_kf`` and its points.

    The oldest in-window keyframe and every out-of-window keyframe that
    observes a window point stay fixed. Returns ``None`` when there is
    nothing to optimize.
    """
    prob = build_ba_problem(map_, center_kf, window)
    if prob is None or prob.n_free == 0:
        return None
    res = solve_ba(prob, sigma, huber, max_iterations, rel_tol)
    for i in range(prob.n_free):
        map_.keyframes[prob.kf_ids[i]].pose = Pose2.from_array(prob.poses[i])
    for p, pos in zip(prob.point_ids, prob.points):
        map_.points[p].position = pos.copy()
    return res
