"""Place recognition and geometric loop verification.

A keyframe's point cloud is summarized by a rotation-invariant global
descriptor: the cloud is centered and rotated into its principal-axis frame,
binned into a polar density matrix, and described by the first left and right
singular vectors of that matrix. Candidates retrieved by descriptor distance
are verified by RANSAC followed by point-to-point ICP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .association import EstimationError, estimate_se2_svd
from .se2 import Pose2

MIN_POINTS = 10


class DescriptorError(ValueError):
    """The cloud is too small to describe."""


@dataclass(frozen=True, eq=False)
class SceneDescriptor:
    vector: np.ndarray
    # frame: canonical coords = rotation(-angle) @ (p - centroid)
    centroid: np.ndarray
    angle: float
    # descriptor of the 180-degree flipped frame when the sign vote tied
    alternate: np.ndarray | None = None

    def distance(self, other: SceneDescriptor) -> float:
        mine = [self.vector] if self.alternate is None else [self.vector, self.alternate]
        theirs = [other.vector] if other.alternate is None else [other.vector, other.alternate]
        return float(min(np.linalg.norm(a - b) for a in mine for b in theirs))


@dataclass
class LoopCandidate:
    query_id: int
    match_id: int
    distance: float
    transform: Pose2 | None = None  # maps query-keyframe coordinates into the match keyframe
    inlier_fraction: float = 0.0
    residual: float = math.inf

    @property
    def verified(self) -> bool:
        return self.transform is not None


def _signature(canon: np.ndarray, rings: int, sectors: int, max_radius: float) -> np.ndarray:
    r = np.hypot(canon[:, 0], canon[:, 1])
    a = np.mod(np.arctan2(canon[:, 1], canon[:, 0]), 2 * math.pi)
    inside = r < max_radius
    ri = np.minimum((r[inside] / max_radius * rings).astype(np.int64), rings - 1)
    si = np.minimum((a[inside] / (2 * math.pi) * sectors).astype(np.int64), sectors - 1)
    m = np.zeros((rings, sectors))
    np.add.at(m, (ri, si), 1.0)
    total = m.sum()
    return m / total if total > 0 else m


def _singular_descriptor(sig: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(sig)
    left, right = u[:, 0], vt[0]
    k = np.argmax(np.abs(left))
    if left[k] < 0:
        left, right = -left, -right
    vec = np.concatenate([left, right])
    return vec / np.linalg.norm(vec)


def describe(points: np.ndarray, rings: int = 8, sectors: int = 16, max_radius: float = 100.0) -> SceneDescriptor:
    """Rotation- and translation-invariant descriptor of a 2-D cloud.

    Raises
    ------
    DescriptorError
        When the cloud has fewer than 10 points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < MIN_POINTS:
        raise DescriptorError(f"need at least {MIN_POINTS} points, got {len(pts)}")
    c = pts.mean(axis=0)
    q = pts - c
    evals, evecs = np.linalg.eigh(q.T @ q)
    axis = evecs[:, 1]
    proj = q @ axis
    vote = int(np.sum(proj > 0)) - int(np.sum(proj < 0))
    if vote < 0:
        axis = -axis
    angle = math.atan2(axis[1], axis[0])
    ca, sa = math.cos(angle), math.sin(angle)
    canon = q @ np.array([[ca, -sa], [sa, ca]])
    vec = _singular_descriptor(_signature(canon, rings, sectors, max_radius))
    alt = None
    if vote == 0:
        alt = _singular_descriptor(_signature(-canon, rings, sectors, max_radius))
    return SceneDescriptor(vec, c, angle, alt)


class DescriptorDatabase:
    """Keyframe descriptors in insertion order (single writer)."""

    def __init__(self):
        self.ids: list[int] = []
        self.descriptors: list[SceneDescriptor] = []

    def __len__(self) -> int:
        return len(self.ids)

    def add(self, kf_id: int, desc: SceneDescriptor) -> None:
        if self.ids and kf_id <= self.ids[-1]:
            raise ValueError("keyframe ids must be added in increasing order")
        self.ids.append(kf_id)
        self.descriptors.append(desc)

    def query(
        self, q: SceneDescriptor, query_id: int | None = None, k: int = 3, max_distance: float = math.inf,
        guard: int = 50,
    ) -> list[LoopCandidate]:
        """The ``k`` nearest descriptors below ``max_distance``, skipping the newest ``guard`` keyframes.

        When ``query_id`` is given, keyframes with id ``>= query_id - guard``
        are excluded; otherwise the last ``guard`` entries are.
        """
        if not self.ids:
            return []
        if query_id is None:
            usable = range(max(len(self.ids) - guard, 0))
            qid = -1
        else:
            usable = [i for i, kid in enumerate(self.ids) if kid < query_id - guard]
            qid = query_id
        found = []
        for i in usable:
            d = q.distance(self.descriptors[i])
            if d < max_distance:
                found.append((d, self.ids[i]))
        found.sort()
        return [LoopCandidate(qid, kid, d) for d, kid in found[:k]]


# --- geometric verification ------------------------------------------------


@dataclass
class ICPResult:
    transform: Pose2
    inlier_fraction: float
    mean_inlier_residual: float
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False
    success: bool = False


def _apply(pose: Pose2, pts: np.ndarray) -> np.ndarray:
    return pose.transform_point(pts) if len(pts) else pts


def _consensus(tree: cKDTree, moved: np.ndarray, tol: float) -> int:
    d, _ = tree.query(moved, distance_upper_bound=tol)
    return int(np.sum(np.isfinite(d)))


def icp(
    query: np.ndarray, model: np.ndarray, init: Pose2, inlier_distance: float = 1.0,
    max_iterations: int = 50, tol: float = 1e-6, tree: cKDTree | None = None,
) -> ICPResult:
    """Point-to-point ICP with nearest-neighbor association.

    The reported residual is the truncated RMS ``sqrt(mean(min(d, tau)^2))``
    over all query points, which cannot increase between iterations.
    """
    tree = tree or cKDTree(model)
    tau = 2.0 * inlier_distance

    def evaluate(p: Pose2):
        d, j = tree.query(_apply(p, query))
        return d, j, float(np.sqrt(np.mean(np.minimum(d, tau) ** 2)))

    pose = init
    d, j, score = evaluate(pose)
    history = [score]
    converged = False
    for _ in range(max_iterations):
        use = d < tau
        if use.sum() < 3:
            break
        try:
            cand = estimate_se2_svd(query[use], model[j[use]])
        except EstimationError:
            break
        cd, cj, cscore = evaluate(cand)
        if cscore > score:
            # re-association made things worse; keep the previous pose
            converged = True
            break
        change = score - cscore
        pose, d, j, score = cand, cd, cj, cscore
        history.append(score)
        if change < tol:
            converged = True
            break
    inl = d < inlier_distance
    frac = float(inl.mean()) if len(d) else 0.0
    mean_res = float(d[inl].mean()) if inl.any() else math.inf
    return ICPResult(pose, frac, mean_res, history, converged)


def _ransac(query, model, tree, init: Pose2, rng, iterations: int, search_radius: float, inlier_distance: float,
            n_score: int = 256):
    moved = _apply(init, query)
    neigh = tree.query_ball_point(moved, search_radius)
    usable = [i for i, n in enumerate(neigh) if n]
    # hypotheses are scored on a fixed random subset of the query cloud
    scored = query if len(query) <= n_score else query[np.sort(rng.choice(len(query), n_score, replace=False))]
    best, best_count = init, _consensus(tree, _apply(init, scored), inlier_distance)
    if len(usable) < 2:
        return best, best_count
    usable_arr = np.asarray(usable)
    for _ in range(iterations):
        a, b = rng.choice(usable_arr, size=2, replace=False)
        if np.linalg.norm(query[a] - query[b]) < 2.0:
            continue
        ma = neigh[a][rng.integers(len(neigh[a]))]
        mb = neigh[b][rng.integers(len(neigh[b]))]
        # rigid pairs preserve length
        if abs(np.linalg.norm(query[a] - query[b]) - np.linalg.norm(model[ma] - model[mb])) > inlier_distance:
            continue
        try:
            hyp = estimate_se2_svd(query[[a, b]], model[[ma, mb]])
        except EstimationError:
            continue
        count = _consensus(tree, _apply(hyp, scored), inlier_distance)
        if count > best_count:
            best, best_count = hyp, count
    return best, best_count


def pca_initial_guesses(dq: SceneDescriptor, dm: SceneDescriptor) -> list[Pose2]:
    """Query-to-match transforms aligning the two canonical frames (both axis signs)."""
    out = []
    for flip in (0.0, math.pi):
        theta = dm.angle - dq.angle + flip
        rot = Pose2(theta, 0.0, 0.0)
        t = dm.centroid - rot.transform_point(dq.centroid)
        out.append(Pose2(theta, t[0], t[1]))
    return out


def verify_icp(
    query: np.ndarray,
    model: np.ndarray,
    init: Pose2 | list[Pose2] = Pose2.identity(),
    inlier_distance: float = 1.0,
    min_inlier_fraction: float = 0.35,
    max_mean_residual: float = 0.5,
    ransac_iterations: int = 200,
    search_radius: float = 5.0,
    seed: int = 0,
) -> ICPResult:
    """RANSAC-seeded ICP; ``success`` when the overlap and residual tests pass.

    ``init`` may be a list of initial guesses; each seeds a RANSAC round and
    the guess with the largest consensus seeds ICP.
    """
    q = np.asarray(query, dtype=float).reshape(-1, 2)
    m = np.asarray(model, dtype=float).reshape(-1, 2)
    if len(q) < MIN_POINTS or len(m) < MIN_POINTS:
        raise DescriptorError("both clouds need at least 10 points")
    tree = cKDTree(m)
    rng = np.random.default_rng(seed)
    inits = [init] if isinstance(init, Pose2) else list(init)
    best, best_count = None, -1
    for guess in inits:
        hyp, count = _ransac(q, m, tree, guess, rng, ransac_iterations, search_radius, inlier_distance)
        if count > best_count:
            best, best_count = hyp, count
    res = icp(q, m, best, inlier_distance, tree=tree)
    res.success = res.inlier_fraction >= min_inlier_fraction and res.mean_inlier_residual < max_mean_residual
    return res
