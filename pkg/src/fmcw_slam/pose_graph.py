"""Keyframe pose graph with sparse Levenberg-Marquardt optimization.

Each edge ``a -> b`` measures the pose of ``b`` in the frame of ``a``. Its
residual is ``(dx, dy, dtheta)`` of ``T_ab^-1 (C_a^-1 C_b)`` with the angle
wrapped. Loop edges carry a Huber kernel on their chi-square value.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .se2 import Pose2, rotation, rotation_derivative, wrap_angle

log = logging.getLogger(__name__)

CHI2_3DOF_95 = 5.99
_I3 = np.arange(3)
ODOMETRY_INFORMATION = np.diag([1 / 0.1**2, 1 / 0.1**2, 1 / 0.01**2])


class GaugeError(RuntimeError):
    """A graph component has no fixed node."""


class EdgeKind(enum.Enum):
    ODOMETRY = "ODOMETRY"
    LOOP = "LOOP"


@dataclass
class PoseEdge:
    a: int
    b: int
    measurement: Pose2
    information: np.ndarray
    kind: EdgeKind = EdgeKind.ODOMETRY

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (3, 3) or not np.allclose(info, info.T):
            raise ValueError("information must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise ValueError("information must be positive definite")
        self.information = info


@dataclass
class OptimizationResult:
    initial_cost: float
    final_cost: float
    iterations: int
    costs: list[float] = field(default_factory=list)


def edge_residual(ca: np.ndarray, cb: np.ndarray, meas: Pose2) -> np.ndarray:
    """Residual of one edge at node states ``[x, y, theta]``."""
    d = rotation(ca[2]).T @ (cb[:2] - ca[:2])
    e = rotation(meas.theta).T @ (d - np.array([meas.x, meas.y]))
    return np.array([e[0], e[1], wrap_angle(cb[2] - ca[2] - meas.theta)])


def edge_jacobians(ca: np.ndarray, cb: np.ndarray, meas: Pose2) -> tuple[np.ndarray, np.ndarray]:
    """d residual / d ``ca`` and d residual / d ``cb``."""
    rt = rotation(meas.theta).T
    rat = rotation(ca[2]).T
    dt = cb[:2] - ca[:2]
    ja = np.zeros((3, 3))
    jb = np.zeros((3, 3))
    ja[:2, :2] = -rt @ rat
    jb[:2, :2] = rt @ rat
    ja[:2, 2] = rt @ rotation_derivative(ca[2]).T @ dt
    ja[2, 2] = -1.0
    jb[2, 2] = 1.0
    return ja, jb


def _batch(x: np.ndarray, ia: np.ndarray, ib: np.ndarray, meas: np.ndarray, with_jac: bool = True):
    """Residuals ``(m, 3)`` and Jacobians ``(m, 3, 3)`` for all edges at once."""
    ca, cb = x[ia], x[ib]
    c, s = np.cos(ca[:, 2]), np.sin(ca[:, 2])
    cm, sm = np.cos(meas[:, 2]), np.sin(meas[:, 2])
    dt = cb[:, :2] - ca[:, :2]
    d = np.column_stack([c * dt[:, 0] + s * dt[:, 1], -s * dt[:, 0] + c * dt[:, 1]])
    u = d - meas[:, :2]
    res = np.column_stack([cm * u[:, 0] + sm * u[:, 1], -sm * u[:, 0] + cm * u[:, 1],
                           wrap_angle(cb[:, 2] - ca[:, 2] - meas[:, 2])])
    if not with_jac:
        return res, None, None
    m = len(ia)
    rt = np.zeros((m, 2, 2))
    rt[:, 0, 0], rt[:, 0, 1], rt[:, 1, 0], rt[:, 1, 1] = cm, sm, -sm, cm
    rat = np.zeros((m, 2, 2))
    rat[:, 0, 0], rat[:, 0, 1], rat[:, 1, 0], rat[:, 1, 1] = c, s, -s, c
    drat = np.zeros((m, 2, 2))  # derivative of R_a^T
    drat[:, 0, 0], drat[:, 0, 1], drat[:, 1, 0], drat[:, 1, 1] = -s, c, -c, -s
    prod = rt @ rat
    ja = np.zeros((m, 3, 3))
    jb = np.zeros((m, 3, 3))
    ja[:, :2, :2] = -prod
    jb[:, :2, :2] = prod
    ja[:, :2, 2] = np.einsum("mij,mjk,mk->mi", rt, drat, dt)
    ja[:, 2, 2] = -1.0
    jb[:, 2, 2] = 1.0
    return res, ja, jb


def _robust(chi2: np.ndarray, robust: np.ndarray, k2: float) -> tuple[np.ndarray, np.ndarray]:
    """Huber cost and weight on chi-square values (only where ``robust``)."""
    if not math.isfinite(k2):
        return chi2, np.ones_like(chi2)
    k = math.sqrt(k2)
    root = np.sqrt(chi2)
    outside = robust & (chi2 > k2)
    rho = np.where(outside, 2 * k * root - k2, chi2)
    w = np.where(outside, k / np.maximum(root, 1e-300), 1.0)
    return rho, w


class PoseGraph:
    def __init__(self, loop_kernel: float | None = CHI2_3DOF_95, odometry_information=ODOMETRY_INFORMATION):
        self.nodes: dict[int, Pose2] = {}
        self.edges: list[PoseEdge] = []
        self.fixed: set[int] = set()
        self.loop_kernel = loop_kernel
        self.odometry_information = np.asarray(odometry_information, dtype=float)
        self._keys: set[tuple[int, int, EdgeKind]] = set()

    def add_node(self, kf_id: int, pose: Pose2, fixed: bool | None = None) -> None:
        if kf_id in self.nodes:
            raise ValueError(f"node {kf_id} already exists")
        self.nodes[kf_id] = pose
        if fixed or (fixed is None and not self.fixed):
            self.fixed.add(kf_id)

    def _add_edge(self, edge: PoseEdge) -> bool:
        if edge.a not in self.nodes or edge.b not in self.nodes:
            raise KeyError("both edge endpoints must be nodes")
        key = (min(edge.a, edge.b), max(edge.a, edge.b), edge.kind)
        if key in self._keys:
            return False
        self._keys.add(key)
        self.edges.append(edge)
        return True

    def add_odometry_edge(self, a: int, b: int, measurement: Pose2, information=None) -> bool:
        info = self.odometry_information if information is None else information
        return self._add_edge(PoseEdge(a, b, measurement, info, EdgeKind.ODOMETRY))

    def add_loop_edge(self, candidate, information=None) -> bool:
        """Add a verified loop; the edge goes from the query to the match keyframe.

        Unverified candidates and duplicates are rejected (returns False).
        """
        if not getattr(candidate, "verified", False):
            return False
        base = self.odometry_information if information is None else np.asarray(information, dtype=float)
        info = base * max(candidate.inlier_fraction, 1e-3)
        edge = PoseEdge(candidate.query_id, candidate.match_id, candidate.transform.inverse(), info, EdgeKind.LOOP)
        return self._add_edge(edge)

    @property
    def n_loops(self) -> int:
        return sum(e.kind is EdgeKind.LOOP for e in self.edges)

    # --- optimization ----------------------------------------------------

    def _check_gauge(self, ids: list[int], index: dict[int, int]) -> None:
        n = len(ids)
        if not self.fixed:
            raise GaugeError("no fixed node")
        rows = [index[e.a] for e in self.edges]
        cols = [index[e.b] for e in self.edges]
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        anchored = {labels[index[f]] for f in self.fixed if f in index}
        if set(labels) - anchored:
            raise GaugeError("a graph component has no fixed node")

    def _evaluate(self, x: np.ndarray, index: dict[int, int]):
        res, _, _ = _batch(x, self._ia, self._ib, self._meas, with_jac=False)
        chi2 = np.einsum("mi,mij,mj->m", res, self._infos, res)
        rho, w = _robust(chi2, self._robust_mask, self.loop_kernel or math.inf)
        return res, w, float(np.sum(rho))

    def cost(self, poses: dict[int, Pose2] | None = None) -> float:
        ids, index, x = self._state(poses)
        if not self.edges:
            return 0.0
        self._prepare()
        return self._evaluate(x, index)[2]

    def _state(self, poses=None):
        poses = self.nodes if poses is None else poses
        ids = sorted(self.nodes)
        index = {k: i for i, k in enumerate(ids)}
        x = np.array([poses[k].as_array() for k in ids])
        return ids, index, x

    def _prepare(self):
        ids = sorted(self.nodes)
        index = {k: i for i, k in enumerate(ids)}
        self._ia = np.array([index[e.a] for e in self.edges], dtype=np.int64)
        self._ib = np.array([index[e.b] for e in self.edges], dtype=np.int64)
        self._meas = np.array([e.measurement.as_array() for e in self.edges]).reshape(-1, 3)
        self._infos = np.array([e.information for e in self.edges]).reshape(-1, 3, 3)
        self._robust_mask = np.array([e.kind is EdgeKind.LOOP and self.loop_kernel is not None for e in self.edges])

    def _normal_equations(self, x, res, w, free_col, nf):
        _, ja, jb = _batch(x, self._ia, self._ib, self._meas)
        omega = w[:, None, None] * self._infos
        jac = (ja, jb)
        cols_of = (free_col[self._ia], free_col[self._ib])
        g = np.zeros(3 * nf)
        rows, cols, vals = [], [], []
        for p in range(2):
            sel_p = cols_of[p] >= 0
            gi = np.einsum("mji,mjk,mk->mi", jac[p], omega, res)
            np.add.at(g.reshape(nf, 3), cols_of[p][sel_p], gi[sel_p])
            for q in range(2):
                sel = sel_p & (cols_of[q] >= 0)
                blk = np.einsum("mji,mjk,mkl->mil", jac[p][sel], omega[sel], jac[q][sel])
                r0 = 3 * cols_of[p][sel]
                c0 = 3 * cols_of[q][sel]
                rows.append(np.broadcast_to(r0[:, None, None] + _I3[None, :, None], blk.shape).ravel())
                cols.append(np.broadcast_to(c0[:, None, None] + _I3[None, None, :], blk.shape).ravel())
                vals.append(blk.ravel())
        h = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * nf, 3 * nf)
        )
        return h, g

    @staticmethod
    def _step(x, step, free_col, nf):
        xn = x.copy()
        movable = free_col >= 0
        xn[movable] += step.reshape(nf, 3)[free_col[movable]]
        xn[movable, 2] = wrap_angle(xn[movable, 2])
        return xn

    def optimize(self, max_iterations: int = 100, rel_tol: float = 1e-9) -> OptimizationResult:
        """Minimize the total (robust) chi-square; fixed nodes stay bit-identical.

        ``costs`` holds the Levenberg-Marquardt history. A few undamped
        Gauss-Newton steps follow, accepted while the gradient norm shrinks,
        because near the optimum cost differences drown in rounding long
        before the gradient does.
        """
        ids, index, x = self._state()
        self._check_gauge(ids, index)
        if not self.edges:
            return OptimizationResult(0.0, 0.0, 0, [0.0])
        self._prepare()
        free = [k for k in ids if k not in self.fixed]
        col = {k: i for i, k in enumerate(free)}
        nf = len(free)
        free_col = np.array([col.get(k, -1) for k in ids], dtype=np.int64)
        res, w, cost = self._evaluate(x, index)
        costs = [cost]
        lam = 1e-4
        it = 0
        while it < max_iterations and nf and cost > 0:
            it += 1
            h, g = self._normal_equations(x, res, w, free_col, nf)
            diag = h.diagonal().reshape(nf, 3)
            # rotation-invariant damping: xy entries share their mean
            damp = np.column_stack([diag[:, :2].mean(1), diag[:, :2].mean(1), diag[:, 2]]).ravel() + 1e-9
            accepted = False
            while lam < 1e12:
                step = spsolve((h + sp.diags(lam * damp)).tocsc(), -g)
                if not np.all(np.isfinite(step)):
                    lam *= 10
                    continue
                xn = self._step(x, step, free_col, nf)
                rn, wn, cn = self._evaluate(xn, index)
                if cn <= cost:
                    accepted = True
                    break
                lam *= 10
            if not accepted:
                break
            rel = (cost - cn) / max(cost, 1e-300)
            x, res, w, cost = xn, rn, wn, cn
            costs.append(cost)
            lam = max(lam / 10, 1e-12)
            if rel < rel_tol:
                break
        if nf and cost > 0:
            x, cost = self._polish(x, res, w, cost, index, free_col, nf)
        for k in free:
            self.nodes[k] = Pose2.from_array(x[index[k]])
        return OptimizationResult(costs[0], cost, it, costs)

    def _polish(self, x, res, w, cost, index, free_col, nf, max_steps: int = 5):
        h, g = self._normal_equations(x, res, w, free_col, nf)
        gnorm = np.linalg.norm(g)
        for _ in range(max_steps):
            try:
                step = spsolve(h.tocsc(), -g)
            except RuntimeError:
                break
            if not np.all(np.isfinite(step)):
                break
            xn = self._step(x, step, free_col, nf)
            rn, wn, cn = self._evaluate(xn, index)
            # only steps that stay on the cost plateau and shrink the gradient
            if cn > cost * (1 + 1e-9):
                break
            hn, gn = self._normal_equations(xn, rn, wn, free_col, nf)
            gn_norm = np.linalg.norm(gn)
            if gn_norm >= gnorm:
                break
            x, res, w, cost, h, g, gnorm = xn, rn, wn, cn, hn, gn, gn_norm
            if np.max(np.abs(step)) < 1e-13:
                break
        return x, cost

    # --- text format -----------------------------------------------------

    def dump(self, path) -> None:
        """Write ``id x y theta`` node lines and ``a b dx dy dtheta I11 I12 I13 I22 I23 I33 KIND`` edge lines."""
        iu = np.triu_indices(3)
        with open(path, "w") as fh:
            fh.write("# nodes: id x y theta\n")
            for k in sorted(self.nodes):
                p = self.nodes[k]
                fixed = " FIXED" if k in self.fixed else ""
                fh.write(f"{k} {p.x!r} {p.y!r} {p.theta!r}{fixed}\n")
            fh.write("# edges: from to dx dy dtheta + upper-triangular information, kind\n")
            for e in self.edges:
                m = e.measurement
                info = " ".join(repr(float(v)) for v in e.information[iu])
                fh.write(f"{e.a} {e.b} {m.x!r} {m.y!r} {m.theta!r} {info} {e.kind.value}\n")

    @classmethod
    def load(cls, path, **kwargs) -> PoseGraph:
        g = cls(**kwargs)
        g.fixed = set()
        iu = np.triu_indices(3)
        pending = []
        with open(path) as fh:
            for line in fh:
                tok = line.split()
                if not tok or tok[0].startswith("#"):
                    continue
                if len(tok) in (4, 5):
                    k = int(tok[0])
                    g.nodes[k] = Pose2(float(tok[3]), float(tok[1]), float(tok[2]))
                    if len(tok) == 5 and tok[4] == "FIXED":
                        g.fixed.add(k)
                elif len(tok) in (11, 12):
                    info = np.zeros((3, 3))
                    info[iu] = [float(t) for t in tok[5:11]]
                    info = info + np.triu(info, 1).T
                    kind = EdgeKind(tok[11]) if len(tok) == 12 else EdgeKind.ODOMETRY
                    meas = Pose2(float(tok[4]), float(tok[2]), float(tok[3]))
                    pending.append(PoseEdge(int(tok[0]), int(tok[1]), meas, info, kind))
                else:
                    raise ValueError(f"malformed pose-graph line: {line.strip()!r}")
        if not g.fixed and g.nodes:
            g.fixed.add(min(g.nodes))
        for e in pending:
            g._add_edge(e)
        return g


def update_map(map_, old_poses: dict[int, Pose2], new_poses: dict[int, Pose2]) -> None:
    """Re-anchor every map point rigidly with its creator keyframe."""
    for mp in map_.points.values():
        k = mp.creator
        if k not in old_poses or k not in new_poses:
            continue
        delta = new_poses[k].compose(old_poses[k].inverse())
        mp.position = delta.transform_point(mp.position)
