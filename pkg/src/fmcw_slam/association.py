"""Outlier rejection by pairwise consistency and rigid alignment.

Two matches are consistent when they can stem from one rigid motion; the
largest mutually consistent set is a maximum clique of the consistency graph.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .se2 import Pose2


class EstimationError(ValueError):
    """Raised when a rigid transform cannot be estimated from the input."""


@dataclass(frozen=True, eq=False)
class ConsistencyGraph:
    adjacency: np.ndarray  # (n, n) symmetric bool, zero diagonal
    delta_c: float

    def __len__(self) -> int:
        return len(self.adjacency)

    def neighbor_masks(self) -> list[int]:
        """Adjacency rows as Python-int bitsets."""
        masks = []
        for row in self.adjacency:
            packed = np.packbits(row[::-1].astype(np.uint8))
            masks.append(int.from_bytes(packed.tobytes(), "big") >> ((-len(row)) % 8))
        return masks


def build_graph(
    pts_t: np.ndarray,
    pts_k: np.ndarray,
    delta_c: float = 0.5,
    displacement_gate: bool = True,
    length_gate: bool = True,
) -> ConsistencyGraph:
    """Consistency graph over matches ``pts_t[i] <-> pts_k[i]`` (scan-local coordinates).

    ``displacement_gate`` compares per-match displacement magnitudes,
    ``| |P_t^i - P_k^i| - |P_t^j - P_k^j| | < delta_c``; ``length_gate``
    compares pairwise lengths, ``| |P_t^i - P_t^j| - |P_k^i - P_k^j| | < delta_c``.
    Enabled gates are combined with AND.
    """
    if delta_c <= 0:
        raise ValueError("delta_c must be positive")
    pts_t = np.asarray(pts_t, dtype=float).reshape(-1, 2)
    pts_k = np.asarray(pts_k, dtype=float).reshape(-1, 2)
    n = len(pts_t)
    adj = np.ones((n, n), dtype=bool)
    if displacement_gate:
        disp = np.linalg.norm(pts_t - pts_k, axis=1)
        adj &= np.abs(disp[:, None] - disp[None, :]) < delta_c
    if length_gate:
        lt = np.linalg.norm(pts_t[:, None] - pts_t[None], axis=2)
        lk = np.linalg.norm(pts_k[:, None] - pts_k[None], axis=2)
        adj &= np.abs(lt - lk) < delta_c
    np.fill_diagonal(adj, False)
    return ConsistencyGraph(adj, float(delta_c))


def _bits(x: int):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


def _lex_smaller(a: list[int], b: list[int] | None) -> bool:
    return b is None or sorted(a) < sorted(b)


def _degeneracy_order(adjacency: np.ndarray) -> tuple[list[int], list[int]]:
    """Vertices in degeneracy (smallest-last) order and their core numbers."""
    n = len(adjacency)
    deg = adjacency.sum(axis=1).astype(np.int64)
    removed = np.zeros(n, dtype=bool)
    big = n + 1
    order, core = [], [0] * n
    k = 0
    for _ in range(n):
        v = int(np.argmin(np.where(removed, big, deg)))
        k = max(k, int(deg[v]))
        core[v] = k
        order.append(v)
        removed[v] = True
        deg -= adjacency[v]
    return order, core


class _Timeout(Exception):
    pass


class _Budget:
    """Search-node budget, optionally also bounded in wall-clock time."""

    def __init__(self, nodes: int | None, deadline: float | None):
        self.left = nodes
        self.deadline = deadline
        self.calls = 0

    def tick(self) -> None:
        self.calls += 1
        if self.left is not None:
            self.left -= 1
            if self.left < 0:
                raise _Timeout
        if self.deadline is not None and self.calls % 64 == 0 and time.perf_counter() > self.deadline:
            raise _Timeout


def _color_sort(p: int, masks: list[int]) -> tuple[list[int], list[int]]:
    """Greedy sequential coloring of ``p``; vertices listed by non-decreasing color."""
    order, colors = [], []
    k = 0
    uncolored = p
    while uncolored:
        k += 1
        q = uncolored
        while q:
            low = q & -q
            v = low.bit_length() - 1
            q &= ~masks[v] & ~low
            uncolored &= ~low
            order.append(v)
            colors.append(k)
    return order, colors


def _clique_number(masks: list[int], budget: _Budget) -> list[int]:
    """Any maximum clique, by branch and bound with coloring bounds."""
    n = len(masks)
    best: list[int] = []
    r: list[int] = []

    def expand(p: int):
        nonlocal best
        budget.tick()
        order, colors = _color_sort(p, masks)
        for i in range(len(order) - 1, -1, -1):
            if len(r) + colors[i] <= len(best):
                return
            v = order[i]
            r.append(v)
            np_ = p & masks[v]
            if np_:
                expand(np_)
            elif len(r) > len(best):
                best = list(r)
            r.pop()
            p &= ~(1 << v)

    try:
        expand((1 << n) - 1)
    except _Timeout:
        raise _Timeout(sorted(best)) from None
    return sorted(best)


def _lex_first_clique(masks: list[int], size: int, budget: _Budget) -> list[int] | None:
    """Lexicographically smallest clique with ``size`` vertices, or None."""
    n = len(masks)

    def bound(p: int) -> int:
        return _color_sort(p, masks)[1][-1] if p else 0

    def search(r: list[int], p: int):
        budget.tick()
        need = size - len(r)
        if need == 0:
            return list(r)
        if p.bit_count() < need or bound(p) < need:
            return None
        while p:
            low = p & -p
            v = low.bit_length() - 1
            p ^= low
            # only later vertices may follow v, keeping r sorted
            res = search(r + [v], p & masks[v])
            if res is not None:
                return res
            if p.bit_count() < need:
                return None
        return None

    return search([], (1 << n) - 1)


def _exact_clique(masks: list[int], adjacency: np.ndarray, budget: _Budget | None = None) -> list[int]:
    """Exact maximum clique with the lexicographic tie-break.

    First the clique number is found by branch and bound over vertices
    relabeled in reverse degeneracy order (tight greedy colorings), then an
    ordered search returns the lexicographically first clique of that size.
    """
    n = len(masks)
    if n == 0:
        return []
    budget = budget or _Budget(None, None)
    order, _ = _degeneracy_order(adjacency)
    order = order[::-1]
    relabeled = ConsistencyGraph(adjacency[np.ix_(order, order)], 0.0).neighbor_masks()
    try:
        any_max = _clique_number(relabeled, budget)
    except _Timeout as partial:
        raise _Timeout([order[i] for i in partial.args[0]]) from None
    omega = max(len(any_max), 1)
    fallback = sorted(order[i] for i in any_max) or [0]
    try:
        lex = _lex_first_clique(masks, omega, budget)
    except _Timeout:
        raise _Timeout(fallback) from None
    return lex if lex is not None else fallback


def _greedy_clique(masks: list[int], seed_best: list[int] | None = None, starts: int = 16) -> list[int]:
    # greedy growth from the highest-degree vertices, then one-swap plateau moves
    n = len(masks)
    best = sorted(seed_best or [])
    deg = [m.bit_count() for m in masks]
    for s in sorted(range(n), key=lambda v: (-deg[v], v))[:starts]:
        if deg[s] + 1 <= len(best):
            break
        clique = [s]
        cand = masks[s]
        while cand:
            v = max(_bits(cand), key=lambda u: ((cand & masks[u]).bit_count(), -u))
            clique.append(v)
            cand &= masks[v]
        clique = _local_refine(masks, clique)
        if len(clique) > len(best) or (len(clique) == len(best) and _lex_smaller(clique, best)):
            best = clique
    return sorted(best) if best else [0]


def _local_refine(masks: list[int], clique: list[int], rounds: int = 5) -> list[int]:
    members = 0
    for v in clique:
        members |= 1 << v
    for _ in range(rounds):
        improved = False
        for v in range(len(masks)):
            if members >> v & 1:
                continue
            missing = members & ~masks[v]
            if missing.bit_count() == 1:
                # swap out the single blocking vertex, then try to grow
                trial = (members & ~missing) | (1 << v)
                common = (1 << len(masks)) - 1
                for u in _bits(trial):
                    common &= masks[u]
                if common:
                    u = min(_bits(common))
                    members = trial | (1 << u)
                    improved = True
        if not improved:
            break
    return sorted(_bits(members))


def max_clique(
    g: ConsistencyGraph, exact_limit: int = 600, time_budget: float | None = None, node_budget: int | None = 20_000
) -> list[int]:
    """Maximum clique of ``g`` as a sorted vertex list.

    Exact (branch and bound with greedy-coloring bounds) when the graph has
    at most ``exact_limit`` vertices and the search stays within
    ``node_budget`` search nodes (and ``time_budget`` seconds, if given);
    otherwise the best clique found so far is improved greedily. Ties
    between maximum cliques go to the lexicographically smallest vertex
    set. The node budget keeps the outcome independent of machine speed.
    """
    n = len(g)
    if n == 0:
        return []
    masks = g.neighbor_masks()
    if n > exact_limit:
        return _greedy_clique(masks)
    deadline = None if time_budget is None else time.perf_counter() + time_budget
    try:
        return _exact_clique(masks, g.adjacency, _Budget(node_budget, deadline))
    except _Timeout as partial:
        return _greedy_clique(masks, partial.args[0] if partial.args else None)


def is_clique(adjacency: np.ndarray, vertices) -> bool:
    v = np.asarray(list(vertices), dtype=np.int64)
    sub = adjacency[np.ix_(v, v)]
    return bool(np.all(sub | np.eye(len(v), dtype=bool)))


def estimate_se2_svd(pts_t, pts_k, weights=None) -> Pose2:
    """Least-squares rigid transform mapping ``pts_t`` onto ``pts_k``.

    Minimizes ``sum w_i |P_k^i - (R P_t^i + t)|^2`` with the reflection
    case excluded. Raises :class:`EstimationError` for fewer than two
    distinct points.
    """
    a = np.asarray(pts_t, dtype=float).reshape(-1, 2)
    b = np.asarray(pts_k, dtype=float).reshape(-1, 2)
    if len(a) != len(b):
        raise ValueError("point sets differ in length")
    w = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=float)
    if len(a) < 2 or w.sum() <= 0:
        raise EstimationError("need at least two point pairs")
    ca = (w[:, None] * a).sum(0) / w.sum()
    cb = (w[:, None] * b).sum(0) / w.sum()
    qa, qb = a - ca, b - cb
    spread = max(np.max(np.linalg.norm(qa, axis=1)), np.max(np.linalg.norm(qb, axis=1)))
    if spread < 1e-12:
        raise EstimationError("points are coincident; rotation unobservable")
    h = (w[:, None] * qa).T @ qb
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T)) or 1.0
    r = v @ np.diag([1.0, d]) @ u.T
    t = cb - r @ ca
    return Pose2(math.atan2(r[1, 0], r[0, 0]), t[0], t[1])
