"""Blob keypoints on Cartesian radar images and motion-gated matching.

Detection is a multi-scale determinant-of-Hessian detector; the descriptor
is a 4x4 grid of 8-bin gradient orientation histograms sampled over a patch
proportional to the detection scale. Descriptors are not rotated to a
dominant orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.spatial.distance import cdist

from .scan import CartesianImage, pixel_to_local

N_CELLS = 4
N_ORIENT = 8
SAMPLES_PER_CELL = 4
DESCRIPTOR_SIZE = N_CELLS * N_CELLS * N_ORIENT

# Default scale ladder: three octaves, two levels per octave.
DEFAULT_SIGMAS = tuple(2.0 ** (k / 2.0) for k in range(7))

_KXX = np.array([[0, 0, 0], [1, -2, 1], [0, 0, 0]], dtype=np.float32)
_KYY = _KXX.T.copy()
_KXY = np.array([[1, 0, -1], [0, 0, 0], [-1, 0, 1]], dtype=np.float32) * 0.25
_KX = np.array([[0, 0, 0], [-0.5, 0, 0.5], [0, 0, 0]], dtype=np.float32)
_KY = _KX.T.copy()


@dataclass(frozen=True)
class Keypoint:
    position: np.ndarray
    pixel: np.ndarray
    scale: float
    response: float


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints and descriptors of one frame, stored column-wise."""

    positions: np.ndarray  # (N, 2) scan-local meters
    pixels: np.ndarray  # (N, 2) (col, row)
    scales: np.ndarray  # (N,) detection sigma in pixels
    responses: np.ndarray  # (N,)
    descriptors: np.ndarray  # (N, DESCRIPTOR_SIZE), unit rows

    def __len__(self) -> int:
        return len(self.positions)

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(self.positions[i], self.pixels[i], float(self.scales[i]), float(self.responses[i]))

    def subset(self, idx) -> FeatureSet:
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(
            self.positions[idx], self.pixels[idx], self.scales[idx], self.responses[idx], self.descriptors[idx]
        )

    @classmethod
    def empty(cls) -> FeatureSet:
        return cls(
            np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0),
            np.zeros((0, DESCRIPTOR_SIZE), dtype=np.float32),
        )


@dataclass(frozen=True, eq=False)
class MatchSet:
    """One-to-one correspondences ``query[qi[m]] <-> train[ti[m]]``."""

    qi: np.ndarray
    ti: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.qi)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(d)) for a, b, d in zip(self.qi, self.ti, self.distance)]

    def subset(self, idx) -> MatchSet:
        idx = np.asarray(idx, dtype=np.int64)
        return MatchSet(self.qi[idx], self.ti[idx], self.distance[idx])

    @classmethod
    def empty(cls) -> MatchSet:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


def _hessian_response(blurred: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    lxx = cv2.filter2D(blurred, -1, _KXX, borderType=cv2.BORDER_REPLICATE)
    lyy = cv2.filter2D(blurred, -1, _KYY, borderType=cv2.BORDER_REPLICATE)
    lxy = cv2.filter2D(blurred, -1, _KXY, borderType=cv2.BORDER_REPLICATE)
    det = cv2.subtract(cv2.multiply(lxx, lyy), cv2.multiply(lxy, lxy))
    return det * np.float32(sigma**4), lxx + lyy


def _newton_refine(image: np.ndarray, pix: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Sub-pixel intensity maximum by Newton steps on a 3x3 quadratic model.

    Keypoints whose local model is not a maximum keep their integer location.
    """
    h, w = image.shape
    c = np.rint(pix[:, 0]).astype(np.int64)
    r = np.rint(pix[:, 1]).astype(np.int64)
    off = np.zeros((len(pix), 2))
    ok = np.zeros(len(pix), dtype=bool)
    active = np.ones(len(pix), dtype=bool)
    for it in range(iterations):
        c = np.clip(c, 1, w - 2)
        r = np.clip(r, 1, h - 2)
        d = lambda dr, dc: image[r + dr, c + dc].astype(np.float64)  # noqa: E731
        gx = 0.5 * (d(0, 1) - d(0, -1))
        gy = 0.5 * (d(1, 0) - d(-1, 0))
        hxx = d(0, 1) - 2 * d(0, 0) + d(0, -1)
        hyy = d(1, 0) - 2 * d(0, 0) + d(-1, 0)
        hxy = 0.25 * (d(1, 1) - d(1, -1) - d(-1, 1) + d(-1, -1))
        det = hxx * hyy - hxy * hxy
        is_max = (det > 0) & (hxx < 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ox = np.where(is_max, -(hyy * gx - hxy * gy) / det, 0.0)
            oy = np.where(is_max, -(hxx * gy - hxy * gx) / det, 0.0)
        settled = is_max & (np.abs(ox) <= 0.5) & (np.abs(oy) <= 0.5)
        upd = active & settled
        off[upd] = np.column_stack([ox[upd], oy[upd]])
        ok[upd] = True
        active &= ~settled & is_max
        if not active.any() or it == iterations - 1:
            break
        c = np.where(active, c + np.clip(np.rint(ox), -1, 1).astype(np.int64), c)
        r = np.where(active, r + np.clip(np.rint(oy), -1, 1).astype(np.int64), r)
    out = pix.copy()
    out[ok] = np.column_stack([c[ok] + off[ok, 0], r[ok] + off[ok, 1]])
    return out


def _describe(gx: np.ndarray, gy: np.ndarray, pix: np.ndarray, sigma: float, patch_scale: float) -> np.ndarray:
    n = N_CELLS * SAMPLES_PER_CELL
    step = patch_scale * sigma / n
    offs = (np.arange(n) - (n - 1) / 2.0) * step
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    h, w = gx.shape
    cols = np.clip(np.rint(pix[:, 0, None] + ox.ravel()[None]), 0, w - 1).astype(np.int64)
    rows = np.clip(np.rint(pix[:, 1, None] + oy.ravel()[None]), 0, h - 1).astype(np.int64)
    dx, dy = gx[rows, cols], gy[rows, cols]
    window = np.exp(-(ox**2 + oy**2).ravel() / (2 * (0.5 * patch_scale * sigma) ** 2))
    mag = np.hypot(dx, dy) * window[None]
    ang = np.mod(np.arctan2(dy, dx), 2 * np.pi) * (N_ORIENT / (2 * np.pi))
    b0 = np.floor(ang).astype(np.int64) % N_ORIENT
    frac = ang - np.floor(ang)
    hist = np.zeros((len(pix), n * n, N_ORIENT))
    k_idx = np.arange(len(pix))[:, None]
    s_idx = np.arange(n * n)[None, :]
    hist[k_idx, s_idx, b0] += mag * (1 - frac)
    hist[k_idx, s_idx, (b0 + 1) % N_ORIENT] += mag * frac
    # (K, sample rows, sample cols, bins) -> (K, cell rows, cell cols, bins)
    hist = hist.reshape(len(pix), N_CELLS, SAMPLES_PER_CELL, N_CELLS, SAMPLES_PER_CELL, N_ORIENT)
    desc = hist.sum(axis=(2, 4)).reshape(len(pix), DESCRIPTOR_SIZE)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)
    np.minimum(desc, 0.2, out=desc)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    return np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)


@dataclass
class _Level:
    sigma: float  # in full-resolution pixels
    factor: int  # pixel size relative to full resolution
    blurred: np.ndarray
    response: np.ndarray
    trace: np.ndarray
    dilated: np.ndarray


def _scale_space(image: np.ndarray, sigmas) -> list[_Level]:
    # Octave pyramid: a level is computed at the coarsest power-of-two
    # resolution where its sigma is still >= 1.4 pixels.
    levels = []
    base, base_sigma, factor = image, 0.0, 1
    kernel = np.ones((3, 3), np.uint8)
    for s in sigmas:
        while s / (2 * factor) >= 1.4 and base_sigma > 0 and base_sigma / (2 * factor) >= 0.99:
            base = np.ascontiguousarray(base[::2, ::2])
            factor *= 2
        local = s / factor
        prior = base_sigma / factor
        extra = np.sqrt(max(local * local - prior * prior, 0.0))
        blurred = cv2.GaussianBlur(base, (0, 0), extra, borderType=cv2.BORDER_REPLICATE) if extra > 1e-3 else base
        resp, trace = _hessian_response(blurred, local)
        levels.append(_Level(s, factor, blurred, resp, trace, cv2.dilate(resp, kernel)))
        base, base_sigma = blurred, s
    return levels


def detect(
    img: CartesianImage,
    max_keypoints: int = 400,
    threshold: float = 1e-3,
    sigmas=DEFAULT_SIGMAS,
    patch_scale: float = 20.0,
    refine_sigma: float = 3.0,
) -> FeatureSet:
    """Detect bright blobs and describe them.

    Keypoints are local maxima of the scale-normalized Hessian determinant
    over space and the scale ladder, restricted to bright blobs (negative
    Laplacian). Locations are refined to sub-pixel accuracy on the image
    smoothed with ``refine_sigma``. Output is sorted by response, strongest
    first, and capped at ``max_keypoints``.
    """
    image = np.ascontiguousarray(img.pixels, dtype=np.float32)
    if not np.any(image):
        return FeatureSet.empty()
    levels = _scale_space(image, sigmas)

    cand = []
    for k, lv in enumerate(levels):
        mask = (lv.response >= lv.dilated) & (lv.response > threshold) & (lv.trace < 0)
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            continue
        v = lv.response[rows, cols]
        keep = np.ones(len(rows), dtype=bool)
        for j, strict in ((k - 1, True), (k + 1, False)):
            if not 0 <= j < len(levels):
                continue
            nb = levels[j]
            ratio = lv.factor / nb.factor
            rr = np.clip(np.rint(rows * ratio).astype(np.int64), 0, nb.dilated.shape[0] - 1)
            cc = np.clip(np.rint(cols * ratio).astype(np.int64), 0, nb.dilated.shape[1] - 1)
            keep &= (v > nb.dilated[rr, cc]) if strict else (v >= nb.dilated[rr, cc])
        rows, cols, v = rows[keep], cols[keep], v[keep]
        cand.append((np.full(len(rows), k), rows * lv.factor, cols * lv.factor, v))
    if not cand:
        return FeatureSet.empty()
    level = np.concatenate([c[0] for c in cand])
    rows = np.concatenate([c[1] for c in cand])
    cols = np.concatenate([c[2] for c in cand])
    response = np.concatenate([c[3] for c in cand]).astype(np.float64)
    # deterministic order: response desc, then row, col, level
    order = np.lexsort((level, cols, rows, -response))[:max_keypoints]
    level, rows, cols, response = level[order], rows[order], cols[order], response[order]

    smooth = cv2.GaussianBlur(image, (0, 0), refine_sigma, borderType=cv2.BORDER_REPLICATE)
    pixels = _newton_refine(smooth, np.column_stack([cols, rows]).astype(float))
    desc = np.zeros((len(order), DESCRIPTOR_SIZE))
    for k in np.unique(level):
        sel = np.flatnonzero(level == k)
        lv = levels[k]
        gx = cv2.filter2D(lv.blurred, -1, _KX, borderType=cv2.BORDER_REPLICATE)
        gy = cv2.filter2D(lv.blurred, -1, _KY, borderType=cv2.BORDER_REPLICATE)
        desc[sel] = _describe(gx, gy, pixels[sel] / lv.factor, lv.sigma / lv.factor, patch_scale)
    valid = np.linalg.norm(desc, axis=1) > 0.5
    scales = np.asarray(sigmas, dtype=float)[level]
    return FeatureSet(
        pixel_to_local(pixels, img)[valid],
        pixels[valid],
        scales[valid],
        response[valid],
        desc[valid].astype(np.float32),
    )


def descriptor_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between descriptors, shape ``(len(a), len(b))``."""
    return cdist(a.astype(np.float64), b.astype(np.float64))


def gate_candidates(query: FeatureSet, train: FeatureSet, radius: float) -> np.ndarray:
    """Boolean ``(Nq, Nt)`` mask of train keypoints within ``radius`` of each query."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    diff = query.positions[:, None, :] - train.positions[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff) <= radius * radius


def match_gated(query: FeatureSet, train: FeatureSet, radius: float, ratio: float = 0.8) -> MatchSet:
    """Nearest-descriptor matching restricted to a metric search radius.

    A query keeps its best in-gate candidate when that candidate passes the
    ratio test against the second-best in-gate candidate (a lone candidate
    passes). Conflicts are then resolved greedily by ascending distance.
    """
    if len(query) == 0 or len(train) == 0:
        gate_candidates(query, train, radius)
        return MatchSet.empty()
    gate = gate_candidates(query, train, radius)
    dist = np.where(gate, descriptor_distances(query.descriptors, train.descriptors), np.inf)
    n_t = dist.shape[1]
    if n_t >= 2:
        two = np.partition(dist, 1, axis=1)[:, :2]
        best_d, second_d = two[:, 0], two[:, 1]
    else:
        best_d, second_d = dist[:, 0], np.full(len(dist), np.inf)
    best = np.argmin(dist, axis=1)
    ok = np.isfinite(best_d) & (best_d < ratio * second_d)
    q = np.flatnonzero(ok)
    t = best[ok]
    d = best_d[ok]
    order = np.lexsort((t, q, d))
    used_q, used_t = set(), set()
    keep = []
    for m in order:
        if q[m] in used_q or t[m] in used_t:
            continue
        used_q.add(q[m])
        used_t.add(t[m])
        keep.append(m)
    keep = np.asarray(sorted(keep, key=lambda m: q[m]), dtype=np.int64)
    return MatchSet(q[keep].astype(np.int64), t[keep].astype(np.int64), d[keep])


def motion_prior_radius(v_max: float = 30.0, dt: float = 0.25, margin: float = 5.0) -> float:
    return v_max * dt + margin
