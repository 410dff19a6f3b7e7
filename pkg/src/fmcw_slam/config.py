"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    dataset: str = ""
    groundtruth: str = ""
    output: str = "out"
    # raster and detector
    raster_width: int = 801
    gamma: float = 0.0  # 0 selects max_range / half-width
    max_keypoints: int = 400
    detect_threshold: float = 1e-3
    # matching and consistency
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
    # tracking
    min_inliers: int = 5
    kf_min_matches: int = 60
    kf_max_translation: float = 2.0
    kf_max_rotation_deg: float = 5.0
    track_huber: float = 1.0
    lost_frames: int = 5
    drift_per_keyframe_deg: float = 0.0
    # local mapping
    ba_window: int = 5
    ba_sigma: float = 0.5
    ba_huber: float = 1.0
    ba_max_iterations: int = 50
    fuse_radius: float = 0.5
    fuse_max_distance: float = 0.6
    # point cloud
    peak_prominence: float = 0.05
    peak_distance: int = 10
    # loop closure
    loop_rings: int = 8
    loop_sectors: int = 16
    loop_max_radius: float = 100.0
    loop_candidates: int = 3
    loop_max_descriptor_distance: float = 0.1
    loop_guard: int = 50
    icp_inlier_distance: float = 1.0
    icp_min_inlier_fraction: float = 0.35
    icp_max_mean_residual: float = 0.5
    ransac_iterations: int = 200
    # pose graph
    odometry_sigma_t: float = 0.1
    odometry_sigma_theta: float = 0.01
    loop_kernel_chi2: float = 5.99
    graph_max_iterations: int = 100
    # modes
    odometry_only: bool = False
    single_thread: bool = False
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.raster_width >= 3 and self.raster_width % 2 == 1, "raster_width must be odd and >= 3"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (self.max_keypoints > 0, "max_keypoints must be positive"),
            (self.v_max > 0 and self.frame_period > 0, "v_max and frame_period must be positive"),
            (0 < self.ratio <= 1, "ratio must lie in (0, 1]"),
            (self.delta_c > 0, "delta_c must be positive"),
            (self.clique_node_budget > 0 and self.clique_time_budget >= 0, "clique budgets must be positive"),
            (self.min_inliers >= 2, "min_inliers must be >= 2"),
            (self.kf_min_matches >= 0, "kf_min_matches must be >= 0"),
            (self.kf_max_translation > 0 and self.kf_max_rotation_deg > 0, "keyframe thresholds must be positive"),
            (self.ba_window >= 1, "ba_window must be >= 1"),
            (self.ba_sigma > 0 and self.ba_huber > 0 and self.track_huber > 0, "noise scales must be positive"),
            (self.peak_prominence > 0, "peak_prominence must be positive"),
            (self.peak_distance >= 1, "peak_distance must be >= 1"),
            (self.loop_rings >= 1 and self.loop_sectors >= 1 and self.loop_max_radius > 0, "bad descriptor grid"),
            (self.loop_candidates >= 1 and self.loop_guard >= 0, "bad loop retrieval settings"),
            (0 < self.icp_min_inlier_fraction <= 1, "icp_min_inlier_fraction must lie in (0, 1]"),
            (self.odometry_sigma_t > 0 and self.odometry_sigma_theta > 0, "odometry sigmas must be positive"),
            (self.loop_kernel_chi2 > 0, "loop_kernel_chi2 must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def kf_max_rotation(self) -> float:
        return math.radians(self.kf_max_rotation_deg)

    def updated(self, **kw) -> PipelineConfig:
        return replace(self, **kw)

    def as_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_overrides(pairs) -> dict:
    """``["key=value", ...]`` into a typed dict."""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a ``key = value`` file (``#`` comments) and apply ``overrides``."""
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{n}: expected key = value")
                k, v = line.split("=", 1)
                values[k.strip()] = _coerce(k.strip(), v)
    values.update(overrides or {})
    return PipelineConfig(**values)
