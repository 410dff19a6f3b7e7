from __future__ import annotations

import json
import math

import numpy as np
import pytest

from fmcw_slam.pointcloud import extract
from fmcw_slam.scan import read_binary
from fmcw_slam.se2 import Pose2
from fmcw_slam.sim import (
    SimConfig,
    World,
    circle_trajectory,
    random_world,
    render_scan,
    render_sequence,
    write_dataset,
)

QUIET = SimConfig(range_resolution=0.05).noiseless()


def one_landmark(x, y, refl=0.8):
    return World(np.array([[x, y]]), np.array([refl]), (-50, 50, -50, 50))


def test_single_landmark_ahead():
    s = render_scan(one_landmark(10.0, 0.0), Pose2.identity(), QUIET)
    a, b = np.unravel_index(np.argmax(s.power), s.power.shape)
    assert (a, b) == (0, 200)
    assert abs(s.power[a, b] - 0.8) <= 1e-6


def test_landmark_at_quarter_turn():
    s = render_scan(one_landmark(0.0, 10.0), Pose2.identity(), QUIET)
    a, b = np.unravel_index(np.argmax(s.power), s.power.shape)
    assert a == QUIET.n_azimuths // 4 and b == 200


def test_pose_moves_blob_into_local_frame():
    # sensor at (5, 0) facing +y sees the landmark (5, 10) straight ahead
    s = render_scan(one_landmark(5.0, 10.0), Pose2(math.pi / 2, 5.0, 0.0), QUIET)
    a, b = np.unravel_index(np.argmax(s.power), s.power.shape)
    assert (a, b) == (0, 200)


def test_seeded_render_is_bit_identical():
    w = random_world(200, (-40, 40, -40, 40), seed=3)
    cfg = SimConfig(rng_seed=9)
    a = render_scan(w, Pose2(0.2, 1, 2), cfg, 4)
    b = render_scan(w, Pose2(0.2, 1, 2), cfg, 4)
    assert a.power.tobytes() == b.power.tobytes()
    c = render_scan(w, Pose2(0.2, 1, 2), cfg, 5)
    assert a.power.tobytes() != c.power.tobytes()


def test_render_sequence_examples():
    w = random_world(100, (-40, 40, -40, 40), seed=1)
    assert render_sequence(w, [], SimConfig()) == []
    same = render_sequence(w, [Pose2(0.1, 1, 1)] * 3, SimConfig().noiseless())
    assert all(np.array_equal(same[0].power, s.power) for s in same[1:])


def test_closed_loop_end_scan_matches_start():
    w = random_world(300, (-60, 60, -60, 60), seed=4)
    traj = circle_trajectory(10.0, 100, laps=100 / 99)  # pose 99 returns to pose 0
    cfg = SimConfig().noiseless()
    first = render_scan(w, traj[0], cfg, 0)
    last = render_scan(w, traj[-1], cfg, 99)
    rel = traj[0].between(traj[-1])
    assert rel.norm() < 1e-9 and abs(rel.theta) < 1e-9
    assert np.corrcoef(first.power.ravel(), last.power.ravel())[0, 1] > 0.99


def test_neighbouring_scans_align_by_true_motion():
    from scipy.spatial import cKDTree

    w = random_world(300, (-60, 60, -60, 60), seed=4, reflectivity=(1.0, 1.0))
    traj = circle_trajectory(10.0, 100)
    cfg = SimConfig().noiseless()
    a = extract(render_scan(w, traj[0], cfg, 0)).points
    b = extract(render_scan(w, traj[-1], cfg, 99)).points
    b = b[np.hypot(b[:, 0], b[:, 1]) < 35.0]  # both scans see these
    moved = traj[0].between(traj[-1]).transform_point(b)
    d, _ = cKDTree(a).query(moved)
    # one azimuth step spans up to 0.55 m at 35 m
    assert np.mean(d < 0.6) > 0.95


def test_noiseless_extraction_recovers_landmarks():
    # equal reflectivity: a weak reflector alone in its rows would fall under
    # the whole-scan threshold used for single-peak rows
    w = random_world(60, (-35, 35, -35, 35), seed=5, reflectivity=(1.0, 1.0), min_separation=4.0)
    cfg = SimConfig().noiseless()
    s = render_scan(w, Pose2.identity(), cfg)
    cloud = extract(s)
    local = w.landmarks
    rho = np.hypot(local[:, 0], local[:, 1]) / cfg.range_resolution
    az = np.mod(np.arctan2(local[:, 1], local[:, 0]), 2 * np.pi) * cfg.n_azimuths / (2 * np.pi)
    visible = rho <= cfg.n_bins - 1
    assert visible.sum() > 30
    for r, a in zip(rho[visible], az[visible]):
        dr = np.abs(cloud.bins - r)
        da = np.abs((cloud.rows - a + cfg.n_azimuths / 2) % cfg.n_azimuths - cfg.n_azimuths / 2)
        assert np.any((dr <= 2) & (da <= 1)), (r, a)


def test_speckle_does_not_move_blobs():
    w = one_landmark(12.0, 5.0, 0.9)
    quiet = render_scan(w, Pose2.identity(), QUIET)
    noisy = render_scan(w, Pose2.identity(), SimConfig(range_resolution=0.05, floor_sigma=0.0, saturation_prob=0.0,
                                                       multipath_prob=0.0, speckle_rate=40.0))
    peak = np.unravel_index(np.argmax(quiet.power), quiet.power.shape)
    assert noisy.power[peak] >= quiet.power[peak]
    window = noisy.power[peak[0] - 2: peak[0] + 3, peak[1] - 5: peak[1] + 6]
    assert np.unravel_index(np.argmax(window), window.shape) == (2, 5)


def test_multipath_ghost_at_double_range():
    cfg = SimConfig(range_resolution=0.05, speckle_rate=0, floor_sigma=0, saturation_prob=0, multipath_prob=1.0)
    s = render_scan(one_landmark(10.0, 0.0, 1.0), Pose2.identity(), cfg)
    assert abs(s.power[0, 400] - cfg.multipath_gain) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(multipath_prob=1.5)
    with pytest.raises(ValueError):
        SimConfig(beam_width=0.5)
    with pytest.raises(ValueError):
        World(np.array([[100.0, 0.0]]), np.array([0.5]), (-10, 10, -10, 10))
    with pytest.raises(ValueError):
        random_world(200, (-5, 5, -5, 5), min_separation=1.5)


def test_write_dataset(tmp_path):
    w = random_world(50, (-30, 30, -30, 30), seed=2)
    traj = circle_trajectory(5.0, 4)
    write_dataset(tmp_path, w, traj, SimConfig(), {"world_seed": 2})
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["n_landmarks"] == 50 and meta["n_frames"] == 4
    assert read_binary(tmp_path / "scan_000003.bin").timestamp == 0.75
    lines = (tmp_path / "groundtruth.csv").read_text().splitlines()
    assert lines[0] == "timestamp,x,y,theta" and len(lines) == 5
