from __future__ import annotations

import json
import math

import numpy as np
import pytest

from fmcw_slam.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from fmcw_slam.config import ConfigError, PipelineConfig, load_config, parse_overrides
from fmcw_slam.evaluation import Trajectory, read_trajectory, write_trajectory
from fmcw_slam.scan import read_binary
from fmcw_slam.se2 import Pose2

DETERMINISTIC_OUTPUTS = ("trajectory.csv", "keyframes.csv", "map_points.csv", "loops.csv", "pose_graph.txt")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "seq"
    args = ["sim", str(out), "--frames", "24", "--landmarks", "800", "--extent", "50", "--radius", "15",
            "--laps", "0.25", "--noiseless"]
    assert main(args) == EXIT_OK
    return out


# --- config -------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ndelta_c = 0.75\nodometry_only = yes\n\nraster_width = 401  # inline\n")
    cfg = load_config(path, {"seed": 3})
    assert cfg.delta_c == 0.75 and cfg.odometry_only is True and cfg.raster_width == 401 and cfg.seed == 3
    assert parse_overrides(["v_max=12", "single_thread=off"]) == {"v_max": 12.0, "single_thread": False}


def test_config_text_round_trip(tmp_path):
    cfg = PipelineConfig(delta_c=0.3, odometry_only=True, dataset="somewhere")
    path = tmp_path / "c.cfg"
    path.write_text(cfg.as_text())
    assert load_config(path) == cfg


@pytest.mark.parametrize(
    "text",
    ["nonsense_key = 1\n", "delta_c = abc\n", "odometry_only = maybe\n", "just a line\n",
     "raster_width = 400\n", "ratio = 1.5\n", "peak_distance = 0\n", "icp_min_inlier_fraction = 0\n"],
)
def test_config_rejects_invalid_values(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_override_needs_equals_sign():
    with pytest.raises(ConfigError):
        parse_overrides(["delta_c"])


# --- exit codes -------------------------------------------------------------------


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["slam"]) == EXIT_USAGE
    assert main(["slam", str(tmp_path), "--set", "delta_c=-1"]) == EXIT_USAGE
    assert main(["convert", str(tmp_path), str(tmp_path / "out.xyz")]) == EXIT_USAGE


def test_empty_or_missing_dataset_exits_two(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["slam", str(empty), "-o", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["slam", str(tmp_path / "absent"), "-o", str(tmp_path / "o")]) == EXIT_DATA


def test_eval_missing_file_exits_two(tmp_path):
    t = Trajectory(np.arange(3) * 0.1, [Pose2(0, float(i), 0) for i in range(3)])
    write_trajectory(tmp_path / "a.csv", t)
    assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "missing.csv")]) == EXIT_DATA


# --- sim --------------------------------------------------------------------------


def test_sim_is_bit_reproducible(tmp_path):
    args = ["--frames", "3", "--landmarks", "300", "--extent", "40", "--seed", "5"]
    assert main(["sim", str(tmp_path / "a"), *args]) == EXIT_OK
    assert main(["sim", str(tmp_path / "b"), *args]) == EXIT_OK
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_sim_metadata_and_noiseless_flag(small_dataset):
    meta = json.loads((small_dataset / "metadata.json").read_text())
    assert meta["n_landmarks"] == 800 and meta["n_frames"] == 24
    assert meta["noiseless"] is True
    assert meta["sim"]["speckle_rate"] == 0.0 and meta["sim"]["multipath_prob"] == 0.0
    lm = np.loadtxt(small_dataset / "landmarks.csv", delimiter=",", skiprows=1)
    assert lm.shape == (800, 3)
    # with no floor noise most of the polar image is exactly zero
    scan = read_binary(small_dataset / "scan_000000.bin")
    assert np.mean(scan.power == 0) > 0.5


# --- eval -------------------------------------------------------------------------


def test_eval_identical_files_is_zero(tmp_path, capsys):
    ps = [Pose2(0.01 * i, float(i), 0.1 * i) for i in range(120)]
    write_trajectory(tmp_path / "t.csv", Trajectory(np.arange(120) * 0.1, ps))
    assert main(["eval", str(tmp_path / "t.csv"), str(tmp_path / "t.csv"), "--scale", "0.1",
                 "-o", str(tmp_path / "m")]) == EXIT_OK
    text = (tmp_path / "m" / "metrics.txt").read_text()
    values = dict(line.split()[:2] for line in text.splitlines() if not line.startswith("#"))
    assert float(values["ate_rmse_m"]) < 1e-12 and float(values["translation_pct"]) < 1e-12


def test_eval_scaled_trajectory_reports_one_percent(tmp_path, capsys):
    truth = Trajectory(np.arange(1001) * 0.1, [Pose2(0.0, float(x), 0.0) for x in range(1001)])
    est = Trajectory(truth.timestamps, [Pose2(0.0, 1.01 * x, 0.0) for x in range(1001)])
    write_trajectory(tmp_path / "gt.csv", truth)
    write_trajectory(tmp_path / "est.csv", est)
    assert main(["eval", str(tmp_path / "est.csv"), str(tmp_path / "gt.csv")]) == EXIT_OK
    line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("translation_pct"))
    assert float(line.split()[1]) == pytest.approx(1.0, abs=0.01)


# --- slam ---------------------------------------------------------------------------


@pytest.mark.slow
def test_slam_end_to_end_outputs(small_dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["slam", str(small_dataset), "-o", str(out), "--single-thread",
                 "--groundtruth", str(small_dataset / "groundtruth.csv")])
    assert code == EXIT_OK
    for name in DETERMINISTIC_OUTPUTS + ("metrics.txt", "metrics.csv", "map.svg", "timings.csv", "config.txt"):
        assert (out / name).exists(), name
    est = read_trajectory(out / "trajectory.csv")
    assert len(est) == 24
    text = (out / "metrics.txt").read_text()
    ate = float(next(x for x in text.splitlines() if x.startswith("ate_rmse_m")).split()[1])
    assert ate < 1e-2
    assert "single_thread = true" in (out / "config.txt").read_text()


@pytest.mark.slow
def test_single_thread_runs_are_bit_identical(small_dataset, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["slam", str(small_dataset), "-o", str(tmp_path / name), "--single-thread"]) == EXIT_OK
    for name in DETERMINISTIC_OUTPUTS:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


@pytest.mark.slow
def test_odometry_only_skips_loop_closure(small_dataset, tmp_path, capsys):
    out = tmp_path / "odo"
    assert main(["slam", str(small_dataset), "-o", str(out), "--odometry-only", "--single-thread"]) == EXIT_OK
    assert (out / "loops.csv").read_text().strip().splitlines() == [
        "query,match,descriptor_distance,inlier_fraction,residual,accepted"
    ]
    graph = (out / "pose_graph.txt").read_text()
    assert "LOOP" not in graph


@pytest.mark.slow
def test_convert_round_trip(small_dataset, tmp_path):
    src = small_dataset / "scan_000000.bin"
    assert main(["convert", str(src), str(tmp_path / "s.png")]) == EXIT_OK
    assert main(["convert", str(tmp_path / "s.png"), str(tmp_path / "s.bin")]) == EXIT_OK
    a, b = read_binary(src), read_binary(tmp_path / "s.bin")
    assert a.power.shape == b.power.shape
    # 8-bit quantization bounds the error
    assert np.max(np.abs(a.power - b.power)) <= 0.5 / 255 + 1e-6
    assert math.isclose(a.range_resolution, b.range_resolution, rel_tol=1e-12)
