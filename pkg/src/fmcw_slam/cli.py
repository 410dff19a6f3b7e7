"""Command-line driver: ``slam``, ``sim``, ``eval`` and ``convert``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_overrides
from .evaluation import MetricUndefined, evaluate, read_trajectory
from .pipeline import SlamSystem, write_outputs
from .scan import ScanFormatError, list_scans, load_scan, read_binary, read_oxford_png, write_binary, write_oxford_png
from .sim import SimConfig, circle_trajectory, random_world, write_dataset

log = logging.getLogger("fmcw_slam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fmcw-slam", description="Keyframe radar SLAM on polar FMCW scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("slam", help="run SLAM on a scan directory")
    s.add_argument("dataset", nargs="?", help="directory of .bin or Oxford .png scans")
    s.add_argument("-c", "--config", help="key = value config file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    s.add_argument("-o", "--output", help="output directory")
    s.add_argument("--groundtruth", help="trajectory CSV (timestamp,x,y,theta) for metrics")
    s.add_argument("--odometry-only", action="store_true", help="skip loop closure and pose graph")
    s.add_argument("--single-thread", action="store_true", help="serialize all stages (reproducible)")
    s.add_argument("--eval-scale", type=float, default=0.1, help="segment-length scale for metrics")

    m = sub.add_parser("sim", help="render a simulated dataset")
    m.add_argument("output")
    m.add_argument("--frames", type=int, default=200)
    m.add_argument("--landmarks", type=int, default=2000)
    m.add_argument("--extent", type=float, default=80.0, help="world half-width in meters")
    m.add_argument("--radius", type=float, default=20.0, help="circle radius of the drive")
    m.add_argument("--laps", type=float, default=1.0)
    m.add_argument("--seed", type=int, default=0, help="noise seed")
    m.add_argument("--world-seed", type=int, default=1)
    m.add_argument("--noiseless", action="store_true")

    e = sub.add_parser("eval", help="score an estimated trajectory")
    e.add_argument("estimate")
    e.add_argument("truth")
    e.add_argument("--scale", type=float, default=1.0, help="segment-length scale (0.1 for desk scale)")
    e.add_argument("-o", "--output", help="directory for metrics.txt / metrics.csv")

    c = sub.add_parser("convert", help="convert scans between .bin and Oxford .png")
    c.add_argument("input", help="scan file or directory")
    c.add_argument("output", help="output file or directory")
    c.add_argument("--to", choices=("bin", "png"), help="target format (default from output suffix)")
    return p


def _cmd_slam(args) -> int:
    overrides = parse_overrides(args.set)
    for key, flag in (("odometry_only", args.odometry_only), ("single_thread", args.single_thread)):
        if flag:
            overrides[key] = True
    if args.dataset:
        overrides["dataset"] = args.dataset
    if args.output:
        overrides["output"] = args.output
    if args.groundtruth:
        overrides["groundtruth"] = args.groundtruth
    cfg = load_config(args.config, overrides)
    if not cfg.dataset:
        raise UsageError("no dataset given")
    try:
        files = list_scans(cfg.dataset)
    except ScanFormatError as exc:
        raise DataError(str(exc)) from None
    if not files:
        raise DataError(f"no scans in {cfg.dataset}")
    truth = None
    if cfg.groundtruth:
        try:
            truth = read_trajectory(cfg.groundtruth)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read ground truth: {exc}") from None
    system = SlamSystem(cfg)
    n_ok = 0
    for path in files:
        try:
            scan = load_scan(path)
        except (OSError, ScanFormatError) as exc:
            log.error("skipping %s: %s", path.name, exc)
            continue
        system.process(scan)
        n_ok += 1
    if n_ok == 0:
        raise DataError("no readable scans")
    result = system.finish()
    report = write_outputs(cfg.output, result, system, truth, args.eval_scale)
    (Path(cfg.output) / "config.txt").write_text(cfg.as_text())
    print(f"{n_ok} frames, {len(result.keyframes)} keyframes, {len(result.accepted_loops)} loop closures, "
          f"{n_ok / max(result.wall_time, 1e-9):.2f} frames/s")
    if report is not None:
        print(report.text(), end="")
    return EXIT_OK


def _cmd_sim(args) -> int:
    if args.frames < 1 or args.landmarks < 1:
        raise UsageError("frames and landmarks must be positive")
    ext = args.extent
    world = random_world(args.landmarks, (-ext, ext, -ext, ext), seed=args.world_seed)
    cfg = SimConfig(rng_seed=args.seed)
    if args.noiseless:
        cfg = cfg.noiseless()
    traj = circle_trajectory(args.radius, args.frames, args.laps)
    meta = {"world_seed": args.world_seed, "radius": args.radius, "laps": args.laps, "noiseless": args.noiseless}
    write_dataset(args.output, world, traj, cfg, meta)
    print(f"wrote {args.frames} scans to {args.output}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    try:
        est = read_trajectory(args.estimate)
        gt = read_trajectory(args.truth)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    try:
        report = evaluate(est, gt, scale=args.scale)
    except MetricUndefined as exc:
        raise DataError(str(exc)) from None
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "metrics.txt", out / "metrics.csv")
    print(report.text(), end="")
    return EXIT_OK


def _convert_one(src: Path, dst: Path, fmt: str) -> None:
    scan = read_binary(src) if src.suffix == ".bin" else read_oxford_png(src)
    if fmt == "bin":
        write_binary(scan, dst)
    else:
        write_oxford_png(scan, dst)


def _cmd_convert(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    fmt = args.to or dst.suffix.lstrip(".")
    if fmt not in ("bin", "png"):
        raise UsageError("cannot infer the target format; pass --to")
    try:
        if src.is_dir():
            dst.mkdir(parents=True, exist_ok=True)
            files = list_scans(src)
            if not files:
                raise DataError(f"no scans in {src}")
            for f in files:
                _convert_one(f, dst / (f.stem + "." + fmt), fmt)
        else:
            if not src.exists():
                raise DataError(f"{src} does not exist")
            _convert_one(src, dst, fmt)
    except (OSError, ScanFormatError) as exc:
        raise DataError(str(exc)) from None
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"slam": _cmd_slam, "sim": _cmd_sim, "eval": _cmd_eval, "convert": _cmd_convert}
    try:
        return handlers[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
