"""Command-line entry points: gen, run, eval, bench.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 bootstrap or runtime
failure. All options can come from a TOML config file with flat [slam],
[ransac], [network], [stream] sections; command-line flags override file
values. Offline runs with a fixed seed are reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import __version__
from .errors import (
    BootstrapFailureError,
    EmptyAssociationError,
    ScrSlamError,
    SerializationError,
)
from .frontend import (
    TRAJECTORY_KINDS,
    StreamConfig,
    default_intrinsics,
    generate_stream,
    read_stream,
    write_stream,
)
from .geometry import ate_alignment, read_trajectory, write_trajectory
from .network import HomMlp, HomMlpConfig, TriMlp, TriplaneConfig, serialize
from .relocalizer import RansacConfig
from .slam import SlamConfig, SlamSystem, triplane_bounds_for_frame

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_RUNTIME = 3

REPORT_SCHEMA_VERSION = 1


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _section(config: dict, name: str, allowed: set[str]) -> dict:
    data = config.get(name, {})
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    return dict(data)


_STREAM_KEYS = {f.name for f in dataclasses.fields(StreamConfig)}
_RANSAC_KEYS = {f.name for f in dataclasses.fields(RansacConfig)}
_SLAM_KEYS = {f.name for f in dataclasses.fields(SlamConfig)} - {"ransac"}
_NETWORK_KEYS = {"kind", "hidden_width", "hidden_depth", "descriptor_dim",
                 "r_x", "r_y", "r_z", "bounds_min", "bounds_max", "w_epsilon"}


def _build_stream_config(file_cfg: dict, args) -> StreamConfig:
    values = _section(file_cfg, "stream", _STREAM_KEYS)
    for flag, key in [("duration", "duration"), ("fps", "fps"),
                      ("landmarks", "landmark_count"),
                      ("dynamic_fraction", "dynamic_fraction"),
                      ("descriptor_noise", "descriptor_noise_sigma"),
                      ("keypoint_noise", "keypoint_noise_sigma"),
                      ("depth_noise", "depth_noise_sigma"),
                      ("descriptor_dim", "descriptor_dim"),
                      ("max_features", "max_features_per_frame")]:
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    if args.seed is not None:
        values["seed"] = args.seed
    return StreamConfig(**values)


def _build_slam_config(file_cfg: dict, args) -> SlamConfig:
    ransac_values = _section(file_cfg, "ransac", _RANSAC_KEYS)
    slam_values = _section(file_cfg, "slam", _SLAM_KEYS)
    if args.seed is not None:
        slam_values["seed"] = args.seed
    defaults = SlamConfig()
    ransac = dataclasses.replace(defaults.ransac, **ransac_values)
    return dataclasses.replace(defaults, ransac=ransac, **slam_values)


def _write_manifest(out_dir: Path, command: str, config_snapshot: dict,
                    seed: int, input_path: str | None) -> None:
    manifest = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "input": input_path,
        "config": config_snapshot,
        "package_version": __version__,
        "git_revision": _git_revision(),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _config_snapshot(*configs) -> dict:
    out = {}
    for name, cfg in configs:
        out[name] = dataclasses.asdict(cfg)
    return out


def read_report(path) -> dict:
    """Load a JSON report, checking the schema version; unknown fields survive."""
    with open(path) as f:
        report = json.load(f)
    version = report.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise SerializationError(f"unsupported report schema version {version}")
    return report


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config)
    stream_cfg = _build_stream_config(file_cfg, args)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, "gen", _config_snapshot(("stream", stream_cfg)),
                    stream_cfg.seed, None)
    scene, trajectory, frames = generate_stream(stream_cfg, kind=args.preset)
    write_stream(out_dir / "stream.fstr", frames, scene.intrinsics)
    write_trajectory(out_dir / "groundtruth.txt", trajectory)
    print(f"wrote {out_dir / 'stream.fstr'} ({len(frames)} frames) and groundtruth.txt")
    return EXIT_OK


def _setup_system(args, frames, intrinsics):
    file_cfg = _load_config_file(args.config)
    slam_cfg = _build_slam_config(file_cfg, args)
    net_values = _section(file_cfg, "network", _NETWORK_KEYS)
    kind = args.net or net_values.get("kind", "trimlp")
    if kind not in ("trimlp", "hommlp"):
        raise ValueError(f"unknown network kind {kind!r}")
    net_values.pop("kind", None)
    rng = np.random.default_rng((slam_cfg.seed, 2))
    if kind == "hommlp":
        allowed = {f.name for f in dataclasses.fields(HomMlpConfig)}
        net = HomMlp.create(HomMlpConfig(
            **{k: v for k, v in net_values.items() if k in allowed}), rng)
        net_cfg_snapshot = dataclasses.asdict(net.config)
    else:
        if "bounds_min" not in net_values and frames:
            lo, hi = triplane_bounds_for_frame(frames[0], intrinsics)
            net_values["bounds_min"] = lo
            net_values["bounds_max"] = hi
        if "bounds_min" in net_values:
            net_values["bounds_min"] = tuple(float(v) for v in net_values["bounds_min"])
            net_values["bounds_max"] = tuple(float(v) for v in net_values["bounds_max"])
        allowed = {f.name for f in dataclasses.fields(TriplaneConfig)}
        net = TriMlp.create(TriplaneConfig(
            **{k: v for k, v in net_values.items() if k in allowed}), rng)
        net_cfg_snapshot = dataclasses.asdict(net.config)
    system = SlamSystem(net, slam_cfg, intrinsics)
    return system, kind, slam_cfg, net_cfg_snapshot


def _write_run_outputs(out_dir: Path, system: SlamSystem, kind: str) -> dict:
    exported = system.export_trajectory()
    write_trajectory(out_dir / "trajectory.txt", [(t, p) for t, p, _ in exported])
    map_bytes = serialize(system.network)
    (out_dir / "map.scrm").write_bytes(map_bytes)
    with open(out_dir / "pointcloud.txt", "w") as f:
        for points, kf_id in system.export_map_geometry():
            for x, y, z in points:
                f.write(f"{x:.6f} {y:.6f} {z:.6f} {kf_id}\n")
    stats = system.stats
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "network_kind": kind,
        "map_size_bytes": len(map_bytes),
        "keyframe_count": len(system.keyframes),
        "frames_received": stats.frames_received,
        "frames_processed": stats.frames_processed,
        "frames_skipped": stats.frames_skipped,
        "keyframe_inlier_ratios": [round(lam, 6) for _, _, lam in exported],
        "cycle_losses": [round(r.loss, 8) for r in system.cycle_reports],
    }
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    timing = {
        "schema_version": REPORT_SCHEMA_VERSION,
        **stats.summary(),
    }
    with open(out_dir / "timing.json", "w") as f:
        json.dump(timing, f, indent=2, sort_keys=True)
        f.write("\n")
    return timing


def cmd_run(args) -> int:
    frames, intrinsics = read_stream(args.stream)
    system, kind, slam_cfg, net_snapshot = _setup_system(args, frames, intrinsics)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = _config_snapshot(("slam", slam_cfg))
    snapshot["network"] = {"kind": kind, **net_snapshot}
    _write_manifest(out_dir, "run", snapshot, slam_cfg.seed, str(args.stream))
    system.run(frames, real_time=args.realtime)
    timing = _write_run_outputs(out_dir, system, kind)
    print(f"processed {system.stats.frames_processed}/{system.stats.frames_received} "
          f"frames ({system.stats.frames_skipped} skipped), "
          f"{len(system.keyframes)} keyframes, rt_factor={timing['rt_factor']:.3f}")
    print(f"outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    estimated = read_trajectory(args.estimated)
    ground_truth = read_trajectory(args.ground_truth)
    result = ate_alignment(estimated, ground_truth, tolerance=args.tolerance)
    print(f"ate_rmse_m={result.rmse:.6f}")
    print(f"associations={result.n_matches}")
    print("timestamp,error_m")
    for t, e in zip(result.matched_times, result.errors):
        print(f"{t:.6f},{e:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    frames, intrinsics = read_stream(args.stream)
    system, kind, slam_cfg, net_snapshot = _setup_system(args, frames, intrinsics)
    system.run(frames, real_time=not args.offline)
    stats = system.stats
    exported = system.export_trajectory()
    bench = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "network_kind": kind,
        "mode": "offline" if args.offline else "realtime",
        "map_size_bytes": len(serialize(system.network)),
        "keyframe_count": len(exported),
        **stats.summary(),
    }
    text = json.dumps(bench, indent=2, sort_keys=True)
    print(text)
    if args.output:
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.json").write_text(text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scrslam",
        description="Scene-coordinate-regression SLAM: synthetic streams, "
                    "online runs, evaluation, and benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic feature stream")
    gen.add_argument("--preset", choices=TRAJECTORY_KINDS, default="orbit")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--config", default=None, help="TOML config file")
    gen.add_argument("--duration", type=float, default=None)
    gen.add_argument("--fps", type=float, default=None)
    gen.add_argument("--landmarks", type=int, default=None)
    gen.add_argument("--dynamic-fraction", dest="dynamic_fraction", type=float, default=None)
    gen.add_argument("--descriptor-noise", dest="descriptor_noise", type=float, default=None)
    gen.add_argument("--keypoint-noise", dest="keypoint_noise", type=float, default=None)
    gen.add_argument("--depth-noise", dest="depth_noise", type=float, default=None)
    gen.add_argument("--descriptor-dim", dest="descriptor_dim", type=int, default=None)
    gen.add_argument("--max-features", dest="max_features", type=int, default=None)
    gen.add_argument("-o", "--output", required=True)
    gen.set_defaults(func=cmd_gen)

    run = sub.add_parser("run", help="run SLAM on a recorded stream")
    run.add_argument("stream", help="input .fstr stream file")
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--realtime", action="store_true", default=False,
                      help="pace frames at the stream rate and skip when busy")
    mode.add_argument("--offline", dest="realtime", action="store_false",
                      help="process every frame sequentially (default)")
    run.add_argument("--net", choices=("trimlp", "hommlp"), default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--config", default=None)
    run.add_argument("-o", "--output", required=True)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="absolute trajectory error of an estimate")
    ev.add_argument("estimated")
    ev.add_argument("ground_truth")
    ev.add_argument("--tolerance", type=float, default=0.02,
                    help="timestamp association tolerance in seconds")
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="latency / throughput / map-size report")
    bench.add_argument("stream")
    bench.add_argument("--net", choices=("trimlp", "hommlp"), default=None)
    bench.add_argument("--seed", type=int, default=None)
    bench.add_argument("--config", default=None)
    bench.add_argument("--offline", action="store_true", default=False)
    bench.add_argument("-o", "--output", default=None)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            SerializationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BootstrapFailureError, EmptyAssociationError, ScrSlamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
