"""Command-line entry points.

Subcommands: simulate (render a dataset to disk), client (stream a source
to a server), server (receive and reconstruct), offline (dataset in,
meshes out, no networking), split (instance-split a saved grid), inspect
(dump a packet or checkpoint summary). Exit codes: 0 success, 1 fatal,
2 partial (some categories failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import container, simulator
from .config import ConfigError, load_config
from .clustering import split_instances
from .fusion import extract_mesh, load_checkpoint, save_mesh_obj, save_mesh_ply
from .metrics import write_json
from .pipeline import EXIT_FATAL, EXIT_OK, run_client, run_offline, run_server


def _parse_endpoint(value: str, default_port: int):
    if ":" in value:
        host, port = value.rsplit(":", 1)
        return host or "127.0.0.1", int(port)
    return value, default_port


def _builtin_scene(name: str) -> simulator.Scene:
    scenes = {
        "lounge": simulator.lounge_scene,
        "sphere": simulator.sphere_scene,
        "chair": simulator.box_scene,
    }
    if name in scenes:
        return scenes[name]()
    path = Path(name)
    if path.exists():
        with open(path, "r", encoding="utf-8") as f:
            return simulator.scene_from_dict(json.load(f))
    raise SystemExit(f"unknown scene {name!r} (builtin: {', '.join(scenes)}, or a JSON file)")


def _intrinsics(resolution: str) -> simulator.Intrinsics:
    if resolution == "640x480":
        return simulator.DEFAULT_INTRINSICS
    if resolution == "320x240":
        return simulator.LOUNGE_INTRINSICS
    raise SystemExit(f"unsupported resolution {resolution!r}")


def _simulated_source(args):
    scene = _builtin_scene(args.scene)
    if args.scene == "lounge":
        traj = simulator.lounge_trajectory(steps=args.frames)
    else:
        traj = simulator.orbit(center=(0.0, 0.4, 0.0), radius=1.8,
                               steps=args.frames, height=-1.0, sweep=2.0)
    noise = None
    if args.noise_k > 0 or args.dropout > 0:
        noise = simulator.NoiseModel(k=args.noise_k, dropout=args.dropout, seed=args.seed)
    return simulator.SimulatedSource(scene, traj, _intrinsics(args.resolution), noise)


def cmd_simulate(args) -> int:
    scene = _builtin_scene(args.scene)
    if args.scene == "lounge":
        traj = simulator.lounge_trajectory(steps=args.frames)
    else:
        traj = simulator.orbit(center=(0.0, 0.4, 0.0), radius=1.8,
                               steps=args.frames, height=-1.0, sweep=2.0)
    noise = None
    if args.noise_k > 0 or args.dropout > 0:
        noise = simulator.NoiseModel(k=args.noise_k, dropout=args.dropout, seed=args.seed)
    out = simulator.generate_dataset(scene, traj, args.out,
                                     _intrinsics(args.resolution), noise)
    print(f"wrote {args.frames} frames to {out}")
    return EXIT_OK


def cmd_client(args) -> int:
    config = load_config(args.config, args.set)
    if args.dataset:
        source = simulator.DatasetSource(args.dataset)
    else:
        source = _simulated_source(args)
    host, port = _parse_endpoint(args.connect, config.transport.port)
    metrics = run_client(config, iter(source), host=host, port=port)
    if args.metrics:
        write_json(metrics.to_dict(), args.metrics)
    print(f"sent {metrics.packets_sent} packets "
          f"({metrics.frames_dropped} frames sampled out), "
          f"{metrics.bytes_on_wire} bytes on the wire")
    return EXIT_OK


def cmd_server(args) -> int:
    config = load_config(args.config, args.set)
    if args.buffer_capacity is not None:
        config.transport.buffer_capacity = args.buffer_capacity
    if args.ack_timeout is not None:
        config.transport.ack_timeout = args.ack_timeout
    host, port = _parse_endpoint(args.listen, config.transport.port)
    result = run_server(config, out_dir=args.out, host=host, port=port)
    for label, cat in sorted(result.metrics.categories.items()):
        print(f"{label}: {cat.frames} frames, {cat.tracking_lost} lost, "
              f"{cat.instances} instances, status {cat.status}")
    if result.failed:
        print(f"failed categories: {', '.join(result.failed)}", file=sys.stderr)
    return result.exit_code


def cmd_offline(args) -> int:
    config = load_config(args.config, args.set)
    result = run_offline(args.dataset, config, out_dir=args.out)
    for label, cat in sorted(result.metrics.categories.items()):
        print(f"{label}: {cat.frames} frames, {cat.tracking_lost} lost, "
              f"{cat.instances} instances, status {cat.status}")
    return result.exit_code


def cmd_split(args) -> int:
    config = load_config(args.config, args.set)
    cc = config.clustering
    if args.eps is not None:
        cc.eps = args.eps
    if args.min_points is not None:
        cc.min_points = args.min_points
    if args.plane_threshold is not None:
        cc.plane_threshold = args.plane_threshold
    if args.max_planes is not None:
        cc.max_planes = args.max_planes
    if args.seed is not None:
        cc.seed = args.seed
    grid = load_checkpoint(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.grid).stem
    instances = split_instances(grid, cc.split_params())
    for instance_id, mesh in instances:
        save_mesh_ply(mesh, out / f"{stem}_instance_{instance_id:02d}.ply")
        save_mesh_obj(mesh, out / f"{stem}_instance_{instance_id:02d}.obj")
    print(f"{len(instances)} instances from {args.grid}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.suffix == container.FILE_EXTENSION:
        packet = container.unpack(path.read_bytes())
        intr = packet.header.intrinsics
        info = {
            "kind": "packet",
            "frame_timestamp": packet.header.frame_timestamp,
            "compression_level": packet.header.compression_level,
            "image_size": [intr.width, intr.height],
            "has_pose_hint": packet.header.pose_hint is not None,
            "groups": {label: len(entries) for label, entries in packet.groups.items()},
        }
    elif path.suffix == ".vbg":
        grid = load_checkpoint(path)
        mesh = extract_mesh(grid)
        info = {
            "kind": "grid",
            "blocks": grid.count,
            "voxel_size": grid.voxel_size,
            "truncation": grid.truncation,
            "mesh_vertices": len(mesh.vertices),
            "mesh_triangles": len(mesh.triangles),
        }
    else:
        raise SystemExit(f"cannot inspect {path} (expected .3df or .vbg)")
    json.dump(info, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segfuse",
                                     description="segmented RGB-D streaming and fusion")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    p = sub.add_parser("simulate", help="render a synthetic dataset to disk")
    p.add_argument("--scene", default="lounge")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-k", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", default="320x240")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("client", help="stream frames to a server")
    common(p)
    p.add_argument("--connect", default="127.0.0.1")
    p.add_argument("--dataset", default=None, help="replay a recorded dataset")
    p.add_argument("--scene", default="lounge")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--noise-k", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", default="320x240")
    p.add_argument("--metrics", default=None, help="write client metrics JSON here")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("server", help="receive a stream and reconstruct")
    common(p)
    p.add_argument("--listen", default="127.0.0.1")
    p.add_argument("--out", default=None)
    p.add_argument("--buffer-capacity", type=int, default=None)
    p.add_argument("--ack-timeout", type=float, default=None)
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("offline", help="process a dataset without networking")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("split", help="split a grid checkpoint into instances")
    common(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--min-points", type=int, default=None)
    p.add_argument("--plane-threshold", type=float, default=None)
    p.add_argument("--max-planes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("inspect", help="summarize a packet or grid file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='{"time":"%(asctime)s","level":"%(levelname)s","msg":"%(message)s"}',
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except Exception as exc:  # pragma: no cover - fatal path
        logging.getLogger(__name__).exception("fatal: %s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
