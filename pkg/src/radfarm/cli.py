"""Operator entry points: train, render, bench, simulate, serve.

Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import signal
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import assetio, bench
from .config import ServeSettings, TrainSettings, load_settings, write_manifest
from .datasets import resolve_scene, save_dataset
from .errors import ConfigError, DataError, RadfarmError
from .farm import FarmConfig
from .lightfield import RenderCounters
from .pipeline import evaluate_psnr, render_asset_frame, train_asset
from .protocol import ENC_DEFLATE, ENC_RAW
from .scenes import BUILTIN_SCENES, get_scene, make_dataset, orbit_camera
from .scheduler import Thresholds
from .serve import FarmServer
from .simulate import Workload, simulate
from .transports import WallClock


def _add_common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--out", required=True, help="output directory")


def cmd_train(args) -> int:
    settings = load_settings(TrainSettings, args.config, args.set, "train config")
    if args.scene:
        settings.scene = args.scene
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    images, alphas, cameras = resolve_scene(
        settings.scene, settings.train_views, settings.image_size, settings.seed
    )
    log = print if args.verbose else None
    asset, metrics = train_asset(images, alphas, cameras, settings.pipeline(), log=log)
    asset.name = Path(settings.scene).name

    asset_path = out / f"{asset.name}.nolf"
    assetio.write_asset(asset, asset_path)

    if settings.scene in BUILTIN_SCENES and settings.test_views > 0:
        test_images, test_alphas, test_cams = make_dataset(
            get_scene(settings.scene), settings.test_views,
            size=settings.image_size, seed=settings.seed + 9000,
        )
        metrics["held_out_psnr"] = evaluate_psnr(asset, test_images, test_alphas, test_cams)
        metrics["train_psnr"] = evaluate_psnr(asset, images, alphas, cameras)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, default=float))
    write_manifest(out, "train", settings, {"asset": str(asset_path)})
    if args.verbose and "held_out_psnr" in metrics:
        print(f"held-out PSNR: {metrics['held_out_psnr']:.2f} dB")
    return 0


def _parse_path(spec: str):
    kind, _, rest = spec.partition(":")
    params = {}
    if rest:
        for item in rest.split(","):
            k, _, v = item.partition("=")
            params[k] = float(v)
    return kind, params


def _load_scene_json(path: str):
    """Scene file: {"assets": [{"file": "x.nolf", "transform": [16 floats]?}]}"""
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"bad scene json {path}: {e}") from e
    scene = []
    for entry in spec.get("assets", []):
        asset = assetio.read_asset(Path(path).parent / entry["file"])
        transform = (
            np.asarray(entry["transform"], dtype=np.float64).reshape(4, 4)
            if "transform" in entry
            else None
        )
        scene.append((asset, transform))
    if not scene:
        raise DataError(f"scene json {path} lists no assets")
    return scene


def cmd_render(args) -> int:
    if not args.asset and not args.scene_json:
        raise ConfigError("render needs --asset or --scene-json")
    if args.scene_json:
        scene = _load_scene_json(args.scene_json)
    else:
        scene = [(assetio.read_asset(args.asset), None)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kind, params = _parse_path(args.path)
    frames = int(params.get("frames", 8))
    size = int(params.get("size", 128))

    cameras = []
    if kind == "orbit":
        radius = params.get("radius", 2.0)
        for i in range(frames):
            cameras.append(orbit_camera(2 * np.pi * i / frames, 0.3, radius=radius, size=size))
    elif kind == "zoom":
        far = params.get("start", 4.0)
        near = params.get("end", 1.1)
        for i in range(frames):
            radius = far * (near / far) ** (i / max(frames - 1, 1))
            cameras.append(orbit_camera(0.6, 0.25, radius=radius, size=size))
    else:
        raise ConfigError(f"unknown camera path {kind!r} (use orbit: or zoom:)")

    depth_far = float(params.get("depth_far", 10.0))
    rows = []
    for i, cam in enumerate(cameras):
        counters = RenderCounters()
        t0 = time.perf_counter()
        if len(scene) == 1 and scene[0][1] is None:
            frame = render_asset_frame(scene[0][0], cam, counters)
        else:
            from radfarm.farm import compose
            from radfarm.renderer import render_frame

            frame = compose(render_frame(scene, cam, counters))
        wall = time.perf_counter() - t0
        rgba8 = np.clip(np.round(frame.rgba * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgba8).save(out / f"frame_{i:03d}.png")
        q = np.where(
            np.isfinite(frame.depth),
            np.round(np.minimum(frame.depth, depth_far) / depth_far * 65535),
            65535,
        ).astype(np.uint16)
        Image.fromarray(q).save(out / f"depth_{i:03d}.png")
        rows.append(
            {
                "frame": i,
                "seconds": wall,
                "hit_pixels": counters.hit_pixels,
                "fs_evals": counters.fs_evals,
                "fd_evals": counters.fd_evals,
            }
        )
    with open(out / "timing.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (out / "render.json").write_text(
        json.dumps(
            {
                "frames": len(rows),
                "total_seconds": sum(r["seconds"] for r in rows),
                "total_hit_pixels": sum(r["hit_pixels"] for r in rows),
                "total_fs_evals": sum(r["fs_evals"] for r in rows),
                "total_fd_evals": sum(r["fd_evals"] for r in rows),
                "depth_quantization": "round(min(depth, far)/far * 65535), 65535 = miss",
                "depth_far": depth_far,
            },
            indent=2,
        )
    )
    write_manifest(
        out, "render", TrainSettings(),
        {"asset": args.asset or args.scene_json, "path": args.path},
    )
    return 0


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode in ("encoder", "concurrency", "scaling") and not args.asset:
        raise ConfigError(f"bench mode {args.mode!r} needs --asset")
    report: dict = {"mode": args.mode}
    if args.mode == "encoder":
        asset = assetio.read_asset(args.asset)
        report["throughput"] = bench.encoder_throughput(asset)
        report["slot_trace"] = bench.slot_trace_stat(asset)
    elif args.mode == "cache":
        report["cache_ablation"] = bench.cache_ablation(
            scene_name=args.scene or "sphere", density_steps=args.budget
        )
    elif args.mode == "concurrency":
        asset = assetio.read_asset(args.asset)
        report["concurrency"] = bench.concurrency_sweep(asset, max_workers=args.workers)
    elif args.mode == "scaling":
        asset = assetio.read_asset(args.asset)
        rows = bench.zoom_sweep(asset)
        report["zoom_sweep"] = rows
        report["doubling_ratios"] = bench.scaling_ratios(rows)
    else:
        raise ConfigError(f"unknown bench mode {args.mode!r}")
    (out / "bench.json").write_text(json.dumps(report, indent=2, default=float))
    print(json.dumps(report, indent=2, default=float))
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.workload)
    if not path.is_file():
        raise DataError(f"workload file not found: {args.workload}")
    workload = Workload.from_json(path.read_text())
    report, trace = simulate(workload)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, default=float))
    with open(out / "trace.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["tick", "time_s", "assigned", "rays_rendered", "cache_hits",
             "starved_users", "join_denials", "frames_delivered"]
        )
        for row in trace:
            writer.writerow(
                [row["tick"], f"{row['time_s']:.4f}", row["assigned"],
                 row["rays_rendered"], row["cache_hits"],
                 "|".join(row["starved_users"]), row["join_denials"],
                 json.dumps(row["frames_delivered"])]
            )
    print(json.dumps({k: v for k, v in report.items() if k != "achieved_fps"},
                     indent=2, default=float))
    return 0


def cmd_serve(args) -> int:
    settings = load_settings(ServeSettings, args.config, args.set, "serve config")
    if args.port is not None:
        settings.port = args.port
    asset_dir = Path(args.assets)
    assets = {}
    for path in sorted(asset_dir.glob("*.nolf")):
        assets[path.stem] = assetio.read_asset(path)
    if not assets:
        raise DataError(f"no .nolf assets found in {asset_dir}")

    config = FarmConfig(
        heavy_workers=settings.heavy_workers,
        light_workers=settings.light_workers,
        light_rays_per_tick=settings.light_rays_per_tick,
        tick_s=settings.tick_ms / 1000.0,
        tile_size=settings.tile_size,
        thresholds=Thresholds(pix_fraction=settings.pix_fraction,
                              depth=settings.depth_threshold),
        depth_far=settings.depth_far,
        encoding=ENC_DEFLATE if settings.encoding == "deflate" else ENC_RAW,
        frame_timeout_ticks=settings.frame_timeout_ticks,
        cache_ttl_s=settings.cache_ttl_s,
        stats_every_ticks=settings.stats_every_ticks,
    )
    server = FarmServer(assets, config, WallClock())
    static = settings.static_dir or None
    port = server.listen(settings.host, settings.port, static_dir=static)
    print(f"serving {sorted(assets)} on {settings.host}:{port}", flush=True)

    def _stop(_sig, _frm):
        server.stopping = True

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    try:
        while not server.stopping:
            server.run_for(1.0)
    finally:
        server.shutdown()
        print("drained; bye", flush=True)
    return 0


def cmd_dataset(args) -> int:
    """Materialize a built-in scene as an on-disk dataset."""
    scene = get_scene(args.scene)
    images, alphas, cameras = make_dataset(scene, args.views, size=args.size, seed=args.seed)
    save_dataset(args.out, images, alphas, cameras)
    print(f"wrote {args.views} views to {args.out}")
    return 0


def _defaults_epilog(cls) -> str:
    import dataclasses

    lines = ["config keys (override with --set KEY=VALUE):"]
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  {f.name} = {default!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radfarm",
        description="Train, render, serve, and schedule neural opacity light fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "train",
        help="full pipeline: density fit, caches, shading fit",
        epilog=_defaults_epilog(TrainSettings),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--scene", help="built-in scene name or dataset directory")
    p.add_argument("--verbose", action="store_true")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="offline image sequence from trained assets")
    p.add_argument("--asset", help="a single .nolf asset")
    p.add_argument("--scene-json", help="multi-asset scene file (composed by depth)")
    p.add_argument("--path", default="orbit:frames=8,size=128",
                   help="orbit:frames=N,size=S,radius=R or zoom:frames=N,start=A,end=B")
    _add_common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("bench", help="microbenchmarks and ablations")
    p.add_argument("--mode", required=True,
                   choices=["encoder", "cache", "concurrency", "scaling"])
    p.add_argument("--asset", help="trained .nolf (encoder/concurrency/scaling)")
    p.add_argument("--scene", help="built-in scene for cache mode")
    p.add_argument("--budget", type=int, default=120, help="density steps for cache mode")
    p.add_argument("--workers", type=int, default=4)
    _add_common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("simulate", help="virtual-clock scheduling simulation")
    p.add_argument("--workload", required=True, help="workload JSON")
    _add_common(p)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser(
        "serve",
        help="run the master node and render farm",
        epilog=_defaults_epilog(ServeSettings),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--assets", required=True, help="directory of .nolf files")
    p.add_argument("--port", type=int)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("dataset", help="write a built-in scene to disk as PNGs + cameras")
    p.add_argument("--scene", required=True)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except RadfarmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
