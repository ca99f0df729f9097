"""Command-line surface: scene building, camera-path rendering/benchmarks,
training and the streaming server for the interactive viewer."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .cache import CacheConfig, CacheEntry, DeviceCache
from .core import AttributeArrays, Camera, LodConfig
from .hierarchy import bfs_cut, build_hierarchy
from .hspt import build_hspt, cut_hspt, default_size_threshold
from .renderer import render
from .spt import cut_spt
from .store import open_scene, read_ply, write_scene
from .trainer import (
    TrainConfig,
    initialize,
    point_cloud_gaussians,
    save_checkpoint,
    train,
)

DEFAULT_LOD_THRESHOLD = 1.0


def _apply_thread_cap():
    cap = os.environ.get("GLOD_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def load_camera(record: dict) -> Camera:
    res = record["resolution"]
    pp = record.get("principal_point", [res[0] / 2.0, res[1] / 2.0])
    return Camera(position=record["position"],
                  orientation=record["orientation"],
                  focal=tuple(record["focal"]),
                  principal_point=tuple(pp),
                  resolution=(int(res[0]), int(res[1])),
                  near=record.get("near", 0.01))


def load_camera_path(path: str) -> list:
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list) or not records:
        raise SystemExit(f"error: camera path {path!r} must be a non-empty "
                         "JSON array")
    return [load_camera(r) for r in records]


def save_png(image: np.ndarray, path: str):
    """8-bit sRGB PNG from a linear float image."""
    from PIL import Image

    srgb = np.clip(image, 0.0, 1.0) ** (1.0 / 2.2)
    Image.fromarray((srgb * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_png(path: str) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr ** 2.2


def _summary(samples):
    arr = np.asarray(samples, dtype=np.float64)
    return {"mean_ms": float(arr.mean()), "median_ms": float(np.median(arr)),
            "samples_ms": [float(x) for x in arr]}


def cmd_build(args) -> int:
    if args.input.endswith(".ply"):
        try:
            points, colors = read_ply(args.input)
        except Exception as e:  # parse diagnostics carry line/byte info
            print(f"error: {e}", file=sys.stderr)
            return 1
        leaves = point_cloud_gaussians(points, colors)
        sh_cols = 3 * ((args.sh_degree + 1) ** 2 - 1)
        if leaves.sh_rest.shape[1] != sh_cols:
            sh = np.zeros((len(leaves), sh_cols))
            cols = min(sh_cols, leaves.sh_rest.shape[1])
            sh[:, :cols] = leaves.sh_rest[:, :cols]
            leaves.sh_rest = sh
        h = build_hierarchy(leaves)
        cfg = LodConfig(threshold=args.lod_threshold, metric=args.lod_metric)
        size_thr = (args.size_threshold if args.size_threshold is not None
                    else default_size_threshold(h))
        hspt = build_hspt(h, size_thr, args.min_subtree, cfg)
    else:
        scene = open_scene(args.input)
        h = scene.read_hierarchy()
        hspt = scene.read_hspt()
        scene.close()
    write_scene(h, hspt, args.out)
    scene = open_scene(args.out)
    print(json.dumps(scene.memory_report(), indent=2))
    scene.close()
    return 0


def _gather(scene, h, hspt, rs, cache):
    """Attributes for a render set; SPT prefixes come from the cache/store."""
    loaded = 0
    parts = [h.attrs.take(np.concatenate([rs.upper, rs.passthrough]))]
    for sel in rs.per_spt:
        spt = hspt.spts[sel.spt_id]
        entry = cache.lookup(sel.spt_id, sel.d_root) if cache else None
        if entry is None:
            block = scene.load_spt_prefix(sel.spt_id, sel.prefix_len)
            loaded += sel.prefix_len
            if cache is not None:
                entry = CacheEntry(
                    spt_id=sel.spt_id, cached_distance=sel.d_root,
                    prefix_len=sel.prefix_len, block=block,
                    nbytes=sel.prefix_len * scene.bytes_per_gaussian)
                cache.insert(entry)
        else:
            block = entry.block
        d = sel.d_root if entry is None else entry.cached_distance
        prefix_len, selected = cut_spt(spt, d)
        if selected.size == 1 and selected[0] == spt.root:
            pos = np.nonzero(spt.nodes[:prefix_len] == spt.root)[0]
        else:
            pos = np.nonzero(spt.key_self[:prefix_len] <= d)[0]
        parts.append(block.attrs.take(pos).astype(np.float64))
    return AttributeArrays.concat(parts), loaded


def cmd_render(args) -> int:
    cams = load_camera_path(args.path)
    scene = open_scene(args.scene)
    h = scene.read_hierarchy()
    hspt = scene.read_hspt()
    cfg = scene.lod
    cache = (None if args.no_cache
             else DeviceCache(config=CacheConfig(budget_bytes=args.budget_bytes)))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    rows = []
    cut_ms, bfs_ms, frame_ms = [], [], []
    for i, cam in enumerate(cams):
        t0 = time.perf_counter()
        rs = cut_hspt(hspt, h, cam, cfg, cull=not args.no_cull)
        t1 = time.perf_counter()
        bytes_before = scene.attribute_bytes_read
        attrs, loaded = _gather(scene, h, hspt, rs, cache)
        if args.bfs_oracle:
            tb = time.perf_counter()
            bfs_cut(h, cam, cfg)
            bfs_ms.append((time.perf_counter() - tb) * 1e3)
        image = render(attrs, cam)
        t2 = time.perf_counter()
        if args.out:
            save_png(image, os.path.join(args.out, f"frame_{i:04d}.png"))
        cut_ms.append((t1 - t0) * 1e3)
        frame_ms.append((t2 - t0) * 1e3)
        rows.append({"frame": i, "rendered": len(attrs), "loaded": loaded,
                     "bytes_streamed": scene.attribute_bytes_read - bytes_before,
                     "cut_ms": cut_ms[-1], "frame_ms": frame_ms[-1]})
    report = {
        "config": {"scene": args.scene, "path": args.path,
                   "cache": not args.no_cache, "cull": not args.no_cull,
                   "bfs_oracle": args.bfs_oracle,
                   "budget_bytes": args.budget_bytes},
        "frames": rows,
        "cut": _summary(cut_ms),
        "frame": _summary(frame_ms),
        "total_bytes_streamed": int(sum(r["bytes_streamed"] for r in rows)),
    }
    if args.bfs_oracle:
        report["bfs_cut"] = _summary(bfs_ms)
    out = json.dumps(report, indent=2)
    if args.report:
        with open(args.report, "w") as f:
            f.write(out)
    else:
        print(out)
    scene.close()
    return 0


def cmd_bench(args) -> int:
    args.out = None
    args.bfs_oracle = True
    return cmd_render(args)


def load_views(views_dir: str) -> list:
    names = sorted(n[:-5] for n in os.listdir(views_dir)
                   if n.endswith(".json"))
    if not names:
        raise SystemExit(f"error: no view JSON files in {views_dir!r}")
    views = []
    size = None
    for name in names:
        with open(os.path.join(views_dir, name + ".json")) as f:
            cam = load_camera(json.load(f))
        img = load_png(os.path.join(views_dir, name + ".png"))
        if img.shape[:2] != (cam.resolution[1], cam.resolution[0]):
            raise SystemExit(f"error: view {name}: image is "
                             f"{img.shape[1]}x{img.shape[0]} but the pose says "
                             f"{cam.resolution[0]}x{cam.resolution[1]}")
        if size is None:
            size = img.shape
        elif img.shape != size:
            raise SystemExit(f"error: view {name}: image size differs from "
                             "the other views")
        views.append((cam, img))
    return views


def cmd_train(args) -> int:
    scene = open_scene(args.scene)
    h = scene.read_hierarchy()
    leaves = h.leaf_ids
    points = h.attrs.means[leaves]
    colors = h.attrs.base_colors[leaves]
    scene.close()
    views = load_views(args.views)
    with open(args.config) as f:
        raw = json.load(f)
    lod = LodConfig(threshold=raw.pop("lod_threshold", DEFAULT_LOD_THRESHOLD),
                    metric=raw.pop("lod_metric", "max_scale"))
    cache = CacheConfig(budget_bytes=raw.pop("cache_budget_bytes", 64 << 20),
                        d_min=raw.pop("cache_d_min", 0.8),
                        d_max=raw.pop("cache_d_max", 1.4),
                        flush_interval=raw.pop("cache_flush_interval", 1000))
    cfg = TrainConfig(lod=lod, cache=cache, **raw)
    state = initialize(points, colors, views, cfg, scene_target=args.store)
    metrics = open(args.metrics, "w") if args.metrics else sys.stdout
    try:
        train(state, metrics_out=metrics)
    finally:
        if args.metrics:
            metrics.close()
    save_checkpoint(state, args.out, args.out + ".opt.npz")
    return 0


def cmd_serve(args) -> int:
    import asyncio

    import websockets

    from .protocol import (
        MSG_CAMERA_POSE,
        ProtocolError,
        ServeSession,
        decode_message,
        encode_stats,
        pose_to_camera,
    )

    scene = open_scene(args.scene)
    h = scene.read_hierarchy()
    hspt = scene.read_hspt()
    lod = scene.lod

    async def handler(ws):
        session = ServeSession(hierarchy=h, hspt=hspt, lod=lod)
        await ws.send(encode_stats(0, 0, 0, 0.0))  # protocol handshake
        try:
            async for raw in ws:
                # latest-pose-wins: drain any queued poses first
                while True:
                    try:
                        raw = ws.messages.get_nowait()
                    except Exception:
                        break
                msg, _ = decode_message(raw)
                if msg["type"] != "camera_pose":
                    await ws.close(code=1002, reason="expected camera pose")
                    return
                for reply in session.handle_pose(pose_to_camera(msg)):
                    await ws.send(reply)
        except ProtocolError as e:
            await ws.close(code=1002, reason=str(e)[:100])

    async def main():
        async with websockets.serve(handler, "0.0.0.0", args.port):
            print(f"serving on :{args.port}", flush=True)
            await asyncio.Future()

    asyncio.run(main())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glod",
                                description="out-of-core LoD gaussian engine")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a scene file from a PLY cloud")
    b.add_argument("input", help="input .ply point cloud or existing scene")
    b.add_argument("--out", required=True)
    b.add_argument("--lod-threshold", type=float, default=DEFAULT_LOD_THRESHOLD)
    b.add_argument("--lod-metric", choices=["max_scale", "surface_area"],
                   default="max_scale")
    b.add_argument("--size-threshold", type=float, default=None)
    b.add_argument("--min-subtree", type=int, default=32)
    b.add_argument("--sh-degree", type=int, default=1)
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("render", help="render a camera path")
    r.add_argument("scene")
    r.add_argument("path", help="JSON array of camera records")
    r.add_argument("--out", default=None, help="PNG output directory")
    r.add_argument("--report", default=None, help="JSON report path")
    r.add_argument("--no-cache", action="store_true")
    r.add_argument("--no-cull", action="store_true")
    r.add_argument("--bfs-oracle", action="store_true")
    r.add_argument("--budget-bytes", type=int, default=64 << 20)
    r.set_defaults(func=cmd_render)

    be = sub.add_parser("bench", help="cut/render timing benchmark")
    be.add_argument("scene")
    be.add_argument("path")
    be.add_argument("--report", default=None)
    be.add_argument("--no-cache", action="store_true")
    be.add_argument("--no-cull", action="store_true")
    be.add_argument("--budget-bytes", type=int, default=64 << 20)
    be.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train a scene against posed views")
    t.add_argument("scene")
    t.add_argument("views", help="directory of NAME.json + NAME.png views")
    t.add_argument("--config", required=True, help="TrainConfig JSON")
    t.add_argument("--out", required=True, help="checkpoint scene path")
    t.add_argument("--store", default=None,
                   help="on-disk attribute store path (default: in memory)")
    t.add_argument("--metrics", default=None, help="JSON-lines metrics path")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("serve", help="stream cut deltas to viewers")
    s.add_argument("scene")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--budget-bytes", type=int, default=64 << 20)
    s.add_argument("--dmin", type=float, default=0.8)
    s.add_argument("--dmax", type=float, default=1.4)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
