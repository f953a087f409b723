"""Command-line surface.

Subcommands: gen (synthetic dataset), fit (dataset -> .voct), render
(.voct + camera + frame -> images), compose (scene file + camera path ->
frame sequence), edit paint (batch paint from a mask image), verify-basis
(Gram matrix report), bench (traversal/render throughput), serve (edit
service). Exit codes: 0 success, 1 usage error, 2 runtime failure.

Fit options may come from a key-value config file (lines of `key = value`
or `key: value`, # comments); explicit flags override the file.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _camera_from_json(doc: dict):
    from .datasets import rigid_inverse
    from .render import Camera

    if "c2w" in doc:
        c2w = np.array(doc["c2w"], dtype=np.float64).reshape(4, 4)
    elif "w2c" in doc:
        c2w = rigid_inverse(np.array(doc["w2c"], dtype=np.float64).reshape(4, 4))
    else:
        raise ValueError("camera json needs a 'c2w' or 'w2c' matrix (row-major, 16 numbers)")
    return Camera(
        int(doc["width"]), int(doc["height"]), float(doc["fx"]), float(doc["fy"]),
        float(doc["cx"]), float(doc["cy"]), c2w,
    )


def _default_camera(tree, width, height, focal=None, azimuth=0.6, elevation=0.35):
    from .render import Camera

    center = tree.bbox_lo + 0.5 * tree.side
    rad = 2.3 * tree.side
    eye = center + rad * np.array(
        [math.cos(azimuth) * math.cos(elevation),
         math.sin(azimuth) * math.cos(elevation),
         math.sin(elevation)]
    )
    return Camera.look_at(eye, center, width=width, height=height,
                          focal=focal or 1.5 * max(width, height))


def parse_config_file(path) -> dict:
    """Key-value config: `key = value` or `key: value`, values as JSON
    literals when possible, bare words as strings."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, val = line.split(sep, 1)
                break
        else:
            raise ValueError(f"config line has no key-value separator: {raw!r}")
        key = key.strip().replace("-", "_")
        val = val.strip()
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _spec_from_arg(spec_arg: str, frames: int | None):
    from . import synth

    if spec_arg == "moving-sphere":
        return synth.moving_sphere_spec(frames=frames or 16)
    doc = json.loads(Path(spec_arg).read_text())
    prims = [synth.Primitive(**p) for p in doc["primitives"]]
    return synth.SyntheticSceneSpec(
        primitives=prims,
        frames=frames or int(doc.get("frames", 16)),
        bbox_lo=tuple(doc.get("bbox_lo", (0.0, 0.0, 0.0))),
        side=float(doc.get("side", 1.0)),
        background=tuple(doc.get("background", (0.08, 0.08, 0.10))),
    )


def cmd_gen(args) -> int:
    from . import synth
    from .datasets import save_dataset

    spec = _spec_from_arg(args.spec, args.frames)
    ds = synth.generate_synthetic(spec, args.views, args.resolution,
                                  n_eval=args.eval_views)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_views} views x {ds.frames} frames at "
          f"{args.resolution}^2 to {args.out}")
    return 0


def cmd_fit(args) -> int:
    from .datasets import load_dataset
    from .train import TrainConfig, evaluate_psnr, fit

    overrides = parse_config_file(args.config) if args.config else {}
    for key in ("iters", "batch_rays", "coeff_count", "n_max", "lambda_grad", "seed",
                "final_resolution", "start_resolution", "lr_payload", "lr_bases",
                "prune_every", "prune_threshold", "bg_ray_fraction", "patch_size",
                "patches_per_step"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if args.stage_iters:
        overrides["stage_iters"] = tuple(int(v) for v in args.stage_iters.split(","))
    if "stage_iters" in overrides and isinstance(overrides["stage_iters"], list):
        overrides["stage_iters"] = tuple(overrides["stage_iters"])
    config = TrainConfig(**overrides)
    ds = load_dataset(args.dataset)
    log_fh = open(args.log, "w") if args.log else None
    t0 = time.time()

    def progress(rec):
        print(f"iter {rec['iter']:5d} stage {rec['stage']} leaves {rec['leaves']:7d} "
              f"l_rgb {rec['l_rgb']:10.3f} psnr {rec['psnr_train']:5.2f}", flush=True)

    try:
        tree = fit(ds, config, log_file=log_fh, progress=progress if args.verbose else None,
                   checkpoint_path=args.checkpoint, checkpoint_every=args.checkpoint_every)
    finally:
        if log_fh:
            log_fh.close()
    tree.save(args.out)
    msg = f"fitted {tree.n_leaves} leaves in {time.time() - t0:.0f}s -> {args.out}"
    eval_views = ds.view_indices("eval")
    if eval_views:
        msg += f" | held-out psnr {evaluate_psnr(tree, ds, eval_views):.2f} dB"
    print(msg)
    return 0


def cmd_render(args) -> int:
    from .images import save_pfm, save_png
    from .octree import VOctree
    from .render import build_frame_cache, composite_background, render

    tree = VOctree.load(args.tree)
    if not (0 <= args.frame < tree.frames):
        raise ValueError(f"frame {args.frame} out of range [0, {tree.frames})")
    if args.camera:
        cam = _camera_from_json(json.loads(Path(args.camera).read_text()))
    else:
        cam = _default_camera(tree, args.width, args.height, args.focal)
    cache = build_frame_cache(tree, args.frame) if args.cached else None
    layer = render(tree, cam, args.frame, cache=cache)
    out = Path(args.out)
    if args.background is not None:
        bg = np.array([float(v) for v in args.background.split(",")])
        save_png(out.with_suffix(".png"), composite_background(layer, bg))
    else:
        save_png(out.with_suffix(".png"), layer.rgb)
    save_pfm(out.parent / (out.stem + "_depth.pfm"), layer.depth.astype(np.float32))
    save_pfm(out.parent / (out.stem + "_alpha.pfm"), layer.alpha.astype(np.float32))
    print(f"wrote {out.with_suffix('.png')} (+depth/alpha pfm)")
    return 0


def cmd_compose(args) -> int:
    from .compose import Scene, render_scene
    from .images import save_png

    scene = Scene.load(args.scene)
    frames = range(scene.frame_range[0], scene.frame_range[1] + 1)
    if args.frames:
        a, b = (int(v) for v in args.frames.split(":"))
        frames = range(a, b + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tree0 = scene.instances[0].tree
    for i, g in enumerate(frames):
        az = args.orbit_start + args.orbit_rate * i
        cam = _default_camera(tree0, args.width, args.height, args.focal, azimuth=az)
        img = render_scene(scene, cam, g)
        save_png(out / f"{i:04d}.png", img)
    print(f"wrote {len(list(frames))} frames to {out}")
    return 0


def cmd_edit_paint(args) -> int:
    from .compose import paint
    from .images import load_png
    from .octree import VOctree

    tree = VOctree.load(args.tree)
    cam = _camera_from_json(json.loads(Path(args.camera).read_text()))
    mask = load_png(args.mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    if mask.shape != (cam.height, cam.width):
        raise ValueError(f"mask is {mask.shape}, camera expects {(cam.height, cam.width)}")
    rgb = tuple(float(v) for v in args.rgb.split(","))
    t0, t1 = (int(v) for v in args.time.split(":"))
    res = paint(tree, cam, mask > 0.5, rgb, (t0, t1), target_density=args.density)
    tree.save(args.out or args.tree)
    print(f"painted {res['edited_voxels']} voxels, skipped {len(res['skipped_pixels'])} rays "
          f"-> {args.out or args.tree}")
    return 0


def cmd_verify_basis(args) -> int:
    from . import hh

    rng = np.random.default_rng(args.seed)
    n = args.samples
    x = rng.normal(size=(n, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    gamma = np.arccos(np.clip(x[:, 0], -1, 1))
    s = np.sin(gamma)
    theta = np.arccos(np.clip(np.divide(x[:, 1], s, where=s > 0, out=np.ones_like(s)), -1, 1))
    phi = np.arctan2(x[:, 3], x[:, 2])
    basis = hh.eval_basis_angles(args.n_max, gamma, theta, phi)
    gram = basis.T @ basis * (2.0 * math.pi**2 / n)
    k = basis.shape[1]
    print(f"n_max={args.n_max}  K={k}  samples={n}")
    with np.printoptions(precision=4, suppress=True, linewidth=200):
        print(gram)
    err = float(np.abs(gram - np.eye(k)).max())
    print(f"max |G - I| = {err:.2e}")
    return 0


def cmd_bench(args) -> int:
    import numba

    from .octree import VOctree
    from .render import build_frame_cache, render

    tree = VOctree.load(args.tree)
    cam = _default_camera(tree, args.size, args.size)
    caches = [build_frame_cache(tree, f) for f in range(tree.frames)]
    render(tree, cam, 0, cache=caches[0])  # warm the kernels
    t0 = time.time()
    n = args.repeats
    for i in range(n):
        f = i % tree.frames
        render(tree, cam, f, cache=caches[f])
    dt = (time.time() - t0) / n
    o, d = cam.rays()
    from . import kernels

    counts = np.empty(len(o), dtype=np.int64)
    kernels.count_segments_kernel(tree.node_child, tree.depth, tree.bbox_lo, tree.side,
                                  o, d, 0.0, 1e30, counts)
    t0 = time.time()
    kernels.count_segments_kernel(tree.node_child, tree.depth, tree.bbox_lo, tree.side,
                                  o, d, 0.0, 1e30, counts)
    trav = time.time() - t0
    print(f"tree: {tree.n_leaves} leaves, depth {tree.depth}, {tree.frames} frames")
    print(f"threads: {numba.get_num_threads()}")
    print(f"cached render {args.size}x{args.size}: {dt * 1000:.0f} ms/frame "
          f"({1.0 / dt:.1f} fps)")
    print(f"traversal: {counts.sum() / trav / 1e6:.1f} Msegments/s "
          f"({len(o) / trav / 1e3:.0f} krays/s)")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.scene, host=args.host, port=args.port, save_on_exit=args.save_on_exit)
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="voxvid", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="'moving-sphere' or a JSON spec file")
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--eval-views", type=int, default=4)
    g.add_argument("--frames", type=int, default=None)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit a VOctree to a dataset")
    f.add_argument("--dataset", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--config", help="key-value config file; flags override it")
    f.add_argument("--log", help="line-delimited progress records")
    f.add_argument("--checkpoint", help="periodic checkpoint path (.voct + .opt.npz sidecar)")
    f.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    f.add_argument("--verbose", action="store_true")
    f.add_argument("--iters", type=int)
    f.add_argument("--stage-iters", help="comma-separated per-stage iterations")
    f.add_argument("--batch-rays", dest="batch_rays", type=int)
    f.add_argument("--coeff-count", dest="coeff_count", type=int)
    f.add_argument("--n-max", dest="n_max", type=int)
    f.add_argument("--lambda-grad", dest="lambda_grad", type=float)
    f.add_argument("--start-resolution", dest="start_resolution", type=int)
    f.add_argument("--final-resolution", dest="final_resolution", type=int)
    f.add_argument("--lr-payload", dest="lr_payload", type=float)
    f.add_argument("--lr-bases", dest="lr_bases", type=float)
    f.add_argument("--prune-every", dest="prune_every", type=int)
    f.add_argument("--prune-threshold", dest="prune_threshold", type=float)
    f.add_argument("--bg-ray-fraction", dest="bg_ray_fraction", type=float)
    f.add_argument("--patch-size", dest="patch_size", type=int)
    f.add_argument("--patches-per-step", dest="patches_per_step", type=int)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render one frame of a .voct tree")
    r.add_argument("--tree", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--camera", help="camera JSON file (c2w or w2c)")
    r.add_argument("--width", type=int, default=400)
    r.add_argument("--height", type=int, default=400)
    r.add_argument("--focal", type=float)
    r.add_argument("--background", help="r,g,b to composite over")
    r.add_argument("--cached", action="store_true", help="use the per-frame slice cache")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("compose", help="render a scene file along an orbit")
    c.add_argument("--scene", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--frames", help="a:b global frame range override")
    c.add_argument("--width", type=int, default=400)
    c.add_argument("--height", type=int, default=400)
    c.add_argument("--focal", type=float)
    c.add_argument("--orbit-start", type=float, default=0.6)
    c.add_argument("--orbit-rate", type=float, default=0.05, help="radians per frame")
    c.set_defaults(func=cmd_compose)

    e = sub.add_parser("edit", help="editing operations")
    esub = e.add_subparsers(dest="edit_command", required=True)
    ep = esub.add_parser("paint", help="paint voxels through a mask image")
    ep.add_argument("--tree", required=True)
    ep.add_argument("--camera", required=True, help="camera JSON file")
    ep.add_argument("--mask", required=True, help="PNG stroke mask")
    ep.add_argument("--rgb", required=True, help="target color r,g,b")
    ep.add_argument("--time", required=True, help="frame range a:b")
    ep.add_argument("--density", type=float, default=None)
    ep.add_argument("--out", help="output .voct (default: in place)")
    ep.set_defaults(func=cmd_edit_paint)

    v = sub.add_parser("verify-basis", help="Monte-Carlo Gram matrix of the HH basis")
    v.add_argument("--n-max", dest="n_max", type=int, default=2)
    v.add_argument("--samples", type=int, default=1_000_000)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_basis)

    b = sub.add_parser("bench", help="traversal and cached-render throughput")
    b.add_argument("--tree", required=True)
    b.add_argument("--size", type=int, default=400)
    b.add_argument("--repeats", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", help="start the interactive edit service")
    s.add_argument("--scene", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--save-on-exit", dest="save_on_exit", default=None,
                   help="write the scene state here on shutdown (default: in place)")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (_UsageError, BrokenPipeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
