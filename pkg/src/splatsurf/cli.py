"""Command-line surface: train, render, extract-mesh, eval, gradcheck.

Single process; exit codes are 0 ok, 1 usage/IO, 2 numerical failure,
3 empty result. All outputs land under --out.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import gradients as gradients_mod
from .adaptive import DensifyConfig
from .gradients import gradcheck
from .harness import SceneSpec, TrainAbort, train
from .imgio import save_normal_png, save_pfm, save_png
from .losses import LossWeights
from .meshing import (TsdfVolume, evaluate_chamfer, evaluate_fscore,
                      fuse_depth, load_mesh, marching_cubes)
from .rasterizer import rasterize
from .scene import load_ply

GRADCHECK_TOLERANCES = {"rgb": 1e-4, "scale": 1e-4, "normal": 1e-4,
                        "d_normal": 1e-3}
GT_SAMPLE_POINTS = 20000


def _load_spec(path: str) -> SceneSpec:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"scene spec not found: {path}")
    with open(path) as f:
        return SceneSpec.from_yaml(f.read())


def _load_scene(path: str):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return load_ply(f.read())


def _weights(args) -> LossWeights:
    kw = {}
    for name in ("lambda1", "lambda2", "lambda3", "gamma"):
        value = getattr(args, name)
        if value is not None:
            kw[name] = value
    return LossWeights(**kw)


def _dtype(args):
    return np.float32 if args.precision == "f32" else np.float64


def cmd_train(args) -> int:
    spec = _load_spec(args.scene)
    weights = _weights(args)
    cfg = DensifyConfig()
    if args.beta is not None:
        cfg.scale_threshold = args.beta
    os.makedirs(args.out, exist_ok=True)
    try:
        result = train(spec, weights=weights, cfg=cfg, iters=args.iters,
                       seed=args.seed, out_dir=args.out, threads=args.threads,
                       deterministic=args.deterministic,
                       checkpoint_every=args.checkpoint_every)
    except TrainAbort as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 2
    print(f"trained {args.iters} iterations, {len(result.scene)} gaussians; "
          f"outputs in {args.out}")
    return 0


def _render_views(scene, cameras, out_dir: str, dtype, threads: int):
    os.makedirs(out_dir, exist_ok=True)
    for i, cam in enumerate(cameras):
        buf = rasterize(scene, cam, dtype=dtype, threads=threads)
        save_png(os.path.join(out_dir, f"view_{i:03d}_rgb.png"), buf.color)
        save_pfm(os.path.join(out_dir, f"view_{i:03d}_depth.pfm"),
                 buf.depth_mean)
        save_pfm(os.path.join(out_dir, f"view_{i:03d}_normal.pfm"),
                 buf.normal_mean)
        save_normal_png(os.path.join(out_dir, f"view_{i:03d}_normal.png"),
                        buf.normal_mean)


def cmd_render(args) -> int:
    spec = _load_spec(args.scene)
    scene = _load_scene(args.checkpoint)
    _render_views(scene, spec.cameras(), args.out, _dtype(args), args.threads)
    print(f"rendered {spec.camera_count()} views to {args.out}")
    return 0


def cmd_extract_mesh(args) -> int:
    spec = _load_spec(args.scene)
    scene = _load_scene(args.checkpoint)
    volume = TsdfVolume.for_cuboid(scene.cuboid, voxel_size=args.voxel_size)
    n_vox = int(np.prod(volume.dims))
    print(f"grid {volume.dims[0]}x{volume.dims[1]}x{volume.dims[2]} "
          f"({n_vox} voxels, voxel {volume.voxel_size:.6g})")
    dtype = _dtype(args)
    for cam in spec.cameras():
        buf = rasterize(scene, cam, dtype=dtype, threads=args.threads)
        fuse_depth(volume, buf.depth_mean, cam, buf.alpha > 0.5)
    mesh = marching_cubes(volume)
    if len(mesh) == 0:
        print("no surface", file=sys.stderr)
        return 3
    os.makedirs(args.out, exist_ok=True)
    mesh.save_obj(os.path.join(args.out, "mesh.obj"))
    mesh.save_ply(os.path.join(args.out, "mesh.ply"))
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh)} triangles")
    return 0


def cmd_eval(args) -> int:
    spec = _load_spec(args.scene)
    if not os.path.isfile(args.mesh):
        raise FileNotFoundError(f"mesh not found: {args.mesh}")
    mesh = load_mesh(args.mesh)
    if len(mesh) == 0:
        print("empty mesh", file=sys.stderr)
        return 3
    rng = np.random.default_rng(args.seed)
    per = max(1, GT_SAMPLE_POINTS // len(spec.primitives))
    gt = np.concatenate([p.surface_points(per, rng) for p in spec.primitives])
    precision, recall, fscore = evaluate_fscore(mesh, gt, args.tau,
                                                n_samples=GT_SAMPLE_POINTS,
                                                rng=rng)
    pred_pts = mesh.sample_points(GT_SAMPLE_POINTS, rng)
    chamfer = evaluate_chamfer(pred_pts, gt)
    row = (f"{precision:.6f},{recall:.6f},{fscore:.6f},{chamfer:.6g}")
    print("precision,recall,fscore,chamfer")
    print(row)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w") as f:
            f.write("precision,recall,fscore,chamfer\n" + row + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    if os.environ.get("SPLATSURF_SABOTAGE_GRADS"):
        # negative-control fixture: corrupt analytic position gradients so
        # the oracle comparison must fail
        orig = gradients_mod.backward

        def sabotaged(*a, **kw):
            g = orig(*a, **kw)
            g.d_positions = -g.d_positions
            return g

        gradients_mod.backward = sabotaged
    rng = np.random.default_rng(args.seed)
    report = gradcheck(rng, n_scenes=args.scenes)
    lines = ["loss,param_class,max_rel_err,skipped"]
    ok = True
    for term, param, err, skipped in report["rows"]:
        lines.append(f"{term},{param},{err:.6g},{skipped}")
        if err > GRADCHECK_TOLERANCES[term]:
            ok = False
    text = "\n".join(lines)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.csv"), "w") as f:
            f.write(text + "\n")
    print(f"worst {report['worst']:.3g} over {report['evaluated']} coords, "
          f"{report['skipped_total']} skipped: "
          + ("PASS" if ok else "FAIL"))
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatsurf",
                                description="Differentiable surface "
                                "reconstruction from flattened splats.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene=True):
        if scene:
            sp.add_argument("--scene", required=True,
                            help="scene spec YAML path")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--deterministic", action="store_true",
                        help="force single-thread deterministic reductions")
        sp.add_argument("--precision", choices=("f32", "f64"), default="f64",
                        help="render precision (training always runs f64)")

    t = sub.add_parser("train", help="optimize a splat scene")
    common(t)
    t.add_argument("--iters", type=int, default=1500)
    t.add_argument("--lambda1", type=float, default=None,
                   help="scale-flattening weight")
    t.add_argument("--lambda2", type=float, default=None,
                   help="rendered-normal weight")
    t.add_argument("--lambda3", type=float, default=None,
                   help="depth-normal weight (0 = ablation)")
    t.add_argument("--gamma", type=float, default=None,
                   help="confidence sharpness")
    t.add_argument("--beta", type=float, default=None,
                   help="densify scale threshold (fraction of extent)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True, help="scene PLY path")
    r.set_defaults(fn=cmd_render)

    m = sub.add_parser("extract-mesh", help="TSDF-fuse and extract a mesh")
    common(m)
    m.add_argument("--checkpoint", required=True, help="scene PLY path")
    m.add_argument("--voxel-size", type=float, default=None,
                   help="voxel edge length (default: longest side / 128)")
    m.set_defaults(fn=cmd_extract_mesh)

    e = sub.add_parser("eval", help="score a mesh against the analytic spec")
    e.add_argument("--scene", required=True, help="scene spec YAML path")
    e.add_argument("--mesh", required=True, help="mesh OBJ/PLY path")
    e.add_argument("--tau", type=float, default=0.05,
                   help="F-score distance threshold")
    e.add_argument("--out", default=None, help="optional output directory")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--out", default=None, help="optional output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=20)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; the contract reserves 2 for
        # numerical failures and 1 for usage/IO
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
