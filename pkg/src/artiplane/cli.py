"""Command-line interface.

Subcommands: render, train-dso, benchmark, eval, sample-pose, make-scene.
Every run resolves its configuration (config file < flags), writes the
resolved values to `manifest.json` in the output directory, and exits 0 on
success, 2 on validation errors, 3 on numerical failure, 4 on I/O errors.

Rerunning any command with the manifest's configuration reproduces outputs
bit for bit at any `--threads` value: randomness is counter-based per pixel
and thread workers only fill disjoint, pre-assigned chunks.  Wall-clock
readings go to separate timing files so the deterministic logs stay
byte-comparable.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .diffengine import AdamState
from .errors import NumericalError, ValidationError
from .harness import (SyntheticScene, benchmark_compare, dataset_split, make_camera_ring,
                      make_synthetic_scene, oracle_render, scene_to_dict)
from .io import (camera_from_dict, load_json, pose_from_dict, pose_to_dict, save_json,
                 save_png, save_raw)
from .kinematics import GaussianPosePrior, rasterize_bones, sample_pose_gaussian
from .objectives import TrainConfig, evaluate_frames, train_dso
from .renderer import RenderOutput, SamplingConfig, composite_background, render_image
from .variants import VARIANTS, Model, ModelConfig


def _load_scene(arg: str, seed: int) -> SyntheticScene:
    p = Path(arg)
    if p.suffix == ".json" and p.exists():
        return make_synthetic_scene(load_json(p), seed)
    return make_synthetic_scene(arg, seed)


def _model_for_scene(scene: SyntheticScene, variant: str, resolution: int,
                     dtype: str, seed: int) -> Model:
    cfg = ModelConfig(variant=variant, k=scene.k, resolution=resolution,
                      cube_half=scene.cube_half, dtype=dtype)
    return Model(cfg, scene.canonical(), seed=seed)


def _write_manifest(out: Path, command: str, config: dict, outputs: list):
    save_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "config": config,
        "outputs": sorted(outputs),
    })


def _write_csv(path: Path, rows: list, columns: list):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def _save_render(out: Path, stem: str, ro: RenderOutput) -> list:
    save_png(out / f"{stem}.png", ro.rgb)
    save_png(out / f"{stem}_mask.png", ro.mask)
    save_raw(out / f"{stem}_rgb.npy", ro.rgb)
    save_raw(out / f"{stem}_mask.npy", ro.mask)
    save_raw(out / f"{stem}_invdepth.npy", ro.inv_depth)
    return [f"{stem}.png", f"{stem}_mask.png", f"{stem}_rgb.npy",
            f"{stem}_mask.npy", f"{stem}_invdepth.npy"]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--scene", default="capsule2", help="preset name or scene.json path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resolution", type=int, default=64, help="image width/height in px")
    p.add_argument("--threads", type=int, default=1)


def _merged(args, keys: list) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg.update(load_json(args.config))
    for k in keys:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            cfg[k] = v
    return cfg


# ---------------------------------------------------------------- commands

def cmd_render(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _load_scene(args.scene, args.seed)
    if args.ckpt:
        model, _ = Model.load(args.ckpt)
    else:
        model = _model_for_scene(scene, args.variant, args.resolution, "float32", args.seed)
    if args.pose:
        pose = pose_from_dict(load_json(args.pose))
        time_t = args.time
    else:
        pose = scene.pose_at(args.time)
        time_t = args.time
    if args.camera:
        cam = camera_from_dict(load_json(args.camera))
    else:
        cam = make_camera_ring(1, width=args.resolution)[0]
    with ad.no_grad():
        fn = model.field_fn(pose, time_t)
        ro = render_image(fn, cam, seed=args.seed, aabbs=model.world_aabbs(pose),
                          threads=args.threads, view_dirs=model.config.use_view_dir)
    outputs = _save_render(out, "render", ro)
    if args.oracle:
        oo = oracle_render(scene, pose, cam, t=time_t)
        outputs += _save_render(out, "oracle", oo)
    if args.bg:
        bg_col = np.array([float(x) for x in args.bg.split(",")])
        bg = np.broadcast_to(bg_col, (*ro.rgb.shape[:2], 3))
        save_png(out / "composite.png", composite_background(ro, bg))
        outputs.append("composite.png")
    cfg = _merged(args, ["scene", "seed", "resolution", "threads", "variant",
                         "pose", "camera", "ckpt", "time", "bg", "oracle"])
    _write_manifest(out, "render", cfg, outputs)
    return 0


def cmd_train_dso(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _load_scene(args.scene, args.seed)
    tc = TrainConfig(ray_batch=args.batch, iterations=args.iters, variant=args.variant,
                     seed=args.seed, eval_every=args.eval_every, threads=args.threads,
                     lambda_l2=args.lambda_l2)
    train, test_view, test_pose = dataset_split(
        scene, n_views=args.views + 1, n_times=args.times, width=args.resolution,
        train_views=args.views)
    if args.resume:
        model, adam = Model.load(args.resume)
        if adam is not None:
            adam.lr, adam.decay = tc.lr, tc.lr_decay
    else:
        model = _model_for_scene(scene, args.variant, args.plane_resolution,
                                 "float32", args.seed)
        adam = AdamState.for_params(model.params, lr=tc.lr, decay=tc.lr_decay)
    _, log = train_dso(model, train, tc, eval_frames=test_view, adam=adam)
    model.save(out / "checkpoint.ckpt", adam=adam)
    metric_cols = ["iteration", "loss", "psnr", "ssim", "mask_mae"]
    _write_csv(out / "metrics.csv", log, metric_cols)
    _write_csv(out / "timing.csv", log, ["iteration", "seconds"])
    agg_pose, _ = evaluate_frames(model, test_pose, tc.sampling, seed=tc.seed,
                                  threads=tc.threads)
    save_json(out / "heldout_pose.json", agg_pose)
    fr = test_view[0]
    with ad.no_grad():
        fn = model.field_fn(fr.pose, fr.t)
        ro = render_image(fn, fr.camera, seed=tc.seed, aabbs=model.world_aabbs(fr.pose),
                          threads=tc.threads, view_dirs=model.config.use_view_dir)
    outputs = _save_render(out, "final_view", ro)
    outputs += ["checkpoint.ckpt", "metrics.csv", "timing.csv", "heldout_pose.json"]
    cfg = _merged(args, ["scene", "seed", "resolution", "threads", "variant", "iters",
                         "batch", "views", "times", "eval-every", "plane-resolution",
                         "lambda-l2", "resume"])
    _write_manifest(out, "train-dso", cfg, outputs)
    return 0


def cmd_benchmark(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _load_scene(args.scene, args.seed)
    cam = make_camera_ring(1, width=args.resolution)[0]
    variants = [v.strip() for v in args.variants.split(",")]
    reports = benchmark_compare(variants, scene, cam, repetitions=args.reps,
                                seed=args.seed, threads=args.threads,
                                resolution=args.plane_resolution, chunk=args.chunk)
    rows = [r.row() for r in reports]
    _write_csv(out / "cost_table.csv", rows,
               ["variant", "flops", "seconds", "peak_bytes", "param_bytes"])
    save_json(out / "breakdown.json", {r.variant: r.breakdown for r in reports})
    cfg = _merged(args, ["scene", "seed", "resolution", "threads", "variants",
                         "reps", "plane-resolution", "chunk"])
    _write_manifest(out, "benchmark", cfg, ["cost_table.csv", "breakdown.json"])
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _load_scene(args.scene, args.seed)
    model, _ = Model.load(args.ckpt)
    _, test_view, test_pose = dataset_split(
        scene, n_views=args.views + 1, n_times=args.times,
        width=args.resolution, train_views=args.views)
    rows = []
    for split, frames in (("novel-view", test_view), ("novel-pose", test_pose)):
        agg, per = evaluate_frames(model, frames, seed=args.seed, threads=args.threads)
        for i, r in enumerate(per):
            rows.append({"split": split, "frame": i, **r})
        rows.append({"split": split, "frame": "mean", **agg})
    _write_csv(out / "eval.csv", rows, ["split", "frame", "psnr", "ssim", "mask_mae"])
    cfg = _merged(args, ["scene", "seed", "resolution", "threads", "ckpt",
                         "views", "times"])
    _write_manifest(out, "eval", cfg, ["eval.csv"])
    return 0


def cmd_sample_pose(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = _load_scene(args.scene, args.seed)
    if args.prior:
        d = load_json(args.prior)
        prior = GaussianPosePrior(np.asarray(d["means"]), np.asarray(d["covariances"]))
    else:
        prior = GaussianPosePrior(scene.base_angles,
                                  np.tile(np.eye(3) * 0.05, (scene.k, 1, 1)))
    g = np.random.Generator(np.random.Philox(args.seed))
    outputs = []
    cam = make_camera_ring(1, width=args.resolution)[0]
    for i in range(args.n):
        pose = sample_pose_gaussian(prior, scene.skeleton, scene.lengths, g,
                                    root=scene.root)
        name = f"pose_{i:04d}.json"
        save_json(out / name, pose_to_dict(pose))
        outputs.append(name)
        if args.render_bones:
            b = rasterize_bones(pose, scene.skeleton, cam)
            save_png(out / f"bones_{i:04d}.png", b.astype(np.float64))
            outputs.append(f"bones_{i:04d}.png")
    cfg = _merged(args, ["scene", "seed", "resolution", "n", "prior", "render-bones"])
    _write_manifest(out, "sample-pose", cfg, outputs)
    return 0


def cmd_make_scene(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_synthetic_scene(args.preset, args.seed)
    save_json(out / "scene.json", scene_to_dict(scene))
    outputs = ["scene.json"]
    if args.preview:
        cam = make_camera_ring(1, width=args.resolution)[0]
        ro = oracle_render(scene, scene.pose_at(0.0), cam, t=0.0)
        save_png(out / "preview.png", ro.rgb)
        outputs.append("preview.png")
    cfg = _merged(args, ["preset", "seed", "resolution", "preview"])
    _write_manifest(out, "make-scene", cfg, outputs)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="artiplane",
                                 description="articulated tri-plane radiance fields")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render one frame from a model or fresh init")
    _add_common(p)
    p.add_argument("--variant", default="enarf", choices=VARIANTS)
    p.add_argument("--ckpt", help="checkpoint to render from")
    p.add_argument("--pose", help="pose JSON; defaults to the scene pose at --time")
    p.add_argument("--camera", help="camera JSON; defaults to the ring camera 0")
    p.add_argument("--time", type=float, default=0.0)
    p.add_argument("--bg", help="background color r,g,b for compositing")
    p.add_argument("--oracle", action="store_true", help="also render the analytic ground truth")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("train-dso", help="overfit a variant to an animated scene")
    _add_common(p)
    p.add_argument("--variant", default="enarf", choices=VARIANTS)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--views", type=int, default=4, help="training cameras")
    p.add_argument("--times", type=int, default=10, help="animation frames")
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--plane-resolution", type=int, default=64)
    p.add_argument("--lambda-l2", type=float, default=1e-4)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train_dso)

    p = sub.add_parser("benchmark", help="cost comparison across variants")
    _add_common(p)
    p.add_argument("--variants", default="enarf,mlp-selector,baseline-narf")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--plane-resolution", type=int, default=64)
    p.add_argument("--chunk", type=int, default=1024)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("eval", help="score a checkpoint on held-out view/pose splits")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--times", type=int, default=10)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sample-pose", help="draw poses from the joint-angle prior")
    _add_common(p)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--prior", help="JSON with per-joint means/covariances")
    p.add_argument("--render-bones", action="store_true")
    p.set_defaults(fn=cmd_sample_pose)

    p = sub.add_parser("make-scene", help="write a scene JSON from a preset")
    _add_common(p)
    p.add_argument("--preset", default="capsule2")
    p.add_argument("--preview", action="store_true")
    p.set_defaults(fn=cmd_make_scene)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
