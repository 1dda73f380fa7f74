"""Command-line front end: rendering, EPI analysis, opacity profiles,
verification suites, dataset generation, and training.

Exit codes: 0 on success, 1 on validation or IO failure, 2 when a
verification suite fails. Every command that takes --seed is reproducible
in sequential mode. Worker count comes from --threads, falling back to the
EVER_THREADS environment variable, then 1.
"""

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, figures, sceneio, verify
from .demo import (
    build_synthetic_dataset,
    desk_train_config,
    make_flatland_scene,
    make_overlap_demo_scene,
    orbit_camera,
    perturbed_init,
)
from .renderer import RenderSettings, density_profile, render_image, render_rows
from .scene import validate_scene
from .training import TrainConfig, psnr, train

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_SUITE_FAILED = 2


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("EVER_THREADS")
    return int(env) if env else 1


def _load_valid_scene(path):
    try:
        scene = sceneio.load_scene(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot load scene {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)
    violations = validate_scene(scene)
    if violations:
        for v in violations:
            print(f"invalid scene: {v}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)
    return scene


def _resolve_camera(args, scene_path):
    if args.camera:
        cams = sceneio.load_cameras(args.camera)
    else:
        cams = sceneio.load_cameras(scene_path)
    if not cams:
        print("error: no camera found; pass --camera", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)
    idx = args.camera_index
    if not 0 <= idx < len(cams):
        print(f"error: camera index {idx} out of range ({len(cams)} cameras)", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)
    return cams[idx][0]


def _render_mode(scene, camera, settings, mode):
    if mode == "exact":
        return render_image(scene, camera, settings)
    if mode == "splatted":
        return baselines.render_splatted(scene, camera, settings)
    if mode == "nomix":
        return baselines.render_no_mixing(scene, camera, settings)
    raise ValueError(f"unknown mode {mode!r}")


def cmd_render(args):
    scene = _load_valid_scene(args.scene)
    camera = _resolve_camera(args, args.scene)
    settings = RenderSettings(
        spp=args.spp, jitter=args.jitter, t_stop=args.t_stop, seed=args.seed,
        threads=_threads(args),
    )
    t0 = time.perf_counter()
    image = _render_mode(scene, camera, settings, args.mode)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sceneio.write_ppm(out.with_suffix(".ppm"), image)
    sceneio.write_float_image(out.with_suffix(".flt"), image)
    if args.png:
        figures.save_image_png(out.with_suffix(".png"), image)
    rays = camera.width * camera.height * args.spp
    print(f"rendered {camera.width}x{camera.height} ({args.mode}) in {elapsed:.2f}s "
          f"({rays / max(elapsed, 1e-9):,.0f} rays/s)")
    print(f"wrote {out.with_suffix('.ppm')} and {out.with_suffix('.flt')}")
    return EXIT_OK


def epi_metrics(epi: np.ndarray):
    """Max inter-frame per-pixel jump and per-pixel total variation."""
    diffs = np.abs(np.diff(epi, axis=0))
    max_jump = float(diffs.max()) if diffs.size else 0.0
    tv = float(diffs.sum(axis=0).max()) if diffs.size else 0.0
    return max_jump, tv


def render_epi(scene, mode, center, radius, n_frames, row, width, height,
               angle_start, angle_span, fov_deg, seed=0, t_stop=1e-4):
    epi = np.zeros((n_frames, width, 3))
    settings = RenderSettings(spp=1, jitter=False, t_stop=t_stop, seed=seed)
    for i in range(n_frames):
        angle = angle_start + angle_span * (i + 0.5) / n_frames
        cam = orbit_camera(center, radius, angle, width=width, height=height,
                           fov_x=math.radians(fov_deg))
        if mode == "exact":
            epi[i] = render_rows(scene, cam, [row], settings)[0]
        else:
            epi[i] = baselines.render_rows_baseline(
                scene, cam, [row], settings, "splatted" if mode == "splatted" else "nomix"
            )[0]
    return epi


def cmd_epi(args):
    scene = _load_valid_scene(args.scene)
    if args.n_frames < 2:
        print("error: --n-frames must be at least 2", file=sys.stderr)
        return EXIT_INVALID
    if not 0 <= args.row < args.height:
        print(f"error: --row {args.row} outside image height {args.height}", file=sys.stderr)
        return EXIT_INVALID
    center = [float(x) for x in args.center.split(",")]
    epi = render_epi(
        scene, args.mode, center, args.radius, args.n_frames, args.row,
        args.width, args.height, args.angle_start, args.angle_span, args.fov,
        seed=args.seed, t_stop=args.t_stop,
    )
    max_jump, tv = epi_metrics(epi)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sceneio.write_ppm(out.with_suffix(".ppm"), epi)
    sceneio.write_float_image(out.with_suffix(".flt"), epi)
    figures.save_epi_figure(out.with_suffix(".png"), epi, args.mode, max_jump)
    report = out.parent / (out.stem + "_report.csv")
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "n_frames", "max_inter_frame_jump", "max_total_variation"])
        writer.writerow([args.mode, args.n_frames, f"{max_jump:.9g}", f"{tv:.9g}"])
    print(f"{args.mode} EPI over {args.n_frames} frames: max jump {max_jump:.3e}, "
          f"total variation {tv:.3e}")
    print(f"wrote {out.with_suffix('.ppm')}, {out.with_suffix('.png')}, {report}")
    return EXIT_OK


def profile_transition_width(offsets: np.ndarray, opacities: np.ndarray) -> float:
    """Measure of offsets where the curve transitions between 10% and 90% of peak."""
    peak = opacities.max()
    if peak <= 0:
        return 0.0
    inside = (opacities > 0.1 * peak) & (opacities < 0.9 * peak)
    if len(offsets) < 2:
        return 0.0
    return float(inside.sum() * (offsets[1] - offsets[0]))


def cmd_profile(args):
    sigmas = [float(s) for s in args.sigmas.split(",")]
    offsets = np.arange(-args.b_max, args.b_max + 1e-12, args.step)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curves = {}
    widths = {}
    for sigma in sigmas:
        curve = density_profile(sigma, offsets)
        curves[f"{sigma:g}"] = curve
        widths[f"{sigma:g}"] = profile_transition_width(offsets, curve)
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["offset"] + [f"sigma_{k}" for k in curves])
        for i, b in enumerate(offsets):
            writer.writerow([f"{b:.9g}"] + [f"{curves[k][i]:.9g}" for k in curves])
    figures.save_profile_figure(out.with_suffix(".png"), offsets, curves)
    for k, w in widths.items():
        print(f"sigma {k}: peak {curves[k].max():.4f}, 10-90% transition width {w:.4f}")
    print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.png')}")
    return EXIT_OK


def cmd_verify(args):
    if args.scene:
        try:
            scene = sceneio.load_scene(args.scene)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            print(f"error: cannot load scene {args.scene}: {exc}", file=sys.stderr)
            return EXIT_INVALID
        violations = validate_scene(scene)
        if violations:
            for v in violations:
                print(f"invalid scene: {v}", file=sys.stderr)
            print("validation failed; suites skipped", file=sys.stderr)
            return EXIT_INVALID
        print(f"scene {args.scene}: {len(scene.primitives)} primitives, valid")
    reports = verify.run_all(
        oracle_scenes=args.random, bvh_rays=args.rays, grad_scenes=args.grad_scenes,
        seed=args.seed, oracle_steps=args.steps,
    )
    failed = False
    for rep in reports:
        status = "PASS" if rep["passed"] else "FAIL"
        failed |= not rep["passed"]
        extra = ""
        if "convergence_order" in rep:
            extra = f", convergence order {rep['convergence_order']:.2f}"
        if "mismatches" in rep:
            extra = f", mismatches {rep['mismatches']}"
        print(f"[{status}] {rep['name']}: worst {rep['worst']:.3e} "
              f"(tolerance {rep['tolerance']:.0e}){extra}")
    return EXIT_SUITE_FAILED if failed else EXIT_OK


def cmd_make_scene(args):
    scene = make_flatland_scene() if args.preset == "flatland" else make_overlap_demo_scene()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sceneio.save_scene(out, scene)
    print(f"wrote {out} ({len(scene.primitives)} primitives)")
    return EXIT_OK


def cmd_make_dataset(args):
    scene, cams, images, splits = build_synthetic_dataset(
        n_primitives=args.n_primitives,
        n_train=args.train_views,
        n_test=args.test_views,
        resolution=args.resolution,
        seed=args.seed,
    )
    out = Path(args.out)
    sceneio.save_dataset(out, scene, cams, images, splits)
    init = perturbed_init(scene, seed=args.seed + 1)
    sceneio.save_scene(out / "init_scene.json", init)
    config = desk_train_config(seed=args.seed)
    (out / "config.json").write_text(json.dumps(config.__dict__, indent=1))
    print(f"wrote dataset to {out}: {len(cams)} views "
          f"({splits.count('train')} train / {splits.count('test')} test), "
          f"gt {len(scene.primitives)} primitives, init {len(init.primitives)}")
    return EXIT_OK


def _load_train_config(path) -> TrainConfig:
    doc = json.loads(Path(path).read_text())
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return TrainConfig(**doc)


def cmd_train(args):
    try:
        gt_scene, views = sceneio.load_dataset(args.dataset)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: cannot load dataset {args.dataset}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        config = _load_train_config(args.config) if args.config else desk_train_config()
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.steps:
        config.max_steps = args.steps
    if args.seed is not None:
        config.seed = args.seed

    train_views = [(c, img) for c, img, s in views if s == "train" and img is not None]
    test_views = [(c, img) for c, img, s in views if s == "test" and img is not None]
    if not train_views:
        print("error: dataset has no training views", file=sys.stderr)
        return EXIT_INVALID

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_step = 0
    adam_state = None
    if args.resume:
        init_scene, start_step, moments = sceneio.load_checkpoint(args.resume)
        from .training import AdamState, _Params

        adam_state = AdamState(_Params(init_scene))
        adam_state.load(moments)
        print(f"resumed from {args.resume} at step {start_step}")
    elif args.init:
        init_scene = _load_valid_scene(args.init)
    else:
        dataset_dir = Path(args.dataset)
        bundled = (dataset_dir if dataset_dir.is_dir() else dataset_dir.parent) / "init_scene.json"
        init_scene = _load_valid_scene(bundled) if bundled.exists() else gt_scene.copy()

    t0 = time.perf_counter()
    scene, metrics, adam = train(
        init_scene, train_views, config, start_step=start_step, adam_state=adam_state,
        stop_step=args.stop_at,
    )
    elapsed = time.perf_counter() - t0

    end_step = start_step + len(metrics)
    sceneio.save_checkpoint(out / "checkpoint.json", scene, end_step, adam.export())
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "loss", "psnr", "n_primitives", "fps"])
        writer.writeheader()
        writer.writerows(metrics)
    figures.save_metrics_figure(out / "metrics.png", metrics)

    eval_settings = RenderSettings(spp=1, jitter=False, t_stop=0.0, seed=0)
    rows = []
    for mode in ("exact", "splatted", "nomix"):
        vals = [
            psnr(_render_mode(scene, cam, eval_settings, mode), img)
            for cam, img in test_views
        ]
        mean = float(np.mean(vals)) if vals else float("nan")
        rows.append({"mode": mode, "held_out_psnr": mean})
        print(f"held-out PSNR ({mode}): {mean:.2f} dB")
    with open(out / "eval.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["mode", "held_out_psnr"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"trained {len(metrics)} steps in {elapsed:.0f}s; "
          f"final {len(scene.primitives)} primitives; wrote {out}/checkpoint.json, "
          f"metrics.csv, metrics.png, eval.csv")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ellipray",
        description="Exact constant-density ellipsoid volume renderer and trainer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a scene to PPM + float dump")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", help="camera JSON (defaults to cameras embedded in the scene)")
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--mode", choices=["exact", "splatted", "nomix"], default="exact")
    p.add_argument("--spp", type=int, default=1)
    p.add_argument("--jitter", action="store_true")
    p.add_argument("--t-stop", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--png", action="store_true", help="also write a preview PNG")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("epi", help="orbit a camera and stack one scanline per frame")
    p.add_argument("--scene", required=True)
    p.add_argument("--center", default="0,0,0")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--n-frames", type=int, default=512)
    p.add_argument("--row", type=int, default=4)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=9)
    p.add_argument("--angle-start", type=float, default=0.0, help="radians")
    p.add_argument("--angle-span", type=float, default=2.0 * math.pi, help="radians")
    p.add_argument("--fov", type=float, default=12.0, help="horizontal fov, degrees")
    p.add_argument("--mode", choices=["exact", "splatted", "nomix"], default="exact")
    p.add_argument("--t-stop", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_epi)

    p = sub.add_parser("profile", help="opacity profiles across a unit sphere")
    p.add_argument("--sigmas", default="1,3,100", help="comma-separated densities")
    p.add_argument("--b-max", type=float, default=1.2)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--scene", help="validate this scene document first")
    p.add_argument("--random", type=int, default=100, help="oracle suite scene count")
    p.add_argument("--rays", type=int, default=100_000, help="BVH suite ray count")
    p.add_argument("--steps", type=int, default=1 << 17, help="oracle step count")
    p.add_argument("--grad-scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("make-scene", help="write a bundled demo scene")
    p.add_argument("--preset", choices=["flatland", "overlap"], default="flatland")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_scene)

    p = sub.add_parser("make-dataset", help="generate the synthetic posed-image dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-primitives", type=int, default=32)
    p.add_argument("--train-views", type=int, default=24)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_dataset)

    p = sub.add_parser("train", help="optimize a scene against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="TrainConfig JSON (defaults to the desk-scale recipe)")
    p.add_argument("--init", help="initial scene (defaults to the dataset's init_scene.json)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override max_steps")
    p.add_argument("--stop-at", type=int, default=None,
                   help="pause after this step, keeping schedules pinned to max_steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_train)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return code


if __name__ == "__main__":
    sys.exit(main())
