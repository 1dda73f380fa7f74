"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report. The training-dependent criteria share one module-scoped run.
"""

import math
import time

import numpy as np
import pytest

from ellipray import batched
from ellipray.backward import finite_difference_check
from ellipray.cli import epi_metrics, profile_transition_width, render_epi
from ellipray.contraction import contract, uncontract
from ellipray.demo import (
    build_synthetic_dataset,
    desk_train_config,
    make_flatland_scene,
    orbit_camera,
    perturbed_init,
)
from ellipray.geometry import Ray, generate_rays
from ellipray.renderer import RenderSettings, density_profile, render_image
from ellipray.scene import Scene, SceneArrays, sigma_from_alpha
from ellipray.training import psnr, train
from ellipray.verify import bvh_suite, gradient_suite, oracle_suite

EVAL_SETTINGS = RenderSettings(spp=1, jitter=False, t_stop=0.0, seed=0)


def report(num, name, passed, detail):
    status = "PASS" if passed else "FAIL"
    print(f"\n[{status}] criterion {num} ({name}): {detail}")
    assert passed, f"criterion {num} ({name}): {detail}"


@pytest.fixture(scope="module")
def training_run():
    """The desk-scale dataset and its trained scene, shared by criteria 9 and 10."""
    wall_start = time.perf_counter()
    gt_scene, cams, images, splits = build_synthetic_dataset(
        n_primitives=32, n_train=24, n_test=4, resolution=128, seed=0
    )
    train_views = [(c, i) for c, i, s in zip(cams, images, splits) if s == "train"]
    test_views = [(c, i) for c, i, s in zip(cams, images, splits) if s == "test"]
    init = perturbed_init(gt_scene, seed=1)
    config = desk_train_config()
    t0 = time.perf_counter()
    counts = []
    scene, metrics, _ = train(
        init, train_views, config,
        on_step=lambda step, params, row, adc: counts.append(row["n_primitives"]),
    )
    train_seconds = time.perf_counter() - t0
    return {
        "gt": gt_scene,
        "train_views": train_views,
        "test_views": test_views,
        "init": init,
        "config": config,
        "scene": scene,
        "metrics": metrics,
        "counts": counts,
        "train_seconds": train_seconds,
        "wall_seconds": time.perf_counter() - wall_start,
    }


def test_criterion_1_exactness_vs_quadrature_oracle():
    t0 = time.perf_counter()
    rep = oracle_suite(n_scenes=100, n_steps=1 << 17, seed=0, convergence_scenes=40)
    elapsed = time.perf_counter() - t0
    detail = (
        f"worst |exact - oracle| {rep['worst']:.3e} (< 1e-6), "
        f"convergence order {rep['convergence_order']:.2f} (halving within +-20%), "
        f"runtime {elapsed:.0f}s (< 300s)"
    )
    report(1, "exactness vs quadrature oracle", rep["passed"] and elapsed < 300, detail)


def test_criterion_2_bvh_completeness():
    rep = bvh_suite(n_rays=100_000, seed=0)
    detail = (
        f"100000 rays, {rep['mismatches']} set mismatches, "
        f"worst t deviation {rep['worst']:.3e} (<= 1e-12)"
    )
    report(2, "BVH completeness", rep["passed"], detail)


def test_criterion_3_order_invariance():
    rng = np.random.default_rng(0)
    worst = 0.0
    from ellipray.demo import make_random_scene, sphere_cameras

    for k in range(5):
        scene = make_random_scene(int(rng.integers(4, 64)), seed=60 + k)
        cam = sphere_cameras(1, (0, 0, 0), 4.5, 32, 32)[0]
        base = render_image(scene, cam, EVAL_SETTINGS)
        perm = rng.permutation(len(scene.primitives))
        shuffled = scene.copy()
        shuffled.primitives = [scene.primitives[i] for i in perm]
        out = render_image(shuffled, cam, EVAL_SETTINGS)
        worst = max(worst, float(np.abs(base - out).max()))
    report(
        3,
        "order invariance",
        worst <= 1e-12,
        f"max pixel change under primitive permutation {worst:.3e} (<= 1e-12)",
    )


def test_criterion_4_flatland_epi():
    scene = make_flatland_scene()
    center, radius, row, width, height = (0, 0, 0), 4.0, 4, 128, 9
    start, span, fov = math.pi / 2 - 0.1, 0.2, 12.0

    def run(mode, frames):
        return render_epi(scene, mode, center, radius, frames, row, width, height,
                          start, span, fov, t_stop=0.0)

    exact_512 = epi_metrics(run("exact", 512))[0]
    exact_1024 = epi_metrics(run("exact", 1024))[0]
    splat_512 = epi_metrics(run("splatted", 512))[0]
    splat_1024 = epi_metrics(run("splatted", 1024))[0]
    scaling = exact_1024 / exact_512

    # Blend band: pixels where both primitives carry nonzero color weight.
    cam = orbit_camera(center, radius, math.pi / 2, width=width, height=height,
                       fov_x=math.radians(fov))
    px = np.arange(width) + 0.5
    py = np.full(width, row + 0.5)
    origins, dirs = generate_rays(cam, px, py)
    weights = batched.forward(
        SceneArrays.from_scene(scene), origins, dirs, want_weights=True
    ).weights
    both = (weights[:, 0] > 0.02) & (weights[:, 1] > 0.02)
    runs = np.diff(np.flatnonzero(np.diff(np.concatenate([[0], both.view(np.int8), [0]]))))
    longest_run = int(runs.max()) if len(runs) else 0

    ok = (
        exact_512 < 1e-2
        and 0.3 <= scaling <= 0.7
        and splat_512 > 0.05
        and splat_1024 > 0.05
        and longest_run >= 8
    )
    detail = (
        f"exact jump {exact_512:.2e} @512 (< 1e-2), x{scaling:.2f} at 1024 (~0.5), "
        f"splatted jump {splat_512:.2f}/{splat_1024:.2f} @512/1024 (> 0.05), "
        f"blend band {longest_run} px (>= 8)"
    )
    report(4, "flatland EPI reproduction", ok, detail)


def test_criterion_5_gradient_correctness():
    t0 = time.perf_counter()
    rep = gradient_suite(n_scenes=20, n_primitives=8, seed=0)

    from ellipray.scene import EllipsoidPrimitive

    analytic_scene = Scene(
        [EllipsoidPrimitive((0.1, -0.2, 0.3), (1, 0, 0, 0), (0.8, 1.1, 0.6), 0.55,
                            np.array([[1.2, -0.4, 0.7], [0.1, 0.2, -0.1],
                                      [0.0, 0.1, 0.0], [-0.2, 0.0, 0.3]]))],
        (0.1, 0.05, 0.2),
        1,
    )
    d = np.array([0.02, 1.0, 0.01])
    rays = [Ray((0, -5, 0.2), d / np.linalg.norm(d))]
    tight = finite_difference_check(
        analytic_scene, rays, loss_weights=np.array([[1.0, 0.0, 0.0]]), h=1e-5
    )
    elapsed = time.perf_counter() - t0
    ok = rep["passed"] and tight["max_rel_error"] < 1e-6 and elapsed < 300
    detail = (
        f"20 random 8-primitive scenes worst rel err {rep['worst']:.2e} (< 1e-3), "
        f"analytic axis-aligned case {tight['max_rel_error']:.2e} (< 1e-6), "
        f"runtime {elapsed:.0f}s (< 300s)"
    )
    report(5, "gradient correctness", ok, detail)


def test_criterion_6_opacity_profiles():
    offsets = np.arange(-1.2, 1.2 + 1e-12, 1e-3)
    widths = {}
    monotone = True
    for sigma in (1.0, 3.0, 100.0):
        curve = density_profile(sigma, offsets)
        widths[sigma] = profile_transition_width(offsets, curve)
        positive = offsets >= 0
        monotone &= bool(np.all(np.diff(curve[positive]) <= 1e-12))

    # Continuity: refining the grid around the worst jump keeps shrinking it.
    jumps = []
    lo, hi = -1.2, 1.2
    step = 1e-3
    for _ in range(4):
        grid = np.arange(lo, hi + step, step)
        curve = density_profile(100.0, grid)
        diffs = np.abs(np.diff(curve))
        k = int(np.argmax(diffs))
        jumps.append(float(diffs[k]))
        lo, hi = grid[k] - 2 * step, grid[k + 1] + 2 * step
        step /= 100.0
    shrinking = all(b <= a for a, b in zip(jumps, jumps[1:])) and jumps[-1] < 0.05

    ok = monotone and shrinking and widths[100.0] < 0.1 and widths[1.0] > 0.4
    detail = (
        f"monotone in |b|: {monotone}, refinement jumps {['%.3f' % j for j in jumps]} -> "
        f"continuous, width(sigma=100) {widths[100.0]:.3f} (< 0.1), "
        f"width(sigma=1) {widths[1.0]:.3f} (> 0.4)"
    )
    report(6, "opacity profile reproduction", ok, detail)


def test_criterion_7_density_mapping_and_split_predicate():
    e1 = abs(sigma_from_alpha(0.0, (1, 1, 1)) - 0.0)
    e2 = abs(sigma_from_alpha(0.5, (1, 1, 1)) - (-math.log(0.505)))
    e3 = abs(sigma_from_alpha(0.5, (2, 0.5, 1)) - (-math.log(0.505) / 0.5))
    mapping_ok = max(e1, e2, e3) < 1e-12

    def saturated(alpha, scale):
        sigma = sigma_from_alpha(alpha, scale)
        return 0.99 < -math.expm1(-sigma * max(scale))

    fires = saturated(0.99, (2.0, 1.0, 1.0)) and saturated(0.9999, (2.0, 1.0, 1.0))
    # Isotropic boundary: peak opacity is exactly 0.99 * alpha < 0.99.
    holds = not saturated(0.99, (1.0, 1.0, 1.0)) and not saturated(0.9999, (1.0, 1.0, 1.0))
    ok = mapping_ok and fires and holds
    detail = (
        f"density mapping max err {max(e1, e2, e3):.1e} (< 1e-12), "
        f"saturation split fires on (0.99|0.9999, scale 2:1): {fires}, "
        f"boundary isotropic case stays below: {holds}"
    )
    report(7, "density mapping and split predicate", ok, detail)


def test_criterion_8_inverse_contraction_round_trip():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(100_000, 3))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    radii = (rng.random((100_000, 1)) ** (1 / 3)) * (2.0 - 1e-6)
    # Bias a tenth of the samples toward the contraction boundary.
    radii[: len(radii) // 10] = rng.uniform(1.9, 2.0 - 1e-6, (len(radii) // 10, 1))
    z *= radii
    err = float(np.abs(contract(uncontract(z)) - z).max())
    report(8, "inverse contraction round trip", err < 1e-9,
           f"max |C(C^-1(z)) - z| {err:.2e} over 100000 samples (< 1e-9)")


def test_criterion_9_desk_scale_training(training_run):
    run = training_run
    vals = [psnr(render_image(run["scene"], c, EVAL_SETTINGS), img)
            for c, img in run["test_views"]]
    held_out = float(np.mean(vals))
    count_changed = len(set(run["counts"])) > 1
    steps = len(run["metrics"])

    # Seed reproducibility in sequential mode: replay the first steps.
    replay_cfg = desk_train_config()
    _, m1, _ = train(run["init"], run["train_views"], replay_cfg, stop_step=30)
    _, m2, _ = train(run["init"], run["train_views"], replay_cfg, stop_step=30)
    reproducible = [r["loss"] for r in m1] == [r["loss"] for r in m2]
    head = [r["loss"] for r in run["metrics"][:30]]
    reproducible &= head == [r["loss"] for r in m1]

    ok = (
        held_out >= 35.0
        and steps <= 5000
        and run["train_seconds"] < 600
        and count_changed
        and reproducible
    )
    detail = (
        f"held-out PSNR {held_out:.2f} dB (>= 35) over {len(vals)} views "
        f"(per-view {['%.1f' % v for v in vals]}), {steps} steps (<= 5000), "
        f"{run['train_seconds']:.0f}s (< 600s), primitive count changed: {count_changed} "
        f"({run['counts'][0]} -> {run['counts'][-1]}), seed-reproducible: {reproducible}"
    )
    report(9, "desk-scale training", ok, detail)


def test_criterion_10_baseline_separation(training_run):
    from ellipray.baselines import render_no_mixing, render_splatted

    run = training_run
    scores = {}
    for mode, renderer in (
        ("exact", render_image),
        ("splatted", render_splatted),
        ("nomix", render_no_mixing),
    ):
        vals = [psnr(renderer(run["scene"], c, EVAL_SETTINGS), img)
                for c, img in run["test_views"]]
        scores[mode] = float(np.mean(vals))
    ok = scores["exact"] > scores["splatted"] and scores["exact"] > scores["nomix"]
    ordering = "splatted < nomix" if scores["splatted"] < scores["nomix"] else "nomix <= splatted"
    detail = (
        f"held-out PSNR exact {scores['exact']:.2f} > splatted {scores['splatted']:.2f} "
        f"and > nomix {scores['nomix']:.2f}; baseline ordering (reported, not gated): {ordering}"
    )
    report(10, "baseline separation", ok, detail)
