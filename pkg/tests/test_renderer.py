import math

import numpy as np
import pytest

from ellipray import batched, sh
from ellipray.demo import make_flatland_scene, make_random_scene
from ellipray.geometry import CameraModel, Ray
from ellipray.renderer import (
    RayEvent,
    RayState,
    RenderSettings,
    build_events,
    composite_ray,
    density_profile,
    opacity_profile,
    render_image,
    render_ray,
    render_rows,
)
from ellipray.scene import (
    EllipsoidPrimitive,
    Scene,
    SceneArrays,
    alpha_from_sigma,
    eval_color,
    sigma_from_alpha,
)
from ellipray.bvh import HitPair


def solid_prim(mean, sigma, rgb, radius=1.0):
    """Primitive with an exact rendering density and solid color."""
    scale = np.full(3, radius)
    coeffs = np.zeros((1, 3))
    coeffs[0] = sh.softplus_inverse(np.asarray(rgb, dtype=np.float64)) / sh.SH_C0
    return EllipsoidPrimitive(mean, (1, 0, 0, 0), scale, alpha_from_sigma(sigma, scale), coeffs)


class TestBuildEvents:
    def test_single_pair_definition(self):
        prim = solid_prim((0, 0, 2), sigma=2.0, rgb=(0.9, 0.1, 0.1))
        scene = Scene([prim], (0, 0, 0), 0)
        events = build_events([HitPair(1.0, 3.0, 0)], scene, np.array([0, 0, 1.0]))
        assert [e.kind for e in events] == ["enter", "exit"]
        assert events[0].t == 1.0 and events[1].t == 3.0
        sigma = sigma_from_alpha(prim.alpha, prim.scale)
        assert events[0].delta_sigma == pytest.approx(sigma, rel=1e-15)
        assert events[1].delta_sigma == pytest.approx(-sigma, rel=1e-15)
        color = eval_color(prim, (0, 0, 1), 0)
        np.testing.assert_allclose(events[0].delta_premul, sigma * color, rtol=1e-15)
        np.testing.assert_allclose(events[1].delta_premul, -sigma * color, rtol=1e-15)

    def test_tie_break_enter_before_exit_then_index(self):
        prims = [solid_prim((0, 0, 2), 1.0, (0.5, 0.5, 0.5)) for _ in range(3)]
        scene = Scene(prims, (0, 0, 0), 0)
        pairs = [HitPair(1.0, 2.0, 2), HitPair(1.0, 2.0, 0), HitPair(2.0, 3.0, 1)]
        events = build_events(pairs, scene, np.array([0, 0, 1.0]))
        keys = [(e.t, e.kind, e.primitive_index) for e in events]
        assert keys == [
            (1.0, "enter", 0),
            (1.0, "enter", 2),
            (2.0, "enter", 1),
            (2.0, "exit", 0),
            (2.0, "exit", 2),
            (3.0, "exit", 1),
        ]

    def test_overlap_case_ordering(self):
        # Two overlapping intervals: enterA, enterB, exitA, exitB.
        prims = [solid_prim((0, 0, 0), 1.0, (0.5, 0.5, 0.5))] * 2
        scene = Scene(prims, (0, 0, 0), 0)
        events = build_events(
            [HitPair(1.0, 3.0, 0), HitPair(2.0, 4.0, 1)], scene, np.array([0, 0, 1.0])
        )
        assert [(e.kind, e.primitive_index) for e in events] == [
            ("enter", 0), ("enter", 1), ("exit", 0), ("exit", 1)
        ]


def synth_event(t, dsigma, rgb, index, kind):
    return RayEvent(t, dsigma, dsigma * np.asarray(rgb, dtype=np.float64), index, kind)


def interval_events(spans):
    """spans: list of (t0, t1, sigma, rgb)."""
    events = []
    for i, (t0, t1, sigma, rgb) in enumerate(spans):
        events.append(synth_event(t0, sigma, rgb, i, "enter"))
        events.append(synth_event(t1, -sigma, rgb, i, "exit"))
    events.sort(key=lambda e: (e.t, 0 if e.kind == "enter" else 1, e.primitive_index))
    return events


class TestCompositeRay:
    def test_no_events_returns_background(self):
        color, T = composite_ray([], np.array([0.2, 0.3, 0.4]))
        np.testing.assert_array_equal(color, [0.2, 0.3, 0.4])
        assert T == 1.0

    def test_single_interval_closed_form(self):
        events = interval_events([(0.0, 2.0, 1.0, (1, 0, 0))])
        color, T = composite_ray(events, np.zeros(3))
        assert T == pytest.approx(math.exp(-2.0), abs=1e-15)
        np.testing.assert_allclose(color, [-math.expm1(-2.0), 0, 0], atol=1e-15)

    def test_overlap_closed_form_by_hand(self):
        # A: sigma 1 red on [0, 2]; B: sigma 1 blue on [1, 3]. Segments:
        # [0,1] sigma 1 red; [1,2] sigma 2 purple; [2,3] sigma 1 blue.
        events = interval_events([(0.0, 2.0, 1.0, (1, 0, 0)), (1.0, 3.0, 1.0, (0, 0, 1))])
        color, T = composite_ray(events, np.zeros(3))
        a1 = -math.expm1(-1.0)
        t1 = math.exp(-1.0)
        a2 = -math.expm1(-2.0)
        t2 = t1 * math.exp(-2.0)
        a3 = a1
        expected = (
            np.array([1.0, 0, 0]) * a1
            + t1 * np.array([0.5, 0, 0.5]) * a2
            + t2 * np.array([0.0, 0, 1.0]) * a3
        )
        np.testing.assert_allclose(color, expected, atol=1e-12)
        assert T == pytest.approx(math.exp(-4.0), abs=1e-15)

    def test_zero_length_and_zero_density_segments_skipped(self):
        events = interval_events(
            [(1.0, 1.0, 5.0, (1, 1, 1)), (2.0, 3.0, 0.0, (1, 1, 1)), (4.0, 5.0, 1.0, (1, 0, 0))]
        )
        color, T = composite_ray(events, np.zeros(3))
        np.testing.assert_allclose(color, [-math.expm1(-1.0), 0, 0], atol=1e-14)

    def test_early_stop_blends_background_with_frozen_T(self):
        events = interval_events([(0.0, 100.0, 1.0, (1, 0, 0)), (200.0, 201.0, 1.0, (0, 1, 0))])
        state = RayState()
        color, T = composite_ray(events, np.array([0, 0, 1.0]), t_stop=1e-3, state_out=state)
        # The first interval alone drives T below 1e-3; the second never runs.
        assert T < 1e-3
        assert state.events_applied < len(events)
        assert color[1] == 0.0
        assert color[2] == pytest.approx(T, rel=1e-12)

    def test_telescoping_transmittance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            spans = []
            t = 0.0
            total = 0.0
            for _ in range(rng.integers(1, 10)):
                t0 = t + rng.uniform(0, 0.5)
                t1 = t0 + rng.uniform(0.01, 1.0)
                sigma = rng.uniform(0, 2)
                spans.append((t0, t1, sigma, rng.uniform(0, 1, 3)))
                t = t0 + rng.uniform(0, 1.0)
            events = interval_events(spans)
            _, T = composite_ray(events, np.zeros(3))
            depth = sum(s * (b - a) for a, b, s, _ in spans)
            assert T == pytest.approx(math.exp(-depth), rel=1e-12)

    def test_energy_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            spans = []
            for _ in range(rng.integers(1, 14)):
                t0 = rng.uniform(0, 5)
                spans.append(
                    (t0, t0 + rng.uniform(0.01, 2), rng.uniform(0, 40), rng.uniform(0, 1, 3))
                )
            events = interval_events(spans)
            color, T = composite_ray(events, np.zeros(3))
            assert 0.0 < T <= 1.0
            assert np.all(color <= 1.0 + 1e-12) and np.all(color >= 0.0)

    def test_weights_sum_to_accumulated_opacity(self):
        events = interval_events([(0.0, 2.0, 1.0, (1, 0, 0)), (1.0, 3.0, 1.0, (0, 0, 1))])
        weights = {}
        color, T = composite_ray(events, np.zeros(3), weights_out=weights)
        # Segment colors are convex in primitive colors, so the weights of a
        # two-primitive ray recover each primitive's total contribution.
        recon = weights[0] * np.array([1.0, 0, 0]) + weights[1] * np.array([0.0, 0, 1.0])
        np.testing.assert_allclose(recon, color, atol=1e-12)
        assert weights[0] + weights[1] == pytest.approx(1.0 - T, rel=1e-12)


class TestPermutationInvariance:
    def test_batched_and_scalar(self):
        rng = np.random.default_rng(2)
        for k in range(10):
            scene = make_random_scene(int(rng.integers(2, 48)), seed=100 + k)
            perm = rng.permutation(len(scene.primitives))
            shuffled = scene.copy()
            shuffled.primitives = [scene.primitives[i] for i in perm]
            origin = rng.normal(size=3)
            origin = origin / np.linalg.norm(origin) * 5
            d = rng.uniform(-0.5, 0.5, 3) - origin
            d /= np.linalg.norm(d)
            c1, _ = render_ray(scene, Ray(origin, d))
            c2, _ = render_ray(shuffled, Ray(origin, d))
            np.testing.assert_allclose(c1, c2, rtol=0, atol=1e-12)


class TestContinuity:
    def test_direction_lipschitz_on_flatland(self):
        # Fit the constant at coarse steps, verify at 10x finer.
        scene = make_flatland_scene()
        arrays = SceneArrays.from_scene(scene)
        center = np.array([0.0, 0.0, 0.0])

        def color_at(theta):
            origin = center + 4.0 * np.array([math.cos(theta), math.sin(theta), 0.0])
            d = center - origin
            d /= np.linalg.norm(d)
            return batched.forward(arrays, origin[None], d[None]).colors[0]

        thetas = np.linspace(math.pi / 2 - 0.2, math.pi / 2 + 0.2, 81)
        coarse = 1e-3
        K = max(
            np.abs(color_at(t + coarse) - color_at(t)).max() / coarse for t in thetas
        )
        fine = 1e-4
        worst = max(np.abs(color_at(t + fine) - color_at(t)).max() for t in thetas)
        assert worst <= K * fine * 1.25


class TestRenderImage:
    def camera(self, width=24, height=16):
        return CameraModel.look_at((0, -5, 0), (0, 0, 0), width=width, height=height)

    def test_empty_scene_constant_background(self):
        image = render_image(
            Scene([], (0.2, 0.2, 0.2), 0), self.camera(), RenderSettings(jitter=False)
        )
        np.testing.assert_array_equal(image, np.full((16, 24, 3), 0.2))

    def test_bitwise_deterministic(self):
        scene = make_random_scene(12, seed=3)
        for jitter in (False, True):
            settings = RenderSettings(spp=1, jitter=jitter, seed=9)
            a = render_image(scene, self.camera(), settings)
            b = render_image(scene, self.camera(), settings)
            np.testing.assert_array_equal(a, b)

    def test_threads_do_not_change_pixels(self):
        scene = make_random_scene(12, seed=4)
        one = render_image(scene, self.camera(), RenderSettings(jitter=True, seed=1, threads=1))
        two = render_image(scene, self.camera(), RenderSettings(jitter=True, seed=1, threads=2))
        np.testing.assert_array_equal(one, two)

    def test_render_rows_matches_full_image(self):
        scene = make_random_scene(10, seed=5)
        settings = RenderSettings(jitter=True, seed=2)
        image = render_image(scene, self.camera(), settings)
        rows = render_rows(scene, self.camera(), [3, 7], settings)
        np.testing.assert_array_equal(rows[0], image[3])
        np.testing.assert_array_equal(rows[1], image[7])

    def test_perray_engine_matches_batched(self):
        scene = make_random_scene(9, seed=6)
        cam = self.camera(width=12, height=8)
        batched_img = render_image(scene, cam, RenderSettings(jitter=False, engine="auto"))
        perray_img = render_image(scene, cam, RenderSettings(jitter=False, engine="perray"))
        np.testing.assert_allclose(batched_img, perray_img, rtol=0, atol=1e-12)

    def test_numpy_engine_matches_fused(self):
        scene = make_random_scene(14, seed=7)
        arrays = SceneArrays.from_scene(scene)
        rng = np.random.default_rng(8)
        origins = rng.normal(size=(32, 3)) * 4
        dirs = -origins + rng.normal(size=(32, 3)) * 0.3
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        a = batched.forward(arrays, origins, dirs, t_stop=1e-4, engine="numpy")
        b = batched.forward(arrays, origins, dirs, t_stop=1e-4, engine="fused")
        np.testing.assert_allclose(a.colors, b.colors, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.transmittance, b.transmittance, rtol=0, atol=1e-12)

    def test_oversized_image_guard(self):
        with pytest.raises(MemoryError):
            render_image(
                Scene([], (0, 0, 0), 0),
                CameraModel.look_at((0, -5, 0), (0, 0, 0), width=10_000, height=10_000),
            )

    def test_spp_averages_with_defocus(self):
        scene = make_random_scene(6, seed=9)
        cam = CameraModel.look_at(
            (0, -5, 0), (0, 0, 0), kind="thin_lens", width=8, height=8,
            aperture_radius=0.3, focus_distance=5.0,
        )
        sharp = render_image(scene, cam, RenderSettings(spp=4, jitter=True, seed=0))
        assert sharp.shape == (8, 8, 3)
        assert np.all(np.isfinite(sharp))


class TestOpacityProfile:
    def test_sharp_density_saturates_at_center(self):
        assert density_profile(100.0, [0.0])[0] == pytest.approx(1.0, abs=1e-12)

    def test_smooth_density_peak(self):
        assert density_profile(1.0, [0.0])[0] == pytest.approx(-math.expm1(-2.0), abs=1e-12)

    def test_tangent_offset_is_zero(self):
        assert density_profile(50.0, [1.0])[0] == 0.0
        assert density_profile(50.0, [1.2])[0] == 0.0

    def test_zero_density_all_zero(self):
        np.testing.assert_array_equal(density_profile(0.0, np.linspace(-1.2, 1.2, 7)), 0.0)

    def test_primitive_profile_matches_density_formula(self):
        # 24 samples avoid landing exactly on the tangent offsets +-1.
        prim = solid_prim((0.5, -0.2, 0.3), sigma=2.5, rgb=(0.5, 0.5, 0.5))
        offsets = np.linspace(-1.2, 1.2, 24)
        via_prim = opacity_profile(prim, (0.0, 0.0, 1.0), offsets)
        direct = density_profile(2.5, offsets)
        np.testing.assert_allclose(via_prim, direct, atol=1e-9)

    def test_sigma_override(self):
        prim = solid_prim((0, 0, 0), sigma=1.0, rgb=(0.5, 0.5, 0.5))
        out = opacity_profile(prim, (0, 0, 1), [0.0], sigma_override=100.0)
        assert out[0] == pytest.approx(1.0, abs=1e-12)
