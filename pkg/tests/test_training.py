import math

import numpy as np
import pytest

from ellipray import sh
from ellipray.contraction import contract, contract_jacobian, seed_inverse_contraction, uncontract
from ellipray.demo import make_random_scene, sphere_cameras
from ellipray.errors import TrainingDivergedError
from ellipray.renderer import RenderSettings, render_image
from ellipray.scene import (
    EllipsoidPrimitive,
    Scene,
    SceneArrays,
    eval_color,
    sigma_from_alpha,
)
from ellipray.training import (
    AdamState,
    TrainConfig,
    _Params,
    adc_step,
    anisotropy_loss,
    image_loss,
    psnr,
    scene_extent_of,
    ssim,
    train,
)


def reference_ssim(x, y):
    """Independent SSIM: explicit per-pixel loops over the same Gaussian window."""
    radius = 5
    sigma = 1.5
    ax = np.arange(-radius, radius + 1)
    g1 = np.exp(-(ax**2) / (2 * sigma * sigma))
    g1 /= g1.sum()
    window = np.outer(g1, g1)
    h, w, _ = x.shape
    c1, c2 = 0.01**2, 0.03**2
    total = 0.0
    for c in range(3):
        for i in range(h):
            for j in range(w):
                mx = my = mxx = myy = mxy = 0.0
                for di in range(-radius, radius + 1):
                    for dj in range(-radius, radius + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w:
                            wgt = window[di + radius, dj + radius]
                            xv = x[ii, jj, c]
                            yv = y[ii, jj, c]
                            mx += wgt * xv
                            my += wgt * yv
                            mxx += wgt * xv * xv
                            myy += wgt * yv * yv
                            mxy += wgt * xv * yv
                vx = mxx - mx * mx
                vy = myy - my * my
                cov = mxy - mx * my
                total += ((2 * mx * my + c1) * (2 * cov + c2)) / (
                    (mx * mx + my * my + c1) * (vx + vy + c2)
                )
    return total / (h * w * 3)


class TestLoss:
    def test_identical_images_zero(self):
        img = np.random.default_rng(0).random((12, 14, 3))
        value, grad = image_loss(img, img)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset_l1_only(self):
        a = np.full((8, 8, 3), 0.5)
        b = np.full((8, 8, 3), 0.6)
        value, _ = image_loss(a, b, lambda_dssim=0.0)
        assert value == pytest.approx(0.1, abs=1e-12)

    def test_matches_independent_ssim(self):
        rng = np.random.default_rng(1)
        x = rng.random((14, 13, 3))
        y = np.clip(x + rng.normal(0, 0.15, x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(reference_ssim(x, y), abs=1e-6)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            image_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        x = rng.random((10, 11, 3))
        y = rng.random((10, 11, 3))
        _, grad = image_loss(x, y)
        h = 1e-6
        for _ in range(12):
            i, j, c = rng.integers(10), rng.integers(11), rng.integers(3)
            xp = x.copy()
            xp[i, j, c] += h
            xm = x.copy()
            xm[i, j, c] -= h
            fd = (image_loss(xp, y)[0] - image_loss(xm, y)[0]) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_psnr(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)
        assert psnr(a, a) == math.inf


class TestAnisotropyLoss:
    def arrays_for(self, alphas, scales):
        prims = [
            EllipsoidPrimitive((0, 0, 0), (1, 0, 0, 0), s, min(a, 0.9999), np.zeros((1, 3)))
            for a, s in zip(alphas, scales)
        ]
        arrays = SceneArrays.from_scene(Scene(prims, (0, 0, 0), 0))
        arrays.alphas = np.asarray(alphas, dtype=np.float64)  # allow exact 1.0
        return arrays

    def test_opaque_primitive_contributes_nothing(self):
        arrays = self.arrays_for([1.0], [(2.0, 1.0, 1.0)])
        value, _ = anisotropy_loss(arrays, np.array([True]))
        assert value == 0.0

    def test_transparent_anisotropic_contributes_spread(self):
        arrays = self.arrays_for([0.0], [(2.0, 1.0, 1.0)])
        value, d_scale = anisotropy_loss(arrays, np.array([True]))
        assert value == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(d_scale, [[1.0, -1.0, 0.0]])

    def test_isotropic_contributes_nothing(self):
        arrays = self.arrays_for([0.3], [(1.5, 1.5, 1.5)])
        value, d_scale = anisotropy_loss(arrays, np.array([True]))
        assert value == 0.0

    def test_invisible_masked_out(self):
        arrays = self.arrays_for([0.0, 0.0], [(2, 1, 1), (3, 1, 1)])
        value, _ = anisotropy_loss(arrays, np.array([True, False]))
        assert value == pytest.approx(1.0, abs=1e-15)

    def test_gradient_only_touches_scale(self):
        # The (1 - alpha) factor is gradient-blocked by construction: the
        # returned gradient covers scale only, and matches a finite
        # difference of the loss with alpha held fixed.
        arrays = self.arrays_for([0.25], [(1.7, 0.9, 1.2)])
        value, d_scale = anisotropy_loss(arrays, np.array([True]))
        h = 1e-7
        for k in range(3):
            arrays.scales[0, k] += h
            up, _ = anisotropy_loss(arrays, np.array([True]))
            arrays.scales[0, k] -= 2 * h
            down, _ = anisotropy_loss(arrays, np.array([True]))
            arrays.scales[0, k] += h
            assert d_scale[0, k] == pytest.approx((up - down) / (2 * h), abs=1e-6)


class TestTrainConfig:
    def test_validates_positive(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_alpha=0.0)

    def test_validates_densify_window(self):
        with pytest.raises(ValueError):
            TrainConfig(densify_start=10, densify_stop_step=10)


class TestAdcStep:
    def params_for(self, prims):
        return _Params(Scene(prims, (0, 0, 0), 0))

    def prim(self, alpha=0.5, scale=(1, 1, 1), mean=(0, 0, 0)):
        return EllipsoidPrimitive(mean, (1, 0, 0, 0), scale, alpha, np.zeros((1, 3)))

    def run(self, params, config, g=None, vec=None, vis=None, extent=10.0, seed=0):
        n = params.count
        stat = np.zeros(n) if g is None else np.asarray(g, dtype=np.float64)
        vecs = np.zeros((n, 3)) if vec is None else np.asarray(vec, dtype=np.float64)
        visibility = np.ones(n, dtype=np.int64) if vis is None else np.asarray(vis)
        return adc_step(params, stat, vecs, visibility, config, extent, np.random.default_rng(seed))

    def test_saturation_split_fires_on_anisotropic(self):
        # alpha 0.99, scale (2,1,1): opacity across the major axis exceeds 0.99.
        config = TrainConfig()
        params = self.params_for([self.prim(alpha=0.99, scale=(2, 1, 1))])
        sigma_parent = sigma_from_alpha(0.99, (2, 1, 1))
        assert -math.expm1(-sigma_parent * 2.0) > 0.99
        index_map, report = self.run(params, config)
        assert report.split_saturated == 1
        assert params.count == 2
        assert np.all(index_map == -1)

    def test_saturation_split_skips_isotropic(self):
        # Same alpha, isotropic: peak opacity is 0.99 * alpha < 0.99, strictly.
        config = TrainConfig()
        for alpha in (0.99, 0.9999):
            params = self.params_for([self.prim(alpha=alpha, scale=(1, 1, 1))])
            sigma = sigma_from_alpha(alpha, (1, 1, 1))
            assert -math.expm1(-sigma * 1.0) == pytest.approx(0.99 * alpha, abs=1e-12)
            _, report = self.run(params, config)
            assert report.split_saturated == 0 and params.count == 1

    def test_split_halves_density_exactly(self):
        config = TrainConfig()
        parent_scale = np.array([2.0, 1.0, 1.0])
        params = self.params_for([self.prim(alpha=0.99, scale=parent_scale)])
        sigma_parent = sigma_from_alpha(0.99, parent_scale)
        self.run(params, config)
        child_scale = np.exp(params.log_scales[0])
        np.testing.assert_allclose(child_scale, parent_scale / 1.6, rtol=1e-12)
        sigma_child = sigma_from_alpha(params.alphas[0], child_scale)
        assert sigma_child == pytest.approx(sigma_parent / 2.0, rel=1e-9)

    def test_gradient_split_needs_size(self):
        config = TrainConfig(split_grad_threshold=1e-6, percent_dense=0.01)
        big = self.prim(alpha=0.5, scale=(0.5, 0.4, 0.3))
        small = self.prim(alpha=0.5, scale=(0.05, 0.04, 0.03))
        params = self.params_for([big, small])
        _, report = self.run(params, config, g=[1e-3, 1e-3], extent=10.0)
        # dense cutoff = 0.01 * 10 = 0.1: only the big one splits.
        assert report.split == 1 and report.cloned == 0
        assert params.count == 3

    def test_clone_offsets_along_accumulated_gradient(self):
        config = TrainConfig(clone_grad_threshold=0.01, percent_dense=0.2)
        params = self.params_for([self.prim(alpha=0.5, scale=(0.3, 0.25, 0.2), mean=(1, 2, 3))])
        vec = np.array([[0.0, 10.0, 0.0]])
        index_map, report = self.run(params, config, g=[0.02], vec=vec, extent=10.0)
        assert report.cloned == 1 and params.count == 2
        assert index_map[0] == 0 and index_map[1] == -1
        offset = params.means[1] - params.means[0]
        np.testing.assert_allclose(offset, [0.0, 0.1 * 0.3, 0.0], atol=1e-12)

    def test_prune_low_alpha_and_oversized(self):
        config = TrainConfig()
        params = self.params_for(
            [self.prim(alpha=0.004), self.prim(alpha=0.5), self.prim(alpha=0.5, scale=(26, 1, 1))]
        )
        index_map, report = self.run(params, config)
        assert report.pruned == 2
        assert params.count == 1 and index_map.tolist() == [1]

    def test_prune_never_removes_visible_alpha_above_threshold(self):
        rng = np.random.default_rng(3)
        config = TrainConfig()
        prims = [
            self.prim(alpha=rng.uniform(0.005, 0.9), scale=rng.uniform(0.1, 2.0, 3))
            for _ in range(30)
        ]
        params = self.params_for(prims)
        before = params.count
        _, report = self.run(params, config, g=np.zeros(30))
        assert report.pruned == 0
        assert params.count >= before  # saturation splits may add, never drop

    def test_cap_disables_densification(self):
        config = TrainConfig(max_primitives=1, split_grad_threshold=1e-9, percent_dense=1e-6)
        params = self.params_for([self.prim(alpha=0.6, scale=(1, 0.9, 0.8))])
        _, report = self.run(params, config, g=[1.0])
        assert report.split == 0 and report.cloned == 0 and params.count == 1

    def test_split_preserves_appearance_roughly(self):
        # Parent vs its two children on a probe view: means differ by less
        # than 0.05 per channel (loose, the operation is heuristic).
        from ellipray.geometry import CameraModel

        config = TrainConfig()
        parent = self.prim(alpha=0.97, scale=(1.4, 0.9, 0.9))
        params = self.params_for([parent])
        sigma_parent = sigma_from_alpha(0.97, (1.4, 0.9, 0.9))
        assert -math.expm1(-sigma_parent * 1.4) > 0.99  # saturation split fires
        self.run(params, config, seed=4)
        assert params.count == 2
        cam = CameraModel.look_at((0, -6, 0), (0, 0, 0), width=64, height=64)
        settings = RenderSettings(spp=1, jitter=False, t_stop=0.0, seed=0)
        before = render_image(Scene([parent], (0, 0, 0), 0), cam, settings)
        after = render_image(params.to_scene(), cam, settings)
        assert np.abs(before - after).mean() < 0.05

    def test_adam_state_remap(self):
        params = self.params_for([self.prim(), self.prim(alpha=0.004)])
        adam = AdamState(params, step=5)
        adam.m["mean"][:] = [[1, 1, 1], [2, 2, 2]]
        config = TrainConfig()
        index_map, _ = self.run(params, config)
        adam.remap(params, index_map)
        np.testing.assert_array_equal(adam.m["mean"], [[1, 1, 1]])
        assert adam.t == 5


class TestTrainLoop:
    def tiny_dataset(self, seed=0, n_prims=4, res=24, views=4):
        scene = make_random_scene(n_prims, seed=seed, spread=0.8)
        cams = sphere_cameras(views, (0, 0, 0), 4.0, res, res)
        settings = RenderSettings(spp=1, jitter=False, t_stop=0.0, seed=0)
        return scene, [(c, render_image(scene, c, settings)) for c in cams]

    def test_zero_iterations_leaves_scene_unchanged(self):
        scene, views = self.tiny_dataset()
        config = TrainConfig(max_steps=0, densify_start=1, densify_stop_step=2)
        out, metrics, _ = train(scene, views, config)
        assert metrics == []
        for a, b in zip(scene.primitives, out.primitives):
            np.testing.assert_array_equal(a.mean, b.mean)
            assert a.alpha == b.alpha

    def test_seeded_run_bitwise_reproducible(self):
        scene, views = self.tiny_dataset(seed=1)
        config = TrainConfig(max_steps=25, densify_start=10, densify_interval=10,
                             densify_stop_step=21, seed=3)
        _, m1, _ = train(scene, views, config)
        _, m2, _ = train(scene, views, config)
        assert [r["loss"] for r in m1] == [r["loss"] for r in m2]
        assert [r["n_primitives"] for r in m1] == [r["n_primitives"] for r in m2]

    def test_nan_target_aborts(self):
        scene, views = self.tiny_dataset(seed=2)
        cam, img = views[0]
        bad = img.copy()
        bad[0, 0, 0] = np.nan
        config = TrainConfig(max_steps=5)
        with pytest.raises(TrainingDivergedError):
            train(scene, [(cam, bad)], config)

    def test_requires_dataset(self):
        with pytest.raises(ValueError):
            train(make_random_scene(2, seed=3), [], TrainConfig(max_steps=1))

    def test_single_primitive_mean_recovery(self):
        # Ground truth primitive, init offset by 0.1: the mean comes back
        # within 1e-2 well inside the 2000-step budget.
        gt = Scene(
            [EllipsoidPrimitive((0.0, 0.0, 0.0), (1, 0, 0, 0), (0.5, 0.45, 0.4), 0.7,
                                sh.softplus_inverse(np.full((1, 3), 0.7)) / sh.SH_C0)],
            (0.02, 0.02, 0.02),
            0,
        )
        cams = sphere_cameras(8, (0, 0, 0), 3.0, 32, 32)
        settings = RenderSettings(spp=1, jitter=False, t_stop=0.0, seed=0)
        views = [(c, render_image(gt, c, settings)) for c in cams]
        init = gt.copy()
        init.primitives[0].mean = init.primitives[0].mean + np.array([0.1, 0.0, 0.0])
        config = TrainConfig(
            max_steps=400, densify_start=10_000, densify_stop_step=10_001,
            lr_position_init=2e-3, lr_position_final=1e-5, lambda_aniso=0.0,
            lr_final_scale=0.05, seed=0,
        )
        out, metrics, _ = train(init, views, config)
        assert np.linalg.norm(out.primitives[0].mean) < 1e-2

    def test_scene_extent(self):
        cams = sphere_cameras(6, (1, 2, 3), 2.0, 8, 8)
        extent = scene_extent_of(cams)
        # 1.1 x the camera bounding-sphere radius around the centroid.
        assert 1.9 <= extent <= 2.5


class TestContraction:
    def test_identity_inside_unit_ball(self):
        z = np.array([0.3, -0.2, 0.5])
        np.testing.assert_array_equal(uncontract(z), z)
        np.testing.assert_array_equal(contract(z), z)

    def test_hand_computed_point(self):
        out = uncontract(np.array([1.5, 0.0, 0.0]))
        np.testing.assert_allclose(out, [2.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(contract(out), [1.5, 0.0, 0.0], atol=1e-12)

    def test_boundary_blows_up(self):
        near = uncontract(np.array([2.0 - 1e-9, 0.0, 0.0]))
        assert np.linalg.norm(near) > 1e6

    def test_round_trip_bulk(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(20_000, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= (rng.random((20_000, 1)) ** (1 / 3)) * (2.0 - 1e-6)
        np.testing.assert_allclose(contract(uncontract(z)), z, atol=1e-9)

    def test_jacobian_matches_fd(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.normal(size=3) * 2.0
            J = contract_jacobian(x)
            h = 1e-7
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (contract(x + e) - contract(x - e)) / (2 * h)
                np.testing.assert_allclose(J[:, k], fd, atol=1e-6)


class TestSeeding:
    def test_counts_and_isotropy(self):
        prims = seed_inverse_contraction(200, rng=np.random.default_rng(6))
        assert len(prims) == 200
        for p in prims:
            assert p.scale[0] == p.scale[1] == p.scale[2]
            assert 0 < p.alpha < 1

    def test_constant_color_through_activation(self):
        prims = seed_inverse_contraction(5, color=0.5, rng=np.random.default_rng(7))
        for p in prims:
            np.testing.assert_allclose(eval_color(p, (0, 0, 1), 0), 0.5, atol=1e-12)

    def test_packing_radius_shrinks_with_count(self):
        small = seed_inverse_contraction(10, rng=np.random.default_rng(8))
        large = seed_inverse_contraction(1000, rng=np.random.default_rng(8))
        # Inside the unit ball the contraction is the identity, so seeds
        # there carry the packing radius directly.
        inner_small = [p for p in small if np.linalg.norm(p.mean) < 0.9]
        inner_large = [p for p in large if np.linalg.norm(p.mean) < 0.9]
        assert min(p.scale[0] for p in inner_small) > max(p.scale[0] for p in inner_large)

    def test_far_seeds_grow_with_jacobian(self):
        prims = seed_inverse_contraction(3000, rng=np.random.default_rng(9))
        inner = [p.scale[0] for p in prims if np.linalg.norm(p.mean) < 0.8]
        outer = [p.scale[0] for p in prims if np.linalg.norm(p.mean) > 20.0]
        if inner and outer:
            assert min(outer) > max(inner)

    def test_bounds_scale_world_placement(self):
        prims = seed_inverse_contraction(
            50, bounds_center=(10, 0, 0), bounds_radius=3.0, rng=np.random.default_rng(10)
        )
        # Seeds with contracted norm < 1 stay within bounds_radius of center.
        dists = [np.linalg.norm(p.mean - np.array([10.0, 0, 0])) for p in prims]
        assert min(dists) < 3.0
