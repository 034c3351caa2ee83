import numpy as np
import pytest

from stcalib.errors import NonUnitDirection, PixelOutOfBounds
from stcalib.field import FieldConfig, RadianceField
from stcalib.geometry import SE3Pose, rot_y, rot_z
from stcalib.renderer import (
    PinholeIntrinsics,
    Ray,
    RayBatch,
    RenderConfig,
    camera_rays,
    clip_to_box,
    composite,
    composite_batch,
    lidar_rays,
    render_backward,
    render_rays,
    stratified_samples,
    _sample_pdf,
)

INTR = PinholeIntrinsics(100.0, 100.0, 50.0, 40.0, 100, 80)
WHITE = np.ones(3)
BOX = dict(bounds_min=(-2.0, -2.0, -2.0), bounds_max=(2.0, 2.0, 2.0))


class MidpointRng:
    def random(self, shape):
        return np.full(shape, 0.5)


def slab_field(sigma):
    """Zero-feature field whose density is the constant ``sigma`` everywhere in the box."""
    rf = RadianceField(FieldConfig(**BOX), zero=True)
    rf.decoder.params["b2"][0] = np.log(np.expm1(sigma))
    return rf


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(ValueError):
            PinholeIntrinsics(0.0, 1.0, 0, 0, 10, 10)
        with pytest.raises(ValueError):
            PinholeIntrinsics(1.0, 1.0, 0, 0, 0, 10)

    def test_out_of_bounds_pixel(self):
        with pytest.raises(PixelOutOfBounds):
            camera_rays(INTR, SE3Pose.identity(), [(100, 0)])
        with pytest.raises(PixelOutOfBounds):
            camera_rays(INTR, SE3Pose.identity(), [(0, -1)])


class TestCameraRays:
    def test_principal_point(self):
        (r,) = camera_rays(INTR, SE3Pose.identity(), [(49.5, 39.5)])
        np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)

    def test_right_of_center(self):
        (r,) = camera_rays(INTR, SE3Pose.identity(), [(80, 39.5)])
        assert r.direction[0] > 0 and r.direction[1] == 0

    def test_rotated_pose(self):
        (r,) = camera_rays(INTR, SE3Pose.from_rt(rot_y(90), [1, 2, 3]), [(49.5, 39.5)])
        np.testing.assert_allclose(r.direction, [1, 0, 0], atol=1e-12)
        np.testing.assert_array_equal(r.origin, [1, 2, 3])

    def test_pixel_center_convention(self):
        (r,) = camera_rays(INTR, SE3Pose.identity(), [(0, 0)])
        d = np.array([(0.5 - 50) / 100, (0.5 - 40) / 100, 1.0])
        np.testing.assert_allclose(r.direction, d / np.linalg.norm(d), atol=1e-15)


class TestLidarRays:
    dirs = np.array([[1.0, 0, 0], [0, 0.6, 0.8]])

    def test_identity(self):
        rays = lidar_rays(SE3Pose.identity(), self.dirs)
        np.testing.assert_array_equal([r.direction for r in rays], self.dirs)

    def test_translation(self):
        rays = lidar_rays(SE3Pose.from_rt(np.eye(3), [4, 5, 6]), self.dirs)
        np.testing.assert_array_equal([r.direction for r in rays], self.dirs)
        np.testing.assert_array_equal(rays[0].origin, [4, 5, 6])

    def test_rotation(self):
        (r,) = lidar_rays(SE3Pose.from_rt(rot_z(90), [0, 0, 0]), [[1.0, 0, 0]])
        np.testing.assert_allclose(r.direction, [0, 1, 0], atol=1e-15)

    def test_non_unit(self):
        with pytest.raises(NonUnitDirection):
            lidar_rays(SE3Pose.identity(), [[1.0, 1.0, 0]])

    def test_ray_contract(self):
        with pytest.raises(NonUnitDirection):
            Ray(np.zeros(3), np.array([2.0, 0, 0]), 0.1, 1.0)
        with pytest.raises(ValueError):
            Ray(np.zeros(3), np.array([1.0, 0, 0]), 2.0, 1.0)


class TestStratified:
    ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.0, 4.0)

    def test_bins(self):
        t = stratified_samples(self.ray, 4, np.random.default_rng(0))
        for k in range(4):
            assert k <= t[k] < k + 1
        assert np.all(np.diff(t) > 0)

    def test_seeded(self):
        a = stratified_samples(self.ray, 16, np.random.default_rng(7))
        b = stratified_samples(self.ray, 16, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_midpoints(self):
        np.testing.assert_array_equal(stratified_samples(self.ray, 4, MidpointRng()), [0.5, 1.5, 2.5, 3.5])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            stratified_samples(self.ray, 1, MidpointRng())


class TestComposite:
    def test_empty_space(self):
        r = composite(np.zeros(5), np.full((5, 3), 0.3), np.linspace(1, 5, 5), WHITE, 6.0)
        np.testing.assert_array_equal(r.color, WHITE)
        assert r.opacity == 0.0 and r.depth == 6.0

    def test_half_absorbing(self):
        c = np.array([[0.2, 0.4, 0.6]])
        r = composite([np.log(2.0)], c, [1.0], np.zeros(3), 2.0)
        assert r.opacity == pytest.approx(0.5, abs=1e-15)
        np.testing.assert_allclose(r.color, 0.5 * c[0], atol=1e-15)

    def test_opaque(self):
        c = np.array([[0.9, 0.1, 0.2]])
        r = composite([30.0], c, [5.0], WHITE, 6.0)
        assert r.opacity == pytest.approx(1.0, abs=1e-12)
        assert r.depth == pytest.approx(5.0, abs=1e-11)
        np.testing.assert_allclose(r.color, c[0], atol=1e-12)

    def test_depth_far_override(self):
        t = np.array([[1.0, 2.0]])
        _, depth, _, _, _ = composite_batch(np.zeros((1, 2)), np.zeros((1, 2, 3)), t, WHITE, np.array([3.0]),
                                            np.array([50.0]))
        assert depth[0] == 50.0

    @pytest.mark.parametrize("sl", [0.5, 1.0, 2.0, 4.0])
    def test_slab_oracle(self, sl):
        near, far = 0.5, 3.5
        sigma = sl / (far - near)
        rf = slab_field(sigma)
        ray = Ray(np.array([0.0, 0.0, -2.0]), np.array([0.0, 0.0, 1.0]), near, far)
        cfg = RenderConfig(n_samples=256, clip_to_bounds=False)
        out = render_rays(rf, [ray], cfg, np.random.default_rng(0))
        want = 1.0 - np.exp(-sl)
        assert abs(out.opacity[0] - want) / want < 0.02

    def test_weights_bounded_random(self):
        rng = np.random.default_rng(0)
        R, S = 100_000, 32
        sigma = rng.exponential(1.0, (R, S)) * 10.0 ** rng.uniform(-3, 3, (R, 1))
        sigma[rng.random((R, S)) < 0.3] = 0.0
        t = np.sort(rng.uniform(0.1, 10.0, (R, S)), axis=1)
        far = np.full(R, 10.0)
        _, _, opacity, w, _ = composite_batch(sigma, np.zeros((R, S, 3)), t, WHITE, far)
        assert w.min() >= 0.0
        assert opacity.max() <= 1.0 + 1e-12


class TestRenderRays:
    def test_zero_density_returns_background(self):
        rf = RadianceField(FieldConfig(**BOX), zero=True)
        rf.decoder.params["b2"][0] = -50.0
        rays = camera_rays(INTR, SE3Pose.from_rt(np.eye(3), [0, 0, -1]), [(10, 10), (50, 40)], far=10.0)
        out = render_rays(rf, rays, RenderConfig(n_samples=32, background=(0.2, 0.3, 0.4)), np.random.default_rng(0))
        np.testing.assert_allclose(out.color, [[0.2, 0.3, 0.4]] * 2, atol=1e-12)

    def test_identical_rays(self):
        rf = RadianceField(FieldConfig(grid_init_scale=0.3, **BOX), seed=0)
        ray = Ray(np.array([0.1, 0.2, -1.5]), np.array([0.0, 0.6, 0.8]), 0.1, 5.0)
        t = np.tile(np.linspace(0.2, 4.0, 48), (2, 1))
        out = render_rays(rf, [ray, ray], RenderConfig(), None, t_samples=t)
        np.testing.assert_array_equal(out.color[0], out.color[1])
        assert out.depth[0] == out.depth[1]

    def test_outside_box_contributes_nothing(self):
        rf = slab_field(5.0)
        ray = Ray(np.array([5.0, 5.0, 5.0]), np.array([1.0, 0.0, 0.0]), 0.1, 10.0)
        out = render_rays(rf, [ray], RenderConfig(n_samples=16), np.random.default_rng(0))
        assert out.opacity[0] == 0.0

    def test_clip_to_box(self):
        o = np.array([[0.0, 0.0, -5.0], [5.0, 5.0, 5.0]])
        d = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        near, far, empty = clip_to_box(o, d, np.full(2, 0.1), np.full(2, 60.0), -np.ones(3) * 2, np.ones(3) * 2)
        np.testing.assert_allclose([near[0], far[0]], [3.0, 7.0])
        assert list(empty) == [False, True]

    def test_quadrature_convergence(self):
        rf = RadianceField(FieldConfig(grid_init_scale=0.05, **BOX), seed=1)
        rays = camera_rays(INTR, SE3Pose.from_rt(np.eye(3), [0, 0, -1.9]), [(30, 30), (50, 40), (70, 20)], far=8.0)
        a = render_rays(rf, rays, RenderConfig(n_samples=256), np.random.default_rng(0))
        b = render_rays(rf, rays, RenderConfig(n_samples=512), np.random.default_rng(0))
        assert np.max(np.abs(a.color - b.color) / np.abs(b.color)) < 0.01

    def test_importance_adds_samples(self):
        rf = slab_field(1.0)
        ray = Ray(np.array([0.0, 0.0, -1.5]), np.array([0.0, 0.0, 1.0]), 0.1, 3.0)
        out = render_rays(rf, [ray], RenderConfig(n_samples=16, importance=True), np.random.default_rng(0))
        t = out.cache[1]
        assert t.shape == (1, 24) and np.all(np.diff(t[0]) >= 0)

    def test_sample_pdf_follows_weights(self):
        t = np.tile(np.arange(4.0), (1, 1))
        w = np.array([[0.0, 1.0, 0.0, 0.0]])
        s = _sample_pdf(t, w, 200, np.array([4.0]), np.random.default_rng(0))
        assert np.mean((s >= 1) & (s < 2)) > 0.99

    def test_backward_shapes_and_zero_adjoint(self):
        rf = RadianceField(FieldConfig(grid_init_scale=0.3, **BOX), seed=0)
        rays = RayBatch.from_rays(camera_rays(INTR, SE3Pose.from_rt(np.eye(3), [0, 0, -1.5]), [(10, 10), (60, 30)]))
        out = render_rays(rf, rays, RenderConfig(n_samples=16), np.random.default_rng(0))
        grads = rf.zero_grads()
        g_o, g_d = render_backward(rf, out, np.zeros((2, 3)), np.zeros(2), None, grads)
        assert g_o.shape == (2, 3) and not g_o.any() and not g_d.any()
        assert all(not g.any() for g in grads.values())
