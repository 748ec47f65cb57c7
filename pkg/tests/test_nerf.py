import numpy as np
import pytest

from promptnerf import nerf, scenegen as sg, tensor as T
from promptnerf.nerf import NerfArch, RayBatch, Tensor

from gradcheck import assert_grads_match


class TestPositionalEncode:
    def test_l0_is_identity(self):
        pts = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(nerf.positional_encode(pts, 0), pts)

    def test_origin_encoding(self):
        enc = nerf.positional_encode(np.zeros((1, 3)), 4)
        assert np.all(enc[0, :3] == 0.0)
        sincos = enc[0, 3:].reshape(4, 2, 3)
        assert np.all(sincos[:, 0, :] == 0.0)  # sin terms
        assert np.all(sincos[:, 1, :] == 1.0)  # cos terms

    def test_width_for_default_l(self):
        enc = nerf.positional_encode(np.zeros((2, 3)), 6)
        assert enc.shape == (2, 39)


class TestSharedInit:
    def test_bit_identical_for_same_seed(self):
        a = nerf.shared_init(NerfArch(), 42)
        b = nerf.shared_init(NerfArch(), 42)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_biases_zero_and_weights_bounded(self):
        p = nerf.shared_init(NerfArch(), 7)
        dims = p.arch.layer_dims
        for j, (w, b) in enumerate(zip(p.weights, p.biases)):
            assert np.all(b == 0.0)
            bound = np.sqrt(6.0 / (dims[j] + dims[j + 1]))
            assert np.abs(w).max() <= bound

    def test_different_seeds_differ(self):
        a = nerf.shared_init(NerfArch(), 1)
        b = nerf.shared_init(NerfArch(), 2)
        assert not np.array_equal(a.weights[0], b.weights[0])


class TestForward:
    def test_zero_params_give_gray_and_softplus_zero(self):
        arch = NerfArch()
        zero = nerf.NerfParams([np.zeros((i, o)) for i, o in
                                zip(arch.layer_dims[:-1], arch.layer_dims[1:])],
                               [np.zeros(o) for o in arch.layer_dims[1:]], arch)
        ws, bs = zero.as_tensors()
        rgb, sigma = nerf.nerf_forward(ws, bs, Tensor(np.random.rand(4, 39)))
        np.testing.assert_allclose(rgb.data, 0.5)
        np.testing.assert_allclose(sigma.data, np.log(2.0))

    def test_output_ranges_for_random_params(self):
        p = nerf.shared_init(NerfArch(), 3)
        ws, bs = p.as_tensors()
        enc = Tensor(nerf.positional_encode(np.random.default_rng(0).normal(size=(50, 3)), 6))
        rgb, sigma = nerf.nerf_forward(ws, bs, enc)
        assert np.all((rgb.data > 0.0) & (rgb.data < 1.0))
        assert np.all(sigma.data >= 0.0)

    def test_width_mismatch(self):
        p = nerf.shared_init(NerfArch(), 3)
        ws, bs = p.as_tensors()
        with pytest.raises(T.ShapeError):
            nerf.nerf_forward(ws, bs, Tensor(np.zeros((2, 10))))

    def test_rendered_pixel_grad_matches_finite_differences(self):
        arch = NerfArch(pe_frequencies=1, hidden=8)
        p = nerf.shared_init(arch, 11)
        ws, bs = p.as_tensors(requires_grad=True)
        rays = RayBatch(np.array([[2.5, 0.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]]), 1.3, 3.7)

        def loss():
            return T.tsum(nerf.render_rays((ws, bs), rays, 8))

        assert_grads_match(loss, [ws[-1], bs[-1]])


class TestRenderRays:
    def test_zero_sigma_network_renders_white(self):
        # drive sigma to ~0 via a large negative output bias on the 4th unit
        p = nerf.shared_init(NerfArch(), 5)
        p.biases[-1][3] = -60.0
        rays = RayBatch(np.tile([[2.5, 0.0, 0.0]], (4, 1)),
                        np.array([[-1, 0, 0], [-1, 0.01, 0], [-1, 0, 0.01], [-1, -0.01, 0]])
                        / np.linalg.norm([[1, 0, 0], [1, 0.01, 0], [1, 0, 0.01], [1, 0.01, 0]],
                                         axis=1, keepdims=True),
                        1.3, 3.7)
        colors = nerf.render_rays(p, rays, 32)
        np.testing.assert_allclose(colors.data, 1.0, atol=1e-9)

    def test_homogeneous_medium_analytic_transmittance(self):
        # constant sigma=1, red color fed straight into the compositor
        n, s = 1, 256
        sigma = Tensor(np.ones((n, s)))
        rgb = Tensor(np.tile([1.0, 0.0, 0.0], (n * s, 1)))
        out = nerf.composite(sigma, rgb, 2.0 / s)
        expected = np.exp(-2.0)
        assert out.data[0, 0] == pytest.approx(1.0, abs=1e-3)
        assert out.data[0, 1] == pytest.approx(expected, abs=1e-3)
        assert out.data[0, 2] == pytest.approx(expected, abs=1e-3)

    def test_weights_nonnegative_and_sum_at_most_one(self):
        p = nerf.shared_init(NerfArch(), 6)
        rng = np.random.default_rng(1)
        dirs = rng.normal(size=(20, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rays = RayBatch(np.tile([[2.5, 0.0, 0.0]], (20, 1)), dirs, 1.3, 3.7)
        # recompute the weights the way composite does
        t, delta = nerf.sample_depths(20, 32, 1.3, 3.7, None)
        pts = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
        ws, bs = p.as_tensors()
        enc = Tensor(nerf.positional_encode(pts.reshape(-1, 3), 6))
        _, sigma = nerf.nerf_forward(ws, bs, enc)
        sigd = sigma.data.reshape(20, 32) * delta
        trans = np.exp(-np.cumsum(np.concatenate([np.zeros((20, 1)), sigd[:, :-1]], axis=1), axis=1))
        w = trans * (1.0 - np.exp(-sigd))
        assert np.all(w >= 0.0)
        assert np.all(w.sum(axis=1) <= 1.0 + 1e-12)

    def test_sample_count_guard(self):
        p = nerf.shared_init(NerfArch(), 6)
        rays = RayBatch(np.array([[2.5, 0.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]]), 1.3, 3.7)
        with pytest.raises(ValueError):
            nerf.render_rays(p, rays, 1)

    def test_quadrature_converges_with_sample_density(self):
        spec = sg.SceneSpec("q", "sphere", (0.9, 0.3, 0.2), 0.5)
        pose = sg.sample_cameras(1)[0]
        a = sg.render_reference(spec, pose, 16, n_samples=64)
        b = sg.render_reference(spec, pose, 16, n_samples=128)
        assert np.abs(a - b).max() < 1e-2


class TestPsnr:
    def test_identical_images_capped(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert nerf.psnr(img, img) == 99.0

    def test_black_vs_white_is_zero(self):
        assert nerf.psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)

    def test_mse_001_is_20db(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)
        assert nerf.psnr(a, b) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nerf.psnr(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


@pytest.fixture(scope="module")
def scene():
    spec = sg.make_spec("sphere", 0, 99)
    poses = sg.sample_cameras(4)
    views = np.stack([sg.render_reference(spec, p, 16) for p in poses])
    return views, poses


class TestTrainNerf:

    def test_zero_iterations_returns_init(self, scene):
        views, poses = scene
        init = nerf.shared_init(NerfArch(), 1234)
        cfg = nerf.TrainNerfConfig(iterations=0)
        report = nerf.train_nerf(views, poses, init, cfg)
        for w0, w1 in zip(init.weights, report.params.weights):
            assert np.array_equal(w0, w1)
        assert len(report.psnr_history) == 1

    def test_training_is_deterministic(self, scene):
        views, poses = scene
        init = nerf.shared_init(NerfArch(pe_frequencies=2, hidden=16), 1234)
        cfg = nerf.TrainNerfConfig(iterations=30, rays_per_step=32, n_samples=8,
                                   checkpoint_stride=30, seed=5)
        a = nerf.train_nerf(views, poses, init, cfg)
        b = nerf.train_nerf(views, poses, init, cfg)
        for wa, wb in zip(a.params.weights, b.params.weights):
            assert np.array_equal(wa, wb)
        assert a.psnr_history == b.psnr_history

    def test_loss_decreases(self, scene):
        views, poses = scene
        init = nerf.shared_init(NerfArch(pe_frequencies=2, hidden=16), 1234)
        cfg = nerf.TrainNerfConfig(iterations=150, rays_per_step=32, n_samples=8,
                                   checkpoint_stride=150, seed=5)
        report = nerf.train_nerf(views, poses, init, cfg)
        # windowed means over the PSNR-checkpointed loss: compare to init loss
        init_render = nerf.render_image(init, poses[0], 16, 8)
        init_psnr = nerf.psnr(init_render, views[0])
        assert report.psnr_history[-1][1] > init_psnr
