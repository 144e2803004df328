import math

import numpy as np
import pytest

from spikefield import diffcore as dc
from spikefield import spiking
from spikefield.errors import InputError
from spikefield.rendering import (Camera, SampleBatch, composite,
                                  composite_op, generate_rays, ray_box_span,
                                  render_rays, sample_rays)


def look_at_origin(distance=3.0):
    c2w = np.eye(4)
    c2w[2, 3] = distance  # camera on +z looking down -z at the origin
    return c2w


def scalar_composite(sigma, colors, delta, bg):
    """Independent per-sample compositing recurrence (test oracle)."""
    T, acc = 1.0, 0.0
    rgb = np.zeros(3)
    weights = []
    for s, c, d in zip(sigma, colors, delta):
        alpha = 1.0 - math.exp(-s * d)
        w = T * alpha
        weights.append(w)
        rgb += w * np.asarray(c, dtype=float)
        acc += w
        T *= 1.0 - alpha
    return rgb + (1.0 - acc) * np.asarray(bg, dtype=float), acc, np.array(weights)


class TestCamera:
    def test_rejects_non_orthonormal_rotation(self):
        c2w = np.eye(4)
        c2w[0, 0] = 1.5
        with pytest.raises(InputError):
            Camera(c2w, focal=50.0, width=32, height=32)

    def test_rejects_bad_clip_range(self):
        with pytest.raises(InputError):
            Camera(np.eye(4), focal=50.0, width=32, height=32, near=2.0, far=1.0)


class TestGenerateRays:
    def test_principal_pixel_matches_forward_axis(self):
        cam = Camera(look_at_origin(), focal=40.0, width=33, height=33)
        _, dirs = generate_rays(cam, np.array([[16, 16]]))
        np.testing.assert_allclose(dirs[0], cam.forward, atol=1e-12)

    def test_unit_norm(self):
        cam = Camera(look_at_origin(), focal=40.0, width=32, height=24)
        px = np.stack(np.meshgrid(np.arange(32), np.arange(24)), -1).reshape(-1, 2)
        _, dirs = generate_rays(cam, px)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-9)

    def test_corner_pixel_pinhole_formula(self):
        w, h, f = 32, 24, 41.5
        cam = Camera(look_at_origin(), focal=f, width=w, height=h)
        _, dirs = generate_rays(cam, np.array([[0, 0]]))
        # camera at +z looking toward origin: camera axes == world axes
        expected = np.array([(0.5 - w / 2) / f, -(0.5 - h / 2) / f, -1.0])
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(dirs[0], expected, atol=1e-12)

    def test_out_of_bounds_pixel_rejected(self):
        cam = Camera(look_at_origin(), focal=40.0, width=32, height=32)
        with pytest.raises(InputError):
            generate_rays(cam, np.array([[32, 0]]))


class TestSampleRays:
    def test_midpoints_without_jitter(self):
        t, delta = sample_rays(np.array([0.0]), np.array([1.0]), 4, jitter=False)
        np.testing.assert_allclose(t[0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(delta[0], 0.25)

    def test_jitter_keeps_samples_in_bins(self):
        rng = np.random.default_rng(0)
        t, _ = sample_rays(np.zeros(50), np.ones(50), 16, jitter=True, rng=rng)
        edges = np.linspace(0, 1, 17)
        assert (t >= edges[:-1]).all() and (t <= edges[1:]).all()
        assert (np.diff(t, axis=1) > 0).all()

    def test_too_few_samples_rejected(self):
        with pytest.raises(InputError):
            sample_rays(np.zeros(1), np.ones(1), 1, jitter=False)


class TestComposite:
    def test_opaque_limit(self):
        rgb, acc, w = composite(np.array([[1e4]]), np.array([[[0.2, 0.4, 0.6]]]),
                                np.array([[1.0]]), np.zeros(3))
        np.testing.assert_allclose(w[0], [1.0], atol=1e-12)
        np.testing.assert_allclose(acc, [1.0], atol=1e-12)
        np.testing.assert_allclose(rgb[0], [0.2, 0.4, 0.6], atol=1e-12)

    def test_empty_space_returns_background(self):
        bg = np.array([1.0, 0.5, 0.25])
        rgb, acc, w = composite(np.zeros((2, 8)),
                                np.full((2, 8, 3), 0.9), np.full((2, 8), 0.1), bg)
        assert np.array_equal(w, np.zeros((2, 8)))
        np.testing.assert_array_equal(acc, 0.0)
        np.testing.assert_allclose(rgb, np.tile(bg, (2, 1)))

    def test_two_sample_oracle(self):
        sigma = np.array([1.0, 1.0])
        delta = np.array([1.0, 1.0])
        colors = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.5]])
        bg = np.array([0.0, 0.0, 1.0])
        rgb, acc, w = composite(sigma[None], colors[None], delta[None], bg)
        o_rgb, o_acc, o_w = scalar_composite(sigma, colors, delta, bg)
        np.testing.assert_allclose(w[0], o_w, atol=1e-15)
        np.testing.assert_allclose(acc[0], o_acc, atol=1e-15)
        np.testing.assert_allclose(rgb[0], o_rgb, atol=1e-15)
        # frozen values from the recurrence
        assert w[0, 0] == pytest.approx(0.6321205588285577, abs=1e-12)
        assert w[0, 1] == pytest.approx(0.23254415793482963, abs=1e-12)
        assert acc[0] == pytest.approx(0.8646647167633873, abs=1e-12)

    def test_accumulation_identity(self):
        # acc == 1 - prod(1 - alpha) to 1e-12 on random rays
        rng = np.random.default_rng(1)
        sigma = rng.uniform(0, 5, size=(200, 32))
        delta = rng.uniform(0.01, 0.2, size=(200, 32))
        colors = rng.uniform(0, 1, size=(200, 32, 3))
        _, acc, _ = composite(sigma, colors, delta, np.zeros(3))
        alt = 1.0 - np.prod(np.exp(-sigma * delta), axis=-1)
        np.testing.assert_allclose(acc, alt, atol=1e-12)

    def test_segment_splitting_consistency(self):
        rng = np.random.default_rng(2)
        sigma = rng.uniform(0, 4, size=(50, 16))
        delta = rng.uniform(0.02, 0.3, size=(50, 16))
        colors = rng.uniform(0, 1, size=(50, 16, 3))
        bg = np.array([0.3, 0.3, 0.3])
        rgb, acc, _ = composite(sigma, colors, delta, bg)
        sigma2 = np.repeat(sigma, 2, axis=1)
        delta2 = np.repeat(delta / 2.0, 2, axis=1)
        colors2 = np.repeat(colors, 2, axis=1)
        rgb2, acc2, _ = composite(sigma2, colors2, delta2, bg)
        np.testing.assert_allclose(rgb, rgb2, atol=1e-9)
        np.testing.assert_allclose(acc, acc2, atol=1e-9)

    def test_negative_density_rejected(self):
        with pytest.raises(InputError):
            composite(np.array([[-0.1]]), np.ones((1, 1, 3)), np.ones((1, 1)),
                      np.zeros(3))


class TestCompositeOp:
    def test_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        n_rays, n_samples = 3, 6
        delta = rng.uniform(0.05, 0.2, size=(n_rays, n_samples))
        bg = np.array([0.1, 0.2, 0.3])
        proj_rgb = rng.standard_normal((n_rays, 3))
        proj_w = rng.standard_normal((n_rays, n_samples))
        p = dc.FlatParams()
        p.add("sigma", rng.uniform(0.1, 3, size=(n_rays, n_samples)))
        p.add("colors", rng.uniform(0, 1, size=(n_rays, n_samples, 3)))

        def f(params):
            t = dc.Tape(params)
            rgb, acc, w = composite_op(t.param("sigma"), t.param("colors"),
                                       delta, bg)
            return dc.sum(rgb * proj_rgb) + dc.sum(acc) * 0.7 + dc.sum(w * proj_w)

        report = dc.grad_check(f, p, eps=1e-6)
        assert report.max_rel_err < 1e-4

    def test_spiking_cut_samples_zero_weight_and_zero_gradient(self):
        rng = np.random.default_rng(4)
        n_rays, n_samples = 4, 8
        sigma = rng.uniform(0.0, 2.0, size=(n_rays, n_samples))
        theta = 0.9
        delta = np.full((n_rays, n_samples), 0.1)
        colors = rng.uniform(0, 1, size=(n_rays, n_samples, 3))
        p = dc.FlatParams()
        p.add("sigma", sigma)
        p.add("theta_th", theta)
        t = dc.Tape(p)
        sig_flat = dc.reshape(t.param("sigma"), (-1,))
        gated = spiking.attach(sig_flat, t.param("theta_th"))
        rgb, acc, w = composite_op(dc.reshape(gated, (n_rays, n_samples)),
                                   t.constant(colors), delta, np.ones(3))
        cut = sigma < theta
        assert np.array_equal(w.value[cut], np.zeros(cut.sum()))
        loss = dc.sum(rgb * rng.standard_normal((n_rays, 3))) + dc.sum(acc)
        grad = t.backward(loss)
        g_sigma = grad[p.slice_of("sigma")].reshape(n_rays, n_samples)
        assert np.array_equal(g_sigma[cut], np.zeros(cut.sum()))
        assert np.abs(g_sigma[~cut]).max() > 0


class TestRenderRays:
    def test_pure_pass_matches_compositor_invariants(self):
        rng = np.random.default_rng(5)
        origins = np.tile([0.0, 0.0, 3.0], (20, 1))
        dirs = rng.standard_normal((20, 3)) * 0.1 + [0, 0, -1.0]
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

        def density(x):
            return 8.0 * np.exp(-8.0 * (x ** 2).sum(-1))

        def color(x, d):
            return np.clip(0.5 + 0.4 * x, 0, 1)

        rgb, acc, batch = render_rays(density, color, origins, dirs,
                                      np.full(20, 2.0), np.full(20, 4.0),
                                      32, np.ones(3))
        assert isinstance(batch, SampleBatch)
        batch.validate()
        np.testing.assert_allclose(batch.weights.sum(-1), acc, atol=1e-12)
        # transmittance starts at 1 and never increases
        assert np.all(batch.trans[:, 0] == 1.0)
        assert np.all(np.diff(batch.trans, axis=1) <= 1e-15)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_invariant_violation_rejected(self):
        batch = SampleBatch(np.zeros((1, 2, 3)), np.array([[0.5, -0.1]]),
                            np.zeros((1, 2)), np.zeros((1, 2, 3)),
                            np.zeros((1, 2)), np.ones((1, 2)))
        with pytest.raises(InputError):
            batch.validate()


class TestRayBoxSpan:
    def test_ray_through_box(self):
        near, far = ray_box_span(np.array([[0.0, 0.0, 3.0]]),
                                 np.array([[0.0, 0.0, -1.0]]),
                                 (-1, -1, -1), (1, 1, 1))
        assert near[0] == pytest.approx(2.0)
        assert far[0] == pytest.approx(4.0)

    def test_missing_ray_gets_far_interval(self):
        near, far = ray_box_span(np.array([[0.0, 0.0, 3.0]]),
                                 np.array([[0.0, 1.0, 0.0]]),
                                 (-1, -1, -1), (1, 1, 1))
        assert near[0] > 2.0 and far[0] > near[0]
