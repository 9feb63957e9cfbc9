"""Primitive-level checks: analytic gradients vs the central-difference
oracle, the naive sliding-window convolution oracle, and softmax/sigmoid
identities."""

import numpy as np
import pytest

from memseg import numkit as nk


def naive_conv3x3(x, kernels, bias, dilation=1):
    """Quadruple-loop reference convolution (zero padding = dilation)."""
    c_out, c_in, _, _ = kernels.shape
    _, h, w = x.shape
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                acc = bias[o]
                for c in range(c_in):
                    for ky in range(3):
                        for kx in range(3):
                            yy = i + (ky - 1) * dilation
                            xx = j + (kx - 1) * dilation
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += kernels[o, c, ky, kx] * x[c, yy, xx]
                out[o, i, j] = acc
    return out


class TestAffine:
    def test_identity(self):
        p = nk.AffineParams(np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(nk.affine(np.array([3.0, 4.0]), p), [3.0, 4.0])

    def test_direct_arithmetic(self):
        p = nk.AffineParams(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(nk.affine(np.array([1.0, 1.0]), p), [4.0, 8.0])

    def test_extent_mismatch(self):
        p = nk.AffineParams(np.eye(2), np.zeros(2))
        with pytest.raises(nk.DimensionError):
            nk.affine(np.ones(3), p)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        p = nk.make_affine(rng, 4, 3)
        x = rng.normal(size=3)
        v = rng.normal(size=4)  # fixed projection makes the loss scalar

        def loss_of_x(xx):
            return float(v @ nk.affine(xx, p))

        g_x, g_w, g_b = nk.affine_backward(x, p, v)
        assert nk.rel_error(g_x, nk.fd_grad(loss_of_x, x)) < 1e-4

        def loss_of_w(w):
            return float(v @ (w @ x + p.bias))

        assert nk.rel_error(g_w, nk.fd_grad(loss_of_w, p.weight)) < 1e-4

        def loss_of_b(b):
            return float(v @ (p.weight @ x + b))

        assert nk.rel_error(g_b, nk.fd_grad(loss_of_b, p.bias)) < 1e-4

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        p = nk.make_affine(rng, 5, 3)
        xs = rng.normal(size=(7, 3))
        batched = nk.affine_batch(xs, p)
        for i in range(7):
            np.testing.assert_allclose(batched[i], nk.affine(xs[i], p), rtol=0, atol=1e-15)


class TestConv3x3:
    def test_zero_kernels_zero_output(self):
        p = nk.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
        out = nk.conv3x3(np.random.default_rng(0).normal(size=(3, 5, 5)), p)
        np.testing.assert_array_equal(out, np.zeros((2, 5, 5)))

    def test_identity_kernel(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        p = nk.ConvParams(k, np.zeros(1))
        x = np.random.default_rng(0).normal(size=(1, 6, 6))
        np.testing.assert_allclose(nk.conv3x3(x, p), x, atol=0)

    def test_channel_mismatch(self):
        p = nk.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
        with pytest.raises(nk.DimensionError):
            nk.conv3x3(np.zeros((2, 4, 4)), p)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 4, 4))
        p = nk.make_conv(rng, 2, 1)
        expected = naive_conv3x3(x, p.kernels, p.bias)
        np.testing.assert_allclose(nk.conv3x3(x, p), expected, atol=1e-12, rtol=0)

    def test_matches_naive_oracle_all_small_shapes(self):
        rng = np.random.default_rng(11)
        for c_in in (1, 2, 4):
            for c_out in (1, 3, 4):
                for h, w in ((1, 1), (2, 5), (8, 8), (3, 8)):
                    x = rng.normal(size=(c_in, h, w))
                    p = nk.make_conv(rng, c_out, c_in)
                    expected = naive_conv3x3(x, p.kernels, p.bias)
                    np.testing.assert_allclose(nk.conv3x3(x, p), expected, atol=1e-12, rtol=0)

    def test_dilated_matches_naive(self):
        rng = np.random.default_rng(13)
        for d in (2, 4):
            x = rng.normal(size=(2, 6, 6))
            p = nk.make_conv(rng, 2, 2, dilation=d)
            expected = naive_conv3x3(x, p.kernels, p.bias, dilation=d)
            np.testing.assert_allclose(nk.conv3x3(x, p), expected, atol=1e-12, rtol=0)

    def test_gradient_matches_fd(self):
        # channel-major batch layout: (C_in, N, H, W)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 4))
        p = nk.make_conv(rng, 2, 2)
        v = rng.normal(size=(2, 3, 4, 4))

        out, cache = nk.conv3x3_batch(x, p)
        g_x, g_k, g_b = nk.conv3x3_batch_backward(cache, v)

        def loss_of_x(xx):
            o, _ = nk.conv3x3_batch(xx, p)
            return float((o * v).sum())

        assert nk.rel_error(g_x, nk.fd_grad(loss_of_x, x)) < 1e-4

        def loss_of_k(k):
            o, _ = nk.conv3x3_batch(x, nk.ConvParams(k, p.bias))
            return float((o * v).sum())

        assert nk.rel_error(g_k, nk.fd_grad(loss_of_k, p.kernels)) < 1e-4

        def loss_of_b(b):
            o, _ = nk.conv3x3_batch(x, nk.ConvParams(p.kernels, b))
            return float((o * v).sum())

        assert nk.rel_error(g_b, nk.fd_grad(loss_of_b, p.bias)) < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 6, 6))
        p = nk.make_conv(rng, 4, 3)
        a = nk.conv3x3(x, p)
        b = nk.conv3x3(x, p)
        assert np.array_equal(a, b)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nk.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)

    def test_analytic_two_thirds(self):
        out = nk.softmax(np.array([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-12)

    def test_shift_invariance_no_overflow(self):
        out = nk.softmax(np.array([1000.0, 1000.0]))
        np.testing.assert_allclose(out, [0.5, 0.5], atol=0)

    def test_empty_rejected(self):
        with pytest.raises(nk.DimensionError):
            nk.softmax(np.array([]))

    def test_sums_to_one_long_vectors(self):
        rng = np.random.default_rng(17)
        for n in (1, 2, 33, 1024, 4096):
            v = rng.uniform(-50, 50, size=n)
            assert abs(nk.softmax(v).sum() - 1.0) < 1e-9

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(19)
        v = rng.normal(size=6)
        w = rng.normal(size=6)
        a = nk.softmax(v)
        g = nk.softmax_backward(a, w)
        fd = nk.fd_grad(lambda x: float(w @ nk.softmax(x)), v)
        assert nk.rel_error(g, fd) < 1e-4


class TestSigmoid:
    def test_zero(self):
        assert nk.sigmoid(np.array([0.0]))[0] == 0.5

    def test_saturation(self):
        assert abs(nk.sigmoid(np.array([50.0]))[0] - 1.0) < 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(23)
        x = rng.uniform(-30, 30, size=100)
        np.testing.assert_allclose(nk.sigmoid(-x), 1.0 - nk.sigmoid(x), atol=1e-12, rtol=0)

    def test_open_interval(self):
        x = np.linspace(-36, 36, 1000)
        s = nk.sigmoid(x)
        assert np.all(s > 0) and np.all(s < 1)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(29)
        x = rng.normal(size=8)
        w = rng.normal(size=8)
        s = nk.sigmoid(x)
        g = nk.sigmoid_backward(s, w)
        fd = nk.fd_grad(lambda v: float(w @ nk.sigmoid(v)), x)
        assert nk.rel_error(g, fd) < 1e-4


class TestFdGrad:
    def test_quadratic(self):
        g = nk.fd_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-3)
        assert abs(g[0] - 6.0) < 1e-6

    def test_sum_gives_ones(self):
        g = nk.fd_grad(lambda x: float(x.sum()), np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(g, np.ones((2, 3)), atol=1e-10)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            nk.fd_grad(lambda x: 0.0, np.zeros(2), h=0.0)

    def test_nonfinite_rejected(self):
        def f(x):
            with np.errstate(invalid="ignore", divide="ignore"):
                return float(np.log(x[0]))

        with pytest.raises(nk.EvaluationError):
            nk.fd_grad(f, np.array([5e-4]), h=1e-3)

    def test_affine_sigmoid_affine_chain(self):
        rng = np.random.default_rng(31)
        p1 = nk.make_affine(rng, 5, 4)
        p2 = nk.make_affine(rng, 1, 5)
        x = rng.normal(size=4)

        def f(xx):
            return float(nk.affine(nk.sigmoid(nk.affine(xx, p1)), p2)[0])

        s = nk.sigmoid(nk.affine(x, p1))
        g2 = p2.weight[0]
        g1 = nk.sigmoid_backward(s, g2)
        g_x = p1.weight.T @ g1
        assert nk.rel_error(g_x, nk.fd_grad(f, x)) < 1e-4


class TestPoolingAndResampling:
    def test_avgpool_constant(self):
        x = np.full((1, 1, 4, 4), 2.5)
        np.testing.assert_array_equal(nk.avgpool2_batch(x), np.full((1, 1, 2, 2), 2.5))

    def test_avgpool_backward_matches_fd(self):
        rng = np.random.default_rng(37)
        x = rng.normal(size=(1, 2, 4, 4))
        v = rng.normal(size=(1, 2, 2, 2))
        g = nk.avgpool2_batch_backward(v)
        fd = nk.fd_grad(lambda xx: float((nk.avgpool2_batch(xx) * v).sum()), x)
        assert nk.rel_error(g, fd) < 1e-4

    def test_upsample_then_downsample_roundtrip(self):
        rng = np.random.default_rng(41)
        m = (rng.random((4, 4)) > 0.5).astype(float)
        up = nk.upsample_nearest(m, 4)
        np.testing.assert_array_equal(nk.downsample_nearest(up, 4), m)


class TestParamWalker:
    def test_walks_nested_dataclasses(self):
        rng = np.random.default_rng(43)
        p = nk.make_affine(rng, 2, 2)
        paths = dict(nk.param_arrays(p))
        assert set(paths) == {"weight", "bias"}
        paths["weight"][0, 0] = 99.0
        assert p.weight[0, 0] == 99.0  # yielded by reference
