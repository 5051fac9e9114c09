import math

import numpy as np
import pytest

from icnet import kernels
from icnet import tensor as T
from icnet.errors import ShapeError
from oracles import bilinear_pixel, conv2d_loops, xent_direct


def proj_loss(fwd, r):
    """Scalar loss sum(r * fwd(x)) and its gradient via the supplied backward."""
    return lambda x: float((fwd(x) * r).sum())


class TestConv2d:
    def test_scalar_product(self):
        x = np.array([[[[2.0]]]])
        w = np.array([[[[3.0]]]])
        assert T.conv2d(x, w, np.zeros(1)).item() == 6.0

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(T.conv2d(x, w, padding=1), x)

    def test_strided_dilated_matches_loop_nest(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = T.conv2d(x, w, b, stride=2, dilation=2, padding=2)
        np.testing.assert_array_equal(got, conv2d_loops(x, w, b, 2, 2, 2))

    @pytest.mark.parametrize("backend", ["python", "compiled"])
    def test_backends_bitwise(self, rng, backend):
        if backend == "compiled" and not kernels.compiled_available():
            pytest.skip("extension not built")
        x = rng.standard_normal((2, 5, 7, 6)).astype(np.float32)
        w = rng.standard_normal((6, 5, 3, 3)).astype(np.float32)
        prev = kernels.use_backend(backend)
        try:
            got = T.conv2d(x, w, None, stride=1, dilation=1, padding=1)
        finally:
            kernels.use_backend(prev)
        np.testing.assert_array_equal(got, conv2d_loops(x, w, None, 1, 1, 1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))

    def test_nonpositive_output(self):
        with pytest.raises(ShapeError, match="output"):
            T.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))


class TestConv2dGrad:
    def test_zero_upstream(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        dx, dw, db = T.conv2d_grad(x, w, np.zeros((1, 3, 4, 4)), padding=1)
        assert not dx.any() and not dw.any() and not db.any()

    def test_single_pixel_chain_rule(self):
        x = np.array([[[[2.0], [0]]]]).reshape(1, 2, 1, 1)
        w = np.array([[[[3.0]], [[5.0]]]])  # (1, 2, 1, 1)
        dy = np.array([[[[7.0]]]])
        dx, dw, db = T.conv2d_grad(x, w, dy)
        np.testing.assert_array_equal(dx.ravel(), [21.0, 35.0])
        np.testing.assert_array_equal(dw.ravel(), [14.0, 0.0])
        assert db[0] == 7.0

    @pytest.mark.parametrize("k,s,d,p", [(3, 1, 1, 1), (3, 2, 2, 2), (1, 1, 1, 0), (5, 2, 1, 2)])
    def test_finite_differences(self, rng, k, s, d, p):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        y = T.conv2d(x, w, b, s, d, p)
        r = rng.standard_normal(y.shape)
        dx, dw, db = T.conv2d_grad(x, w, r, s, d, p)
        assert T.finite_diff_check(lambda v: (T.conv2d(v, w, b, s, d, p) * r).sum(), x, grad=dx) < 1e-6
        assert T.finite_diff_check(lambda v: (T.conv2d(x, v, b, s, d, p) * r).sum(), w, grad=dw) < 1e-6
        assert T.finite_diff_check(lambda v: (T.conv2d(x, w, v, s, d, p) * r).sum(), b, grad=db) < 1e-6


class TestConvTranspose:
    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_doubles_dims(self, rng, k):
        x = rng.standard_normal((1, 4, 3, 5))
        w = rng.standard_normal((4, 2, k, k))
        y = T.conv_transpose2d(x, w, stride=2, padding=(k - 1) // 2, output_padding=1)
        assert y.shape == (1, 2, 6, 10)

    def test_delta_scatter(self, rng):
        w = rng.standard_normal((1, 1, 3, 3))
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 2] = 1
        y = T.conv_transpose2d(x, w, stride=2, padding=0)
        want = np.zeros((1, 1, 7, 7))
        # input (1, 2) lands at output (2, 4)
        want[0, 0, 2:5, 4:7] = w[0, 0]
        np.testing.assert_array_equal(y, want)

    def test_finite_differences(self, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        w = rng.standard_normal((3, 2, 5, 5))
        b = rng.standard_normal(2)
        y = T.conv_transpose2d(x, w, b, 2, 2, 1)
        r = rng.standard_normal(y.shape)
        dx, dw, db = T.conv_transpose2d_grad(x, w, r, 2, 2, 1)
        assert T.finite_diff_check(lambda v: (T.conv_transpose2d(v, w, b, 2, 2, 1) * r).sum(), x, grad=dx) < 1e-6
        assert T.finite_diff_check(lambda v: (T.conv_transpose2d(x, v, b, 2, 2, 1) * r).sum(), w, grad=dw) < 1e-6
        assert T.finite_diff_check(lambda v: (T.conv_transpose2d(x, w, v, 2, 2, 1) * r).sum(), b, grad=db) < 1e-6


class TestBilinear:
    def test_constant(self):
        x = np.full((1, 2, 3, 4), 2.5)
        np.testing.assert_array_equal(T.bilinear_resize(x, 7, 9), np.full((1, 2, 7, 9), 2.5))

    def test_ramp(self):
        x = np.array([0.0, 1, 2]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(T.bilinear_resize(x, 1, 5).ravel(), [0, 0.5, 1, 1.5, 2])

    def test_same_dims_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        np.testing.assert_array_equal(T.bilinear_resize(x, 4, 5), x)

    def test_down_up_constant(self):
        x = np.full((1, 1, 8, 8), -3.25)
        np.testing.assert_array_equal(T.bilinear_resize(T.bilinear_resize(x, 3, 3), 8, 8), x)

    def test_matches_per_pixel_formula(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        y = T.bilinear_resize(x, 8, 8)
        want = np.array([[bilinear_pixel(x[0, 0], 8, 8, i, j) for j in range(8)] for i in range(8)])
        np.testing.assert_allclose(y[0, 0], want, rtol=0, atol=1e-14)

    def test_out_of_one(self):
        x = np.arange(6.0).reshape(1, 1, 2, 3)
        np.testing.assert_array_equal(T.bilinear_resize(x, 1, 1).ravel(), [0.0])

    def test_gradient(self, rng):
        x = rng.standard_normal((2, 2, 3, 5))
        r = rng.standard_normal((2, 2, 7, 4))
        dx = T.bilinear_resize_grad(x.shape, r)
        assert T.finite_diff_check(lambda v: (T.bilinear_resize(v, 7, 4) * r).sum(), x, grad=dx) < 1e-6

    def test_bad_target(self):
        with pytest.raises(ShapeError):
            T.bilinear_resize(np.zeros((1, 1, 2, 2)), 0, 3)


class TestBatchNorm:
    def _params(self, c, dtype=np.float64):
        return np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)

    def test_infer_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        g, b, m, v = self._params(3)
        y, _ = T.batch_norm(x, g, b, m, v, eps=0.0, train=False)
        np.testing.assert_array_equal(y, x)

    def test_train_constant_input(self):
        x = np.full((2, 3, 4, 4), 7.0)
        g, b, m, v = self._params(3)
        g[:] = 2.0
        b[:] = 0.5
        y, _ = T.batch_norm(x, g, b, m, v, train=True)
        np.testing.assert_array_equal(y, np.full_like(x, 0.5))

    def test_train_moments(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 1
        g = np.array([0.5, 2.0, -1.5])
        b = np.array([1.0, -2.0, 0.25])
        y, _ = T.batch_norm(x, g, b, np.zeros(3), np.ones(3), eps=0.0, train=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), b, atol=1e-10, rtol=0)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), g**2, atol=1e-6, rtol=0)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        m, v = np.zeros(2), np.ones(2)
        T.batch_norm(x, np.ones(2), np.zeros(2), m, v, momentum=0.1, train=True)
        np.testing.assert_allclose(m, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(v, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    @pytest.mark.parametrize("train", [True, False])
    def test_gradient(self, rng, train):
        x = rng.standard_normal((3, 2, 4, 3))
        g = rng.standard_normal(2)
        b = rng.standard_normal(2)
        rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
        r = rng.standard_normal(x.shape)

        def f(xv, gv, bv):
            return (T.batch_norm(xv, gv, bv, rm.copy(), rv.copy(), train=train)[0] * r).sum()

        _, cache = T.batch_norm(x, g, b, rm.copy(), rv.copy(), train=train)
        dx, dg, db = T.batch_norm_grad(r, g, cache)
        assert T.finite_diff_check(lambda v: f(v, g, b), x, grad=dx) < 1e-6
        assert T.finite_diff_check(lambda v: f(x, v, b), g, grad=dg) < 1e-6
        assert T.finite_diff_check(lambda v: f(x, g, v), b, grad=db) < 1e-6


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(np.array([-1.0, 0, 2]).reshape(1, 3, 1, 1)).ravel(), [0, 0, 2])

    def test_add_zero(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(T.add(x, np.zeros_like(x)), x)

    def test_add_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))

    def test_relu_grad(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
        r = rng.standard_normal(x.shape)
        dx = T.relu_grad(x, r)
        assert T.finite_diff_check(lambda v: (T.relu(v) * r).sum(), x, grad=dx) < 1e-8
        assert T.relu_grad(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1))).item() == 0


class TestPool:
    def test_avg_constant(self):
        y, _ = T.pool2d(np.full((1, 2, 4, 4), 3.0), "avg", 2, 2)
        np.testing.assert_array_equal(y, np.full((1, 2, 2, 2), 3.0))

    def test_max_window(self):
        x = np.array([[1.0, 3], [2, 0]]).reshape(1, 1, 2, 2)
        assert T.pool2d(x, "max", 2, 2)[0].item() == 3

    def test_max_tie_first_in_scan_order(self):
        x = np.array([[1.0, 5], [5, 0]]).reshape(1, 1, 2, 2)
        y, cache = T.pool2d(x, "max", 2, 2)
        dx = T.pool2d_grad(np.ones_like(y), cache)
        np.testing.assert_array_equal(dx.reshape(2, 2), [[0, 1], [0, 0]])

    def test_adaptive_global_mean_exact(self, rng):
        x = rng.standard_normal((2, 3, 7, 5))
        np.testing.assert_array_equal(T.adaptive_avg_pool2d(x, 1)[:, :, 0, 0], x.mean(axis=(2, 3)))

    def test_window_too_large(self):
        with pytest.raises(ShapeError):
            T.pool2d(np.zeros((1, 1, 2, 2)), "max", 3, 1)

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_gradient(self, rng, kind):
        x = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=float)).reshape(2, 2, 6, 6) / 10
        y, cache = T.pool2d(x, kind, 3, 2, padding=1)
        r = rng.standard_normal(y.shape)
        dx = T.pool2d_grad(r, cache)
        assert T.finite_diff_check(lambda v: (T.pool2d(v, kind, 3, 2, 1)[0] * r).sum(), x, grad=dx) < 1e-6

    @pytest.mark.parametrize("bins", [1, 2, 3, 6])
    def test_adaptive_gradient(self, rng, bins):
        x = rng.standard_normal((1, 2, 5, 4))
        r = rng.standard_normal((1, 2, bins, bins))
        dx = T.adaptive_avg_pool2d_grad(x.shape, r)
        assert T.finite_diff_check(lambda v: (T.adaptive_avg_pool2d(v, bins) * r).sum(), x, grad=dx) < 1e-6


class TestSoftmaxXent:
    def test_uniform(self):
        loss, _ = T.softmax_xent_map(np.zeros((1, 4, 2, 2)), np.zeros((1, 2, 2), int))
        assert loss == pytest.approx(math.log(4), abs=1e-12)
        assert loss == pytest.approx(1.386294, abs=1e-6)

    def test_saturated(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 1000
        loss, _ = T.softmax_xent_map(logits, np.ones((1, 2, 2), int))
        assert 0 <= loss < 1e-12

    def test_all_ignored(self):
        loss, g = T.softmax_xent_map(np.ones((1, 3, 2, 2)), np.full((1, 2, 2), 255))
        assert loss == 0.0 and not g.any()

    def test_direct_oracle_and_gradient(self, rng):
        logits = rng.standard_normal((1, 3, 2, 2))
        labels = np.array([[[0, 2], [255, 1]]])
        loss, g = T.softmax_xent_map(logits, labels)
        assert loss == pytest.approx(xent_direct(logits, labels, 255), rel=1e-14)
        assert T.finite_diff_check(lambda v: T.softmax_xent_map(v, labels), logits) < 1e-7
        assert not g[0, :, 1, 0].any()

    def test_bad_labels(self):
        with pytest.raises(ShapeError):
            T.softmax_xent_map(np.zeros((1, 3, 2, 2)), np.full((1, 2, 2), 3))


class TestFiniteDiff:
    def test_quadratic(self, rng):
        x = rng.standard_normal(20)
        assert T.finite_diff_check(lambda v: ((v**2).sum(), 2 * v), x, step=1e-5) < 1e-8

    def test_linear(self, rng):
        x = rng.standard_normal(10)
        a = rng.standard_normal(10)
        assert T.finite_diff_check(lambda v: (a @ v, a), x) < 1e-9

    def test_restores_input(self, rng):
        x = rng.standard_normal(5)
        before = x.copy()
        T.finite_diff_check(lambda v: ((v**3).sum(), 3 * v**2), x)
        np.testing.assert_array_equal(x, before)


def test_nearest_resize_picks_centres():
    lab = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(T.nearest_resize(lab, 2, 2), [[5, 7], [13, 15]])
    np.testing.assert_array_equal(T.nearest_resize(lab, 4, 4), lab)
