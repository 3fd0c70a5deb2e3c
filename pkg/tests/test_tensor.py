"""Numeric core: primitive semantics, oracles, and gradient checks."""

import numpy as np
import pytest

from ctxvae import tensor as T


def conv2d_loop(x, w, stride=1, padding=0):
    """Naive quadruple-loop cross-correlation oracle."""
    B, Ci, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((B, Ci, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(Ci):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[b, o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = T.constant(np.random.default_rng(0).normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = T.conv2d(x, T.constant(w), stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_kernel(self):
        x = T.constant(np.random.default_rng(1).normal(size=(1, 2, 6, 6)))
        w = T.constant(np.zeros((4, 2, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1)
        assert np.all(out.data == 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 8, 8))
        w = rng.normal(size=(4, 2, 3, 3))
        got = T.conv2d(T.constant(x), T.constant(w), stride=1, padding=0).data
        want = conv2d_loop(x, w)
        assert got.shape == (1, 4, 6, 6)
        np.testing.assert_allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_stride_padding_against_oracle(self, stride, padding):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 9, 9))
        w = rng.normal(size=(2, 3, 3, 3))
        got = T.conv2d(T.constant(x), T.constant(w), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, conv2d_loop(x, w, stride, padding), atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 6, 6))
        y = rng.normal(size=(1, 2, 6, 6))
        w = T.constant(rng.normal(size=(3, 2, 3, 3)))
        a, b = 1.7, -0.3
        lhs = T.conv2d(T.constant(a * x + b * y), w, padding=1).data
        rhs = a * T.conv2d(T.constant(x), w, padding=1).data \
            + b * T.conv2d(T.constant(y), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_channel_mismatch_names_both_shapes(self):
        x = T.constant(np.zeros((1, 2, 5, 5)))
        w = T.constant(np.zeros((4, 3, 3, 3)))
        with pytest.raises(ValueError, match=r"\(1, 2, 5, 5\).*\(4, 3, 3, 3\)"):
            T.conv2d(x, w)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(T.constant(np.zeros((1, 1, 4, 4))), T.constant(np.zeros((1, 1, 2, 2))))


class TestPoolingAndUpsampling:
    def test_avg_pool_window_one_is_identity(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
        out = T.avg_pool(T.constant(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_avg_pool_symmetric_block(self):
        x = np.array([[0.0, 1.0], [1.0, 0.0]]).reshape(1, 1, 2, 2)
        out = T.avg_pool(T.constant(x), 2)
        assert out.data.reshape(()) == pytest.approx(0.5)

    def test_avg_pool_matches_block_mean_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 1, 4, 4))
        out = T.avg_pool(T.constant(x), 2).data
        want = np.zeros((1, 1, 2, 2))
        for i in range(2):
            for j in range(2):
                want[0, 0, i, j] = x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()
        np.testing.assert_allclose(out, want, atol=1e-15)

    def test_avg_pool_rejects_non_divisible(self):
        with pytest.raises(ValueError, match="divisible"):
            T.avg_pool(T.constant(np.zeros((1, 1, 5, 5))), 2)

    def test_upsample_factor_one_and_block(self):
        a = T.constant(np.array([[2.5]]).reshape(1, 1, 1, 1))
        np.testing.assert_array_equal(T.nearest_upsample(a, 1).data, a.data)
        out = T.nearest_upsample(a, 2).data
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))

    def test_upsample_rejects_bad_factor(self):
        with pytest.raises(ValueError, match="factor"):
            T.nearest_upsample(T.constant(np.zeros((1, 1, 2, 2))), 0)

    def test_pool_inverts_upsample_exactly(self):
        x = np.random.default_rng(7).normal(size=(2, 3, 5, 5))
        out = T.avg_pool(T.nearest_upsample(T.constant(x), 2), 2)
        np.testing.assert_array_equal(out.data, x)


class TestSilu:
    def test_zero(self):
        assert T.silu(T.constant(np.array(0.0))).data == 0.0

    def test_asymptote(self):
        assert abs(T.silu(T.constant(np.array(20.0))).data - 20.0) < 1e-7

    def test_derivative_at_zero(self):
        h = 1e-6
        fd = (T.silu(T.constant(np.array(h))).data
              - T.silu(T.constant(np.array(-h))).data) / (2 * h)
        assert fd == pytest.approx(0.5, abs=1e-9)
        w = T.Parameter(np.array(0.0), name="w")
        out = T.silu(w)
        T.backward(out)
        assert w.grad == pytest.approx(0.5, abs=1e-12)


class TestGradCheck:
    def test_square_at_three(self):
        w = T.Parameter(np.array(3.0), name="w")
        report = T.grad_check(lambda: T.square(w), [w], rel_tol=1e-8)
        assert report.ok, str(report)
        T.zero_grads([w])
        T.backward(T.square(w))
        assert w.grad == pytest.approx(6.0, abs=1e-12)

    def test_silu_sum(self):
        rng = np.random.default_rng(8)
        x = T.constant(rng.normal(size=(32,)))
        w = T.Parameter(np.array(0.7), name="w")
        fn = lambda: T.sum_(T.silu(w * x))
        report = T.grad_check(fn, [w], rel_tol=1e-5)
        assert report.ok, str(report)

    def test_composed_chain_with_spatial_ops(self):
        rng = np.random.default_rng(9)
        x = T.constant(rng.normal(size=(1, 2, 4, 4)))
        w = T.Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.3, name="conv.w")
        b = T.Parameter(rng.normal(size=(1, 3, 1, 1)) * 0.1, name="conv.b")

        def fn():
            h = T.conv2d(x, w, padding=1) + b
            h = T.silu(h)
            h = T.avg_pool(h, 2)
            h = T.nearest_upsample(h, 2)
            return T.mean(T.square(h))

        report = T.grad_check(fn, [w, b], rel_tol=1e-4)
        assert report.ok, str(report)

    def test_failure_lists_offending_parameter(self):
        w = T.Parameter(np.array(2.0), name="layer.w")
        # deliberately wrong gradient: treat exponent as non-differentiated 3x
        fn = lambda: T.mul(T.square(w), T.constant(np.array(2.0)))
        report = T.grad_check(fn, [w], rel_tol=1e-12, step=1e-3)
        # central differences on w^2*2 are exact up to roundoff, so this passes;
        # now force a real failure by perturbing the analytic gradient path
        assert report.ok
        bad = T.Parameter(np.array(1.0), name="bad.w")
        calls = {"n": 0}

        def noisy():
            calls["n"] += 1
            jitter = 0.0 if calls["n"] == 1 else 0.05
            return T.mul(bad, T.constant(np.array(1.0 + jitter)))

        report = T.grad_check(noisy, [bad], rel_tol=1e-6)
        assert not report.ok
        assert report.failures[0][0] == "bad.w"


class TestRecordSemantics:
    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(10)
        x = T.constant(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
        w = T.Parameter(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), name="w")
        out = T.mean(T.silu(T.conv2d(x, w, padding=1)))
        assert T.replay(out) == out.data

    def test_forward_deterministic_given_seed(self):
        def run():
            rng = np.random.default_rng(11)
            x = T.constant(rng.normal(size=(2, 2, 6, 6)).astype(np.float32))
            w = T.constant(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
            return T.sum_(T.conv2d(x, w, padding=1)).data.copy()

        a, b = run(), run()
        np.testing.assert_array_equal(a, b)

    def test_grad_accumulates_over_reuse(self):
        w = T.Parameter(np.array(2.0), name="w")
        out = w * w  # dout/dw = 2w = 4
        T.backward(out)
        assert w.grad == pytest.approx(4.0)

    def test_broadcast_gradients(self):
        rng = np.random.default_rng(12)
        a = T.Parameter(rng.normal(size=(3, 1)), name="a")
        b = T.Parameter(rng.normal(size=(1, 4)), name="b")
        fn = lambda: T.sum_(T.exp(a * b) / (1.0 + T.square(a + b)))
        report = T.grad_check(fn, [a, b], rel_tol=1e-6)
        assert report.ok, str(report)

    def test_gauss_cdf_matches_scipy(self):
        from scipy.stats import norm
        x = np.linspace(-4, 4, 41)
        got = T.gauss_cdf(T.constant(x)).data
        np.testing.assert_allclose(got, norm.cdf(x), atol=1e-12)

    def test_split_concat_roundtrip_gradients(self):
        rng = np.random.default_rng(13)
        w = T.Parameter(rng.normal(size=(2, 6, 3, 3)), name="w")

        def fn():
            a, b, c = T.split(w, [2, 1, 3], axis=1)
            back = T.concat([c, a, b], axis=1)
            return T.sum_(T.square(back) * 0.5)

        report = T.grad_check(fn, [w], rel_tol=1e-6)
        assert report.ok, str(report)
