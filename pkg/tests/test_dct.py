"""Context codec: basis, transforms, quantization, and the file format."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxvae import dct
from ctxvae.data import synthetic_digits


def dct2_direct_sum(x, D):
    """O(D^4) cosine-sum oracle for a single channel."""
    out = np.zeros((D, D))
    for k in range(D):
        for l in range(D):
            ck = np.sqrt(1.0 / D) if k == 0 else np.sqrt(2.0 / D)
            cl = np.sqrt(1.0 / D) if l == 0 else np.sqrt(2.0 / D)
            acc = 0.0
            for n in range(D):
                for m in range(D):
                    acc += (x[n, m]
                            * np.cos(np.pi / D * (n + 0.5) * k)
                            * np.cos(np.pi / D * (m + 0.5) * l))
            out[k, l] = ck * cl * acc
    return out


class TestBasis:
    def test_d1(self):
        np.testing.assert_array_equal(dct.dct_matrix(1).C, [[1.0]])

    def test_d2_values(self):
        C = dct.dct_matrix(2).C
        r = np.sqrt(0.5)
        np.testing.assert_allclose(C, [[r, r], [r, -r]], atol=1e-12)

    @pytest.mark.parametrize("D", list(range(2, 65)))
    def test_orthonormal(self, D):
        C = dct.dct_matrix(D).C
        err = np.abs(C @ C.T - np.eye(D)).max()
        assert err < 1e-12

    def test_rejects_bad_side(self):
        with pytest.raises(ValueError):
            dct.dct_matrix(0)


class TestTransforms:
    def test_constant_channel_dc_only(self):
        basis = dct.dct_matrix(4)
        z = dct.dct2(np.ones((1, 4, 4)), basis)
        assert z[0, 0, 0] == pytest.approx(4.0, abs=1e-12)
        z[0, 0, 0] = 0.0
        assert np.abs(z).max() < 1e-12

    def test_impulse_spreads_evenly(self):
        basis = dct.dct_matrix(2)
        x = np.zeros((1, 2, 2))
        x[0, 0, 0] = 1.0
        z = dct.dct2(x, basis)
        np.testing.assert_allclose(z[0], np.full((2, 2), 0.5), atol=1e-12)

    def test_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 8))
        got = dct.dct2(x[None], dct.dct_matrix(8))[0]
        np.testing.assert_allclose(got, dct2_direct_sum(x, 8), atol=1e-10)

    def test_zero_roundtrip_and_random_roundtrips(self):
        basis = dct.dct_matrix(8)
        np.testing.assert_array_equal(dct.idct2(np.zeros((1, 8, 8)), basis),
                                      np.zeros((1, 8, 8)))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(100, 1, 8, 8))
        back = dct.idct2(dct.dct2(x, basis), basis)
        assert np.abs(back - x).max() < 1e-9

    def test_parseval(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 16, 16))
        z = dct.dct2(x, dct.dct_matrix(16))
        assert np.linalg.norm(x) == pytest.approx(np.linalg.norm(z), abs=1e-9)

    def test_lowpass_projection_idempotent(self):
        basis = dct.dct_matrix(12)
        rng = np.random.default_rng(3)
        z = np.zeros((1, 12, 12))
        z[0, :4, :4] = rng.normal(size=(4, 4))
        x = dct.idct2(z, basis)
        z2 = dct.dct2(x, basis)
        np.testing.assert_allclose(z2[0, :4, :4], z[0, :4, :4], atol=1e-10)
        mask = np.ones((12, 12), dtype=bool)
        mask[:4, :4] = False
        assert np.abs(z2[0][mask]).max() < 1e-10

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dct.dct2(np.zeros((1, 4, 4)), dct.dct_matrix(8))


@pytest.fixture(scope="module")
def digits():
    return synthetic_digits(128, seed=7).astype(np.float64) / 255.0


@pytest.fixture(scope="module")
def fitted(digits):
    codec = dct.ContextCodec(D=28, d=6, Ch=1)
    return dct.fit_normalization(digits[:100], codec)


class TestNormalization:
    def test_single_image(self, digits):
        codec = dct.ContextCodec(D=28, d=6, Ch=1)
        fitted = dct.fit_normalization(digits[:1], codec)
        want = np.maximum(np.abs(dct.dct2(digits[0], codec.basis)[:, :6, :6]),
                          dct.EPS_S)
        np.testing.assert_array_equal(fitted.S, want)

    def test_two_images_elementwise_max(self, digits):
        codec = dct.ContextCodec(D=28, d=6, Ch=1)
        a = dct.fit_normalization(digits[:1], codec).S
        b = dct.fit_normalization(digits[1:2], codec).S
        both = dct.fit_normalization(digits[:2], codec).S
        np.testing.assert_array_equal(both, np.maximum(a, b))

    def test_streaming_equals_batch(self, digits):
        codec = dct.ContextCodec(D=28, d=6, Ch=1)
        batch = dct.fit_normalization(digits, codec).S
        streamed = dct.fit_normalization(iter(digits), codec).S
        np.testing.assert_array_equal(streamed, batch)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dct.fit_normalization([], dct.ContextCodec(D=28, d=6, Ch=1))


class TestDctCodec:
    def test_zero_image_zero_code(self, fitted):
        code = dct.encode_context(np.zeros((1, 28, 28)), fitted)
        assert np.all(code.values == 0)

    def test_unfitted_rejected(self):
        codec = dct.ContextCodec(D=28, d=6, Ch=1)
        with pytest.raises(RuntimeError):
            dct.encode_context(np.zeros((1, 28, 28)), codec)

    def test_full_band_roundtrip_error_bound(self, digits):
        # with d = D the only loss is quantization: error per coefficient is
        # at most 1/2 integer step, so pixel error is bounded by 0.5 * D
        codec = dct.fit_normalization(digits[:32], dct.ContextCodec(D=28, d=28, Ch=1))
        for x in digits[:8]:
            code = dct.encode_context(x, codec)
            back = dct.decode_context(code)
            assert np.abs(back - x).max() <= 0.5 * 28

    def test_clamp_on_out_of_range_coefficients(self, fitted):
        # a bright held-out image exceeding the training max must clamp to +-S
        hot = np.full((1, 28, 28), 4.0)
        code = dct.encode_context(hot, fitted)
        normalized = code.normalized()
        assert np.abs(normalized).max() <= 1.0

    def test_decode_is_lowpass(self, fitted, digits):
        code = dct.encode_context(digits[0], fitted)
        out = dct.decode_context(code)
        z = dct.dct2(out, fitted.basis)
        mask = np.ones((28, 28), dtype=bool)
        mask[:6, :6] = False
        assert np.abs(z[0][mask]).max() < 1e-9

    def test_encode_decode_encode_idempotent(self, fitted, digits):
        for x in digits[:16]:
            first = dct.encode_context(x, fitted)
            back = dct.decode_context(first)
            second = dct.encode_context(back, fitted)
            np.testing.assert_array_equal(second.values, first.values)

    def test_normalized_codes_in_unit_interval(self, fitted, digits):
        for x in digits[:16]:
            y = dct.encode_context(x, fitted).normalized()
            assert np.abs(y).max() <= 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 50.0))
    def test_any_input_stays_normalized(self, seed, scale):
        codec = dct.ContextCodec(D=8, d=3, Ch=1)
        rng = np.random.default_rng(seed)
        codec = dct.fit_normalization(rng.normal(size=(4, 1, 8, 8)), codec)
        probe = rng.normal(size=(1, 8, 8)) * scale
        y = dct.encode_context(probe, codec).normalized()
        assert np.abs(y).max() <= 1.0
        assert np.allclose(y * codec.S, np.rint(y * codec.S), atol=1e-9)


class TestDownsampleCodec:
    def test_constant_image_exact(self):
        codec = dct.ContextCodec(D=28, d=28, Ch=1, mode="downsample", v=2)
        x = np.full((1, 28, 28), 85 / 255.0)
        code = dct.encode_context_downsample(x, codec)
        back = dct.decode_context_downsample(code)
        np.testing.assert_allclose(back, x, atol=1e-12)
        assert np.all(code.values == 85)

    def test_window_one_is_quantized_identity(self):
        codec = dct.ContextCodec(D=8, d=8, Ch=1, mode="downsample", v=1)
        rng = np.random.default_rng(4)
        x = rng.integers(0, 256, size=(1, 8, 8)).astype(np.float64) / 255.0
        back = dct.decode_context_downsample(dct.encode_context_downsample(x, codec))
        np.testing.assert_allclose(back, x, atol=1e-12)

    def test_checkerboard_averages_to_half(self):
        codec = dct.ContextCodec(D=8, d=4, Ch=1, mode="downsample", v=2)
        x = np.indices((8, 8)).sum(axis=0) % 2
        back = dct.decode_context_downsample(
            dct.encode_context_downsample(x[None].astype(np.float64), codec))
        assert np.ptp(back) == 0.0
        assert back.flat[0] == pytest.approx(0.5, abs=0.51 / 255.0)

    def test_non_divisible_window_rejected(self):
        with pytest.raises(ValueError):
            dct.ContextCodec(D=28, d=28, Ch=1, mode="downsample", v=3)


class TestSerialization:
    def test_dct_roundtrip_bit_exact(self, fitted, digits):
        code = dct.encode_context(digits[3], fitted)
        blob = dct.serialize_context(code)
        loaded = dct.deserialize_context(blob)
        np.testing.assert_array_equal(loaded.values, code.values)
        np.testing.assert_array_equal(loaded.codec.S, fitted.S)
        assert dct.serialize_context(loaded) == blob

    def test_reencode_after_file_roundtrip(self, fitted, digits):
        for x in digits[:8]:
            code = dct.encode_context(x, fitted)
            loaded = dct.deserialize_context(dct.serialize_context(code))
            again = dct.encode_context(dct.decode_context(loaded), loaded.codec)
            np.testing.assert_array_equal(again.values, code.values)

    def test_downsample_roundtrip(self):
        codec = dct.ContextCodec(D=8, d=4, Ch=2, mode="downsample", v=2)
        rng = np.random.default_rng(5)
        x = rng.random((2, 8, 8))
        code = dct.encode_context_downsample(x, codec)
        loaded = dct.deserialize_context(dct.serialize_context(code))
        np.testing.assert_array_equal(loaded.values, code.values)
        assert loaded.codec.mode == "downsample"
        assert loaded.codec.v == 2

    def test_bad_magic_and_truncation(self, fitted, digits):
        blob = dct.serialize_context(dct.encode_context(digits[0], fitted))
        with pytest.raises(ValueError, match="magic"):
            dct.deserialize_context(b"XXXX" + blob[4:])
        with pytest.raises(ValueError, match="truncated"):
            dct.deserialize_context(blob[:-8])
