"""Loaders: IDX, PPM, dynamic binarization, and the synthetic generators."""

import numpy as np
import pytest

from ctxvae import data


class TestIdx:
    def test_synthetic_zero_image(self, tmp_path):
        path = tmp_path / "zeros.idx"
        data.write_idx(np.zeros((1, 28, 28), dtype=np.uint8), path)
        ds = data.load_idx(path)
        assert ds.images.shape == (1, 1, 28, 28)
        assert np.all(ds.images == 0)

    def test_roundtrip_and_checksum_stability(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
        path = tmp_path / "imgs.idx"
        data.write_idx(imgs, path)
        a = data.load_idx(path)
        b = data.load_idx(path)
        np.testing.assert_array_equal(a.images[:, 0], imgs)
        assert a.checksum == b.checksum

    def test_truncated_names_lengths(self, tmp_path):
        path = tmp_path / "trunc.idx"
        data.write_idx(np.zeros((2, 4, 4), dtype=np.uint8), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ValueError, match="expected 48 bytes total, got 43"):
            data.load_idx(path)

    def test_bad_magic_names_offset(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"\x12\x34\x56\x78" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic 0x12345678 at byte offset 0"):
            data.load_idx(path)

    def test_labels_file(self, tmp_path):
        path = tmp_path / "labels.idx"
        labels = np.arange(7, dtype=np.uint8)
        with open(path, "wb") as fh:
            fh.write(data.IDX_LABELS_MAGIC.to_bytes(4, "big"))
            fh.write(len(labels).to_bytes(4, "big"))
            fh.write(labels.tobytes())
        ds = data.load_idx(path)
        np.testing.assert_array_equal(ds.labels, labels)


class TestPpm:
    def test_roundtrip_random_rgb(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(3, 17, 23)).astype(np.uint8)
        path = tmp_path / "img.ppm"
        data.write_ppm(img, path)
        np.testing.assert_array_equal(data.load_ppm(path), img)

    def test_one_pixel(self, tmp_path):
        img = np.array([10, 20, 30], dtype=np.uint8).reshape(3, 1, 1)
        path = tmp_path / "px.ppm"
        data.write_ppm(img, path)
        np.testing.assert_array_equal(data.load_ppm(path), img)

    @pytest.mark.parametrize("header", [
        b"P6 2 1 255 ",
        b"P6\n# a comment\n2 1\n255\n",
        b"P6\t\t2\r\n1 # trailing\n255\n",
        b"P6\n2\n1\n255 ",
    ])
    def test_header_whitespace_grammar(self, tmp_path, header):
        payload = bytes(range(6))
        path = tmp_path / "var.ppm"
        path.write_bytes(header + payload)
        img = data.load_ppm(path)
        assert img.shape == (3, 1, 2)
        np.testing.assert_array_equal(img.transpose(1, 2, 0).reshape(-1),
                                      np.frombuffer(payload, np.uint8))

    def test_rejects_wrong_maxval(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="maxval"):
            data.load_ppm(path)

    def test_rejects_truncated(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n4 4\n255\n\x00\x00")
        with pytest.raises(ValueError, match="truncated"):
            data.load_ppm(path)


class TestBinarization:
    def test_extremes(self):
        imgs = np.zeros((1, 1, 2, 2), dtype=np.uint8)
        assert np.all(data.binarize_dynamic(imgs, seed=0, epoch=0) == 0)
        imgs[...] = 255
        assert np.all(data.binarize_dynamic(imgs, seed=0, epoch=0) == 1)

    def test_mid_gray_rate(self):
        imgs = np.full((100000,), 128, dtype=np.uint8)
        draw = data.binarize_dynamic(imgs, seed=1, epoch=0)
        p = 128 / 255
        se = np.sqrt(p * (1 - p) / imgs.size)
        assert abs(draw.mean() - p) < 3 * se

    def test_epochs_differ_but_replay(self):
        imgs = np.full((1, 1, 16, 16), 100, dtype=np.uint8)
        e0 = data.binarize_dynamic(imgs, seed=2, epoch=0)
        e1 = data.binarize_dynamic(imgs, seed=2, epoch=1)
        assert not np.array_equal(e0, e1)
        np.testing.assert_array_equal(e0, data.binarize_dynamic(imgs, seed=2, epoch=0))
        np.testing.assert_array_equal(e1, data.binarize_dynamic(imgs, seed=2, epoch=1))
        fixed = data.binarize_dynamic(imgs, seed=2)
        np.testing.assert_array_equal(fixed, data.binarize_dynamic(imgs, seed=2))

    def test_rejects_non_uint8(self):
        with pytest.raises(ValueError, match="uint8"):
            data.binarize_dynamic(np.zeros((2, 2)), seed=0)


class TestSynthetic:
    def test_digits_shape_and_determinism(self):
        a = data.synthetic_digits(8, seed=3)
        b = data.synthetic_digits(8, seed=3)
        assert a.shape == (8, 1, 28, 28) and a.dtype == np.uint8
        np.testing.assert_array_equal(a, b)
        assert a.max() > 200  # bright strokes
        assert np.median(a) < 30  # dark background

    def test_photo_shape_and_range(self):
        img = data.synthetic_photo(64, 96, seed=4)
        assert img.shape == (3, 64, 96) and img.dtype == np.uint8
        assert img.max() > 180 and img.min() < 60
