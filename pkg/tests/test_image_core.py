import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advraw.image_core import (BayerPattern, ImageFormatError, RawImage, RgbImage, l2_loss,
                               load_raw, load_rgb, mosaic, psnr, save_raw, save_rgb, sidecar_path)
from advraw.isp_diff import bilinear_pipeline, isp_forward


def write_pgm(path, samples, maxval=65535):
    h, w = samples.shape
    body = samples.astype(">u2" if maxval > 255 else "u1").tobytes()
    path.write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + body)


class TestContainers:
    def test_raw_rejects_odd_dimensions(self):
        with pytest.raises(ImageFormatError):
            RawImage(np.zeros((3, 4)))

    def test_raw_rejects_out_of_range(self):
        with pytest.raises(ImageFormatError):
            RawImage(np.full((2, 2), 1.5))
        with pytest.raises(ImageFormatError):
            RawImage(np.full((2, 2), np.nan))

    def test_levels_must_be_ordered(self):
        with pytest.raises(ImageFormatError):
            RawImage(np.zeros((2, 2)), black_level=0.5, white_level=0.5)

    def test_data_is_immutable_copy(self):
        src = np.zeros((2, 2))
        raw = RawImage(src)
        src[0, 0] = 1.0
        assert raw.data[0, 0] == 0.0
        with pytest.raises(ValueError):
            raw.data[0, 0] = 1.0

    def test_rgb_shape_check(self):
        with pytest.raises(ImageFormatError):
            RgbImage(np.zeros((2, 2)))
        assert RgbImage.from_unclamped(np.full((1, 1, 3), 2.0)).data.max() == 1.0


class TestBayer:
    @pytest.mark.parametrize("pattern", list(BayerPattern))
    def test_site_colour_is_periodic(self, pattern):
        cmap = pattern.channel_map(6, 8)
        for i in range(6):
            for j in range(8):
                assert cmap[i, j] == pattern.channel_at(i % 2, j % 2)

    def test_rggb_layout(self):
        assert BayerPattern.RGGB.channel_map(2, 2).tolist() == [[0, 1], [1, 2]]

    def test_masks_partition_sites(self):
        m = BayerPattern.GBRG.masks(4, 4)
        assert m.sum(axis=0).tolist() == np.ones((4, 4)).tolist()
        assert m[1].sum() == 8


class TestL2:
    def test_examples(self):
        x = np.random.default_rng(0).random((4, 4, 3))
        assert l2_loss(x, x) == 0.0
        assert l2_loss(np.array([[0.5]]), np.array([[0.0]])) == 0.25
        assert l2_loss(np.full((2, 2), 0.1), np.full((2, 2), 0.2)) == pytest.approx(0.01, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l2_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
           arrays(np.float64, (3, 4), elements=st.floats(0, 1)))
    def test_symmetric_nonnegative(self, a, b):
        assert l2_loss(a, b) == l2_loss(b, a) >= 0
        if np.array_equal(a, b):
            assert l2_loss(a, b) == 0
        elif np.max(np.abs(a - b)) > 1e-150:  # smaller differences underflow when squared
            assert l2_loss(a, b) > 0

    def test_psnr(self):
        assert psnr(np.zeros(4), np.zeros(4)) == float("inf")
        assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)


class TestMosaic:
    def test_constant_gray(self):
        raw = mosaic(RgbImage(np.full((4, 6, 3), 0.3)))
        assert np.all(raw.data == 0.3)
        assert (raw.black_level, raw.white_level) == (0.0, 1.0)

    def test_pure_red(self):
        rgb = np.zeros((4, 4, 3))
        rgb[..., 0] = 1.0
        raw = mosaic(RgbImage(rgb), BayerPattern.RGGB)
        assert np.array_equal(raw.data, BayerPattern.RGGB.masks(4, 4)[0].astype(float))

    def test_odd_dimensions_rejected(self):
        with pytest.raises(ImageFormatError):
            mosaic(RgbImage(np.zeros((3, 4, 3))))

    @pytest.mark.parametrize("pattern", list(BayerPattern))
    def test_sampled_sites_exact(self, pattern):
        rgb = np.random.default_rng(1).random((6, 6, 3))
        raw = mosaic(RgbImage(rgb), pattern)
        cmap = pattern.channel_map(6, 6)
        expected = np.take_along_axis(rgb, cmap[..., None], axis=2)[..., 0]
        assert np.array_equal(raw.data, expected)

    def test_smooth_round_trip_through_bilinear_demosaic(self):
        y, x = np.mgrid[0:32, 0:32] / 31.0
        rgb = np.stack([0.2 + 0.6 * x, 0.3 + 0.4 * y, 0.5 + 0.3 * (x - y) / 2], axis=-1)
        back = isp_forward(bilinear_pipeline(), mosaic(RgbImage(rgb)))
        assert l2_loss(back, rgb) < 1e-2


class TestNetpbm:
    def test_zero_and_full_scale(self, tmp_path):
        write_pgm(tmp_path / "z.pgm", np.zeros((4, 4), dtype=np.uint16))
        assert np.all(load_raw(tmp_path / "z.pgm").data == 0.0)
        write_pgm(tmp_path / "f.pgm", np.full((4, 4), 65535, dtype=np.uint16))
        assert np.all(load_raw(tmp_path / "f.pgm").data == 1.0)

    def test_sample_32768(self, tmp_path):
        write_pgm(tmp_path / "h.pgm", np.full((2, 2), 32768, dtype=np.uint16))
        assert load_raw(tmp_path / "h.pgm").data[0, 0] == 32768 / 65535

    def test_defaults_without_sidecar(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), dtype=np.uint16))
        raw = load_raw(tmp_path / "a.pgm")
        assert (raw.pattern, raw.black_level, raw.white_level) == (BayerPattern.RGGB, 0.0, 1.0)

    def test_partial_sidecar(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), dtype=np.uint16))
        sidecar_path(tmp_path / "a.pgm").write_text(json.dumps({"pattern": "BGGR"}))
        raw = load_raw(tmp_path / "a.pgm")
        assert raw.pattern is BayerPattern.BGGR and raw.white_level == 1.0

    def test_bad_sidecar(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), dtype=np.uint16))
        sidecar_path(tmp_path / "a.pgm").write_text("{not json")
        with pytest.raises(ImageFormatError):
            load_raw(tmp_path / "a.pgm")

    def test_header_comments(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# made by hand\n2 2\n# max\n65535\n" + b"\x00\x01" * 4)
        assert load_raw(p).data[0, 0] == 1 / 65535

    @pytest.mark.parametrize("blob", [b"P6\n2 2\n255\n", b"P5\n2\n", b"P5\n2 2\n65535\n\x00"])
    def test_malformed(self, tmp_path, blob):
        p = tmp_path / "bad.pgm"
        p.write_bytes(blob)
        with pytest.raises(ImageFormatError):
            load_raw(p)

    def test_odd_file_dimensions(self, tmp_path):
        write_pgm(tmp_path / "o.pgm", np.zeros((3, 2), dtype=np.uint16))
        with pytest.raises(ImageFormatError):
            load_raw(tmp_path / "o.pgm")

    def test_rgb_quantisation(self, tmp_path):
        save_rgb(RgbImage(np.array([[[1.0, 0.5, 0.0]]])), tmp_path / "q.ppm")
        assert (tmp_path / "q.ppm").read_bytes()[-3:] == bytes([255, 128, 0])

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(0, 1)), st.sampled_from(list(BayerPattern)))
    def test_raw_round_trip_bit_exact(self, tmp_path_factory, data, pattern):
        path = tmp_path_factory.mktemp("rt") / "r.pgm"
        raw = RawImage(data, pattern, 0.0625, 0.9)
        save_raw(raw, path)
        once = load_raw(path)
        assert np.array_equal(once.data, np.floor(data * 65535 + 0.5) / 65535)
        assert (once.pattern, once.black_level, once.white_level) == (pattern, 0.0625, 0.9)
        save_raw(once, path)
        assert np.array_equal(load_raw(path).data, once.data)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 5, 3), elements=st.floats(0, 1)))
    def test_rgb_round_trip_bit_exact(self, tmp_path_factory, data):
        path = tmp_path_factory.mktemp("rt") / "r.ppm"
        save_rgb(RgbImage(data), path)
        once = load_rgb(path)
        assert np.array_equal(np.round(once.data * 255), np.floor(data * 255 + 0.5))
        save_rgb(once, path)
        assert np.array_equal(load_rgb(path).data, once.data)
