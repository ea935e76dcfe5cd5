import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advraw import isp_diff
from advraw._filters import correlate, correlate_adjoint
from advraw.image_core import BayerPattern, RawImage
from advraw.isp_diff import (BilateralFilter, BlackLevel, DemosaicBilinear, DifferentiableIsp,
                             Gamma, IspConfigError, RawContext, WhiteBalanceGain)
from helpers import fd_probes

CTX = RawContext(BayerPattern.GRBG, 0.05, 0.95)


def stage_fd(stage, x, ctx=CTX, probes=20):
    return fd_probes(lambda v: stage.forward(v, ctx), lambda v, g: stage.vjp(v, g, ctx), x, probes)


class TestForward:
    def test_constant_fixed_point(self):
        out = isp_diff.isp_forward(isp_diff.bilinear_pipeline(), RawImage(np.full((8, 6), 0.42)))
        assert np.allclose(out.data, 0.42, atol=1e-15)

    def test_red_sites_by_hand(self):
        x = np.zeros((4, 4))
        x[0, 0], x[0, 2], x[2, 0], x[2, 2] = 0.8, 0.4, 0.2, 0.6
        rgb = DemosaicBilinear().forward(x, RawContext(BayerPattern.RGGB))
        r = rgb[..., 0]
        assert r[0, 0] == 0.8 and r[2, 2] == 0.6
        assert r[0, 1] == pytest.approx(0.6) and r[1, 0] == pytest.approx(0.5)
        assert r[1, 1] == pytest.approx(0.5) and r[1, 3] == pytest.approx(0.5)
        assert r[0, 3] == pytest.approx(0.4) and r[3, 3] == pytest.approx(0.6)
        sites = BayerPattern.RGGB.masks(4, 4)[0]
        assert np.all(rgb[..., 1][sites] == 0) and np.all(rgb[..., 2][sites] == 0)

    def test_unit_gamma_is_identity(self):
        x = np.random.default_rng(0).random((4, 4, 3)) + 0.01
        assert np.allclose(Gamma(1.0).forward(x, CTX), x, rtol=0, atol=1e-15)

    def test_black_level_uses_metadata(self):
        raw = RawImage(np.full((2, 2), 0.5), black_level=0.25, white_level=0.75)
        isp = DifferentiableIsp((BlackLevel(), DemosaicBilinear()))
        assert np.allclose(isp_diff.isp_forward(isp, raw).data, 0.5)
        isp = DifferentiableIsp((BlackLevel(0.0, 0.5), DemosaicBilinear()))
        assert np.allclose(isp_diff.isp_forward(isp, raw).data, 1.0)

    def test_white_balance_follows_pattern(self):
        x = np.ones((2, 2))
        out = WhiteBalanceGain(2.0, 1.0, 3.0).forward(x, RawContext(BayerPattern.BGGR))
        assert out.tolist() == [[3.0, 1.0], [1.0, 2.0]]

    def test_output_clamped_and_deterministic(self):
        raw = RawImage(np.random.default_rng(1).random((16, 16)))
        isp = DifferentiableIsp((WhiteBalanceGain(2.0, 2.0, 2.0), DemosaicBilinear(),
                                 BilateralFilter(), Gamma()))
        a, b = isp_diff.isp_forward(isp, raw), isp_diff.isp_forward(isp, raw)
        assert np.array_equal(a.data, b.data)
        assert a.data.max() == 1.0 and a.data.min() >= 0

    def test_odd_plane_rejected(self):
        with pytest.raises(ValueError):
            isp_diff.bilinear_pipeline().forward_array(np.zeros((3, 4)))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (9, 7), elements=st.floats(0, 1)), st.integers(1, 3),
           st.floats(0.3, 3.0), st.floats(0.02, 1.0))
    def test_bilateral_is_convex_combination(self, plane, r, ss, sr):
        out = BilateralFilter(r, ss, sr).forward(plane[..., None], CTX)[..., 0]
        padded = np.pad(plane, r, mode="reflect")
        for i in range(plane.shape[0]):
            for j in range(plane.shape[1]):
                window = padded[i:i + 2 * r + 1, j:j + 2 * r + 1]
                assert window.min() - 1e-12 <= out[i, j] <= window.max() + 1e-12


class TestGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(5)
        self.raw = self.rng.uniform(0.1, 0.9, (12, 10))
        self.rgb = self.rng.uniform(0.1, 0.9, (12, 10, 3))

    @pytest.mark.parametrize("stage", [BlackLevel(), BlackLevel(0.1, 0.8),
                                       WhiteBalanceGain(1.3, 0.9, 1.7)])
    def test_linear_raw_stages(self, stage):
        assert max(stage_fd(stage, self.raw)) <= 1e-4

    def test_demosaic(self):
        assert max(stage_fd(DemosaicBilinear(), self.raw)) <= 1e-4

    @pytest.mark.parametrize("stage", [BilateralFilter(), BilateralFilter(1, 0.8, 0.3),
                                       BilateralFilter(3, 2.5, 0.05), Gamma(), Gamma(2.0)])
    def test_nonlinear_rgb_stages(self, stage):
        assert max(stage_fd(stage, self.rgb)) <= 1e-3

    @pytest.mark.parametrize("isp", [isp_diff.bilinear_pipeline(), isp_diff.bilateral_pipeline()])
    def test_full_pipelines(self, isp):
        errs = fd_probes(lambda v: isp.forward_array(v, CTX), lambda v, g: isp.vjp_array(v, g, CTX),
                         self.raw)
        assert max(errs) <= 1e-3

    def test_long_pipeline(self):
        isp = DifferentiableIsp((BlackLevel(), WhiteBalanceGain(1.2, 1.0, 1.1), DemosaicBilinear(),
                                 BilateralFilter(), Gamma()))
        errs = fd_probes(lambda v: isp.forward_array(v, CTX), lambda v, g: isp.vjp_array(v, g, CTX),
                         self.raw)
        assert max(errs) <= 1e-3

    def test_demosaic_adjoint_inner_product(self):
        stage = DemosaicBilinear()
        for pattern in BayerPattern:
            ctx = RawContext(pattern)
            x, g = self.rng.standard_normal((10, 8)), self.rng.standard_normal((10, 8, 3))
            lhs = np.sum(stage.forward(x, ctx) * g)
            rhs = np.sum(x * stage.vjp(x, g, ctx))
            assert abs(lhs - rhs) <= 1e-9 * abs(lhs)

    def test_correlate_adjoint_explicit(self):
        k = self.rng.standard_normal((3, 3))
        x, g = self.rng.standard_normal((6, 7)), self.rng.standard_normal((6, 7))
        assert np.sum(correlate(x, k) * g) == pytest.approx(np.sum(x * correlate_adjoint(g, k)),
                                                            rel=1e-12)

    def test_zero_cotangent(self):
        raw = RawImage(self.raw)
        out = isp_diff.isp_vjp(isp_diff.bilateral_pipeline(), raw, np.zeros((12, 10, 3)))
        assert not out.any()

    def test_cotangent_shape_checked(self):
        with pytest.raises(ValueError):
            isp_diff.isp_vjp(isp_diff.bilinear_pipeline(), RawImage(self.raw), np.zeros((12, 10)))


class TestConfig:
    def test_round_trip(self):
        isp = DifferentiableIsp((BlackLevel(), WhiteBalanceGain(1.1, 1.0, 1.2), DemosaicBilinear(),
                                 BilateralFilter(1, 1.0, 0.2), Gamma(0.5)))
        again = isp_diff.pipeline_from_config(json.loads(json.dumps(isp.to_config())))
        assert again == isp

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "p.json"
        p.write_text(json.dumps([{"kind": "demosaic_bilinear"}, {"kind": "gamma"}]))
        assert isp_diff.load_pipeline(p).stages == (DemosaicBilinear(), Gamma())

    @pytest.mark.parametrize("doc", [
        {"stages": [{"kind": "gamma"}, {"kind": "demosaic_bilinear"}]},
        {"stages": [{"kind": "demosaic_bilinear"}, {"kind": "white_balance"}]},
        {"stages": [{"kind": "demosaic_bilinear"}, {"kind": "demosaic_bilinear"}]},
        {"stages": [{"kind": "white_balance"}]},
        {"stages": [{"kind": "demosaic_bilinear"}, {"kind": "bilateral", "radius": 4}]},
        {"stages": [{"kind": "sharpen"}]},
        {"stages": [{"kind": "white_balance", "r": -1}, {"kind": "demosaic_bilinear"}]},
        {"stages": [{"kind": "demosaic_bilinear", "extra": 1}]},
        {"stages": []},
    ])
    def test_invalid(self, doc):
        with pytest.raises(IspConfigError):
            isp_diff.pipeline_from_config(doc)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "p.json"
        p.write_text("[")
        with pytest.raises(IspConfigError):
            isp_diff.load_pipeline(p)

    def test_linearity_flags(self):
        assert isp_diff.stage_is_linear(DemosaicBilinear())
        assert isp_diff.stage_is_linear(Gamma(1.0))
        assert not isp_diff.stage_is_linear(Gamma())
        assert not isp_diff.stage_is_linear(BilateralFilter())
