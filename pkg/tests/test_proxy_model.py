import numpy as np
import pytest

from advraw.image_core import RawImage
from advraw.proxy import (ProxyModel, load_checkpoint, proxy_forward, proxy_oracle, proxy_vjp,
                          save_checkpoint)
from advraw.proxy.checkpoint import MAGIC, CheckpointError
from helpers import rel_err


@pytest.fixture(scope="module")
def model():
    return ProxyModel(seed=3)


@pytest.fixture(scope="module")
def model64(model):
    return model.astype(np.float64)


def raw(h=16, w=16, seed=0):
    return RawImage(np.random.default_rng(seed).random((h, w)))


class TestForward:
    def test_shape_and_finite(self, model):
        out = proxy_forward(model, raw(20, 16))
        assert out.shape == (20, 16, 3)
        assert np.all(np.isfinite(out.data)) and 0 <= out.data.min() and out.data.max() <= 1

    def test_deterministic(self, model):
        r = raw(16, 24)
        assert np.array_equal(proxy_forward(model, r).data, proxy_forward(model, r).data)

    def test_fully_convolutional(self, model):
        a, b = proxy_forward(model, raw(64, 64)), proxy_forward(model, raw(128, 128))
        assert a.shape == (64, 64, 3) and b.shape == (128, 128, 3)

    @pytest.mark.parametrize("shape", [(14, 16), (16, 15), (8, 8)])
    def test_undersized_or_odd(self, model, shape):
        with pytest.raises(ValueError):
            model.forward(np.zeros((1,) + shape))

    def test_padding_does_not_leak_into_output(self, model64):
        # an 18x18 input is padded to 20x20; crop must equal the inner part of a
        # 20x20 run with the same zero border
        x = np.random.default_rng(1).random((1, 18, 18))
        big = np.pad(x, ((0, 0), (0, 2), (0, 2)))
        small_out, _ = model64.forward(x)
        big_out, _ = model64.forward(big)
        assert np.allclose(small_out, big_out[:, :18, :18], atol=1e-12)


class TestGradients:
    def test_zero_cotangent(self, model):
        assert not proxy_vjp(model, raw(), np.zeros((16, 16, 3))).any()

    @staticmethod
    def _smooth_probes(analytic_and_fd, steps=(1e-7, 5e-8), wanted=20, budget=60, agree=1e-4):
        """Relative errors for probes whose two step sizes agree (no kink crossing)."""
        errs, tried = [], 0
        while len(errs) < wanted and tried < budget:
            tried += 1
            analytic, fd = analytic_and_fd()
            n1, n2 = fd(steps[0]), fd(steps[1])
            if rel_err(n1, n2) > agree:
                continue
            errs.append(rel_err(analytic, n1))
        return errs

    def test_input_gradient_fd(self, model64):
        rng = np.random.default_rng(2)
        x = rng.random((16, 20))
        f = lambda v: model64.forward(v[None])[0][0]  # noqa: E731

        def probe():
            cot, d = rng.standard_normal((16, 20, 3)), rng.standard_normal(x.shape)
            analytic = np.sum(model64.backward(model64.forward(x[None])[1], cot[None])[0][0] * d)
            return analytic, lambda eps: np.sum(cot * (f(x + eps * d) - f(x - eps * d))) / (2 * eps)

        errs = self._smooth_probes(probe)
        assert len(errs) == 20 and max(errs) <= 1e-3

    def test_parameter_gradient_fd(self, model64):
        rng = np.random.default_rng(5)
        x = rng.random((2, 16, 16))
        params = dict(model64.named_params())
        y, cache = model64.forward(x)

        def shifted(direction, step):
            for k, v in params.items():
                v += step * direction[k]
            out = model64.forward(x)[0]
            for k, v in params.items():
                v -= step * direction[k]
            return out

        def probe():
            cot = rng.standard_normal(y.shape)
            _, grads = model64.backward(cache, cot)
            direction = {k: rng.standard_normal(v.shape) for k, v in params.items()}
            analytic = sum(np.sum(grads[k] * direction[k]) for k in params)
            return analytic, lambda eps: np.sum(
                cot * (shifted(direction, eps) - shifted(direction, -eps))) / (2 * eps)

        # every layer moves at once, so kinks sit within ~1e-6 of many probes
        errs = self._smooth_probes(probe, steps=(1e-8, 2e-8))
        assert len(errs) == 20 and max(errs) <= 1e-3

    def test_gradient_names_match_manifest(self, model):
        y, cache = model.forward(np.zeros((1, 16, 16), dtype=np.float32))
        _, grads = model.backward(cache, np.ones_like(y))
        assert list(grads) != [] and set(grads) == {n for n, _ in model.named_params()}

    def test_receptive_field_support(self, model64):
        h = w = 48
        x = np.random.default_rng(3).random((h, w))
        for i, j in [(24, 24), (0, 0), (47, 10)]:
            cot = np.zeros((h, w, 3))
            cot[i, j, 1] = 1.0
            g = proxy_vjp(model64, RawImage(x), cot)
            r0, r1, c0, c1 = model64.receptive_box(i, j, h, w)
            outside = np.ones((h, w), dtype=bool)
            outside[r0:r1 + 1, c0:c1 + 1] = False
            assert not g[outside].any()
            assert g[r0:r1 + 1, c0:c1 + 1].any()

    def test_oracle_wrapper(self, model64):
        o = proxy_oracle(model64)
        x = np.random.default_rng(4).random((16, 16))
        assert o.forward(x).dtype == np.float64 and o.forward(x).shape == (16, 16, 3)
        assert o.vjp(x, np.ones((16, 16, 3))).shape == (16, 16)
        with pytest.raises(ValueError):
            o.vjp(x, np.ones((16, 16)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "m.bin")
        again = load_checkpoint(tmp_path / "m.bin")
        for (n1, p1), (n2, p2) in zip(model.named_params(), again.named_params()):
            assert n1 == n2 and np.array_equal(p1, p2) and p2.dtype == np.float32
        assert (tmp_path / "m.bin.json").exists()
        r = raw()
        assert np.array_equal(proxy_forward(model, r).data, proxy_forward(again, r).data)

    def test_layout(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "m.bin")
        blob = (tmp_path / "m.bin").read_bytes()
        assert blob[:8] == MAGIC
        n_params = sum(p.size for _, p in model.named_params())
        assert len(blob) > 4 * n_params
        last = model.named_params()[-1][1]
        tail = np.frombuffer(blob[-4 * last.size:], dtype="<f4")
        assert np.array_equal(tail, last.ravel())

    def test_bytes_deterministic(self, tmp_path, model):
        save_checkpoint(model, tmp_path / "a.bin")
        save_checkpoint(model, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-4],
                                        lambda b: b + b"\0\0\0\0",
                                        lambda b: b[:8] + b"\x02" + b[9:]])
    def test_corrupt(self, tmp_path, model, mutate):
        save_checkpoint(model, tmp_path / "m.bin")
        p = tmp_path / "m.bin"
        p.write_bytes(mutate(p.read_bytes()))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
