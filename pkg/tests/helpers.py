"""Independent reference routines used as test oracles."""

from __future__ import annotations

import math

import numpy as np

from advraw.proxy.layers import Conv2d, ResidualBlock, concat, concat_backward


def _cubic_weight(t: float, a: float = -0.75) -> float:
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def _taps(alg: str, j: int, src: int, dst: int) -> list[tuple[int, float]]:
    """Source taps of output index ``j`` on one axis, computed from scratch."""
    if alg == "nearest":
        return [(min(j * src // dst, src - 1), 1.0)]
    pos = (j + 0.5) * src / dst - 0.5
    if alg == "bilinear":
        if pos <= 0:
            return [(0, 1.0)]
        if pos >= src - 1:
            return [(src - 1, 1.0)]
        lo = math.floor(pos)
        return [(lo, 1.0 - (pos - lo)), (lo + 1, pos - lo)]
    lo = math.floor(pos)
    return [(min(max(k, 0), src - 1), _cubic_weight(pos - k)) for k in range(lo - 1, lo + 3)]


def reference_scale(alg: str, img: np.ndarray, dst: tuple[int, int]) -> np.ndarray:
    """Per-pixel separable interpolation, one output sample at a time."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    sh, sw, ch = img.shape
    out = np.zeros((dst[0], dst[1], ch))
    for i in range(dst[0]):
        rows = _taps(alg, i, sh, dst[0])
        for j in range(dst[1]):
            cols = _taps(alg, j, sw, dst[1])
            acc = np.zeros(ch)
            for r, wr in rows:
                for c, wc in cols:
                    acc += wr * wc * img[r, c]
            out[i, j] = acc
    return out[:, :, 0] if squeeze else out


def directional_fd(forward, vjp, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-5):
    """(analytic, central-difference) values of ``<cot, J @ dir>`` for random cot/dir."""
    y = forward(x)
    cot = rng.standard_normal(np.shape(y))
    d = rng.standard_normal(np.shape(x))
    analytic = float(np.sum(vjp(x, cot) * d))
    numeric = float(np.sum(cot * (forward(x + eps * d) - forward(x - eps * d))) / (2 * eps))
    return analytic, numeric


def rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_probes(forward, vjp, x, probes: int = 20, seed: int = 0, eps: float = 1e-5) -> list[float]:
    rng = np.random.default_rng(seed)
    return [rel_err(*directional_fd(forward, vjp, x, rng, eps)) for _ in range(probes)]


# ---------------------------------------------------------------- proxy layers

def layer_params(layer):
    if isinstance(layer, ResidualBlock):
        return {f"{n}.{k}": v for n, sub in layer.layers().items() for k, v in sub.params.items()}
    return dict(layer.params)


def flat_grads(layer, grads):
    if isinstance(layer, ResidualBlock):
        return {f"{n}.{k}": v for n, sub in grads.items() for k, v in sub.items()}
    return grads


def check_layer(layer, x, probes=20, eps=1e-6, seed=0):
    """Worst relative error over probes for input and parameter directional derivatives."""
    rng = np.random.default_rng(seed)
    params = layer_params(layer)
    worst = 0.0
    for _ in range(probes):
        y, cache = layer.forward(x)
        cot = rng.standard_normal(y.shape)
        gx, grads = layer.backward(cache, cot)
        grads = flat_grads(layer, grads)
        dx = rng.standard_normal(x.shape)
        dp = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        analytic = np.sum(gx * dx) + sum(np.sum(grads[k] * dp[k]) for k in params)

        def shifted(s):
            for k, v in params.items():
                v += s * eps * dp[k]
            out = layer.forward(x + s * eps * dx)[0]
            for k, v in params.items():
                v -= s * eps * dp[k]
            return out

        numeric = np.sum(cot * (shifted(1) - shifted(-1))) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-12))
    return worst


class ConcatProbe:
    """conv(x) concatenated with x, then a fusing conv: exercises the skip split."""

    def __init__(self, rng, ch=3):
        self.a = Conv2d(ch, 2, 3, rng=rng, dtype=np.float64)
        self.fuse = Conv2d(2 + ch, 2, 3, rng=rng, dtype=np.float64)
        self.params = {**{f"a.{k}": v for k, v in self.a.params.items()},
                       **{f"fuse.{k}": v for k, v in self.fuse.params.items()}}

    def forward(self, x):
        h, ca = self.a.forward(x)
        cat, split = concat(h, x)
        y, cf = self.fuse.forward(cat)
        return y, (ca, split, cf)

    def backward(self, cache, gy):
        ca, split, cf = cache
        g, gf = self.fuse.backward(cf, gy)
        gh, gx = concat_backward(split, g)
        gx2, ga = self.a.backward(ca, gh)
        return gx + gx2, {**{f"a.{k}": v for k, v in ga.items()},
                          **{f"fuse.{k}": v for k, v in gf.items()}}


# ---------------------------------------------------------------- acceptance log

ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(number: int, ok: bool, detail: str) -> bool:
    """Log one criterion outcome; printed again in the terminal summary."""
    ACCEPTANCE.append((number, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    return ok
