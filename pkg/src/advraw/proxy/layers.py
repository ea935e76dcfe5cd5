"""NHWC layers with explicit backward passes.

Layers hold parameters only.  ``forward`` returns ``(output, cache)`` and
``backward(cache, grad_output)`` returns ``(grad_input, param_grads)``, so a
frozen model can be evaluated from several threads.
"""

from __future__ import annotations

import numpy as np

LEAK = 0.2


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, k, k, c), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, :, u, v, :] = xp[:, u:u + s * ho:s, v:v + s * wo:s, :]
    return cols.reshape(b * ho * wo, k * k * c)


class Conv2d:
    """Zero-padded 2-D convolution (cross-correlation) with bias; weight is ``(k, k, in, out)``."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None,
                 gain: float = 1.0, dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        std = gain * np.sqrt(2.0 / ((1.0 + LEAK ** 2) * fan_in))
        self.params = {
            "weight": (std * rng.standard_normal((kernel, kernel, in_ch, out_ch))).astype(dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }

    def output_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel) // self.stride + 1

    def forward(self, x: np.ndarray):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        b = x.shape[0]
        ho, wo = self.output_size(x.shape[1]), self.output_size(x.shape[2])
        cols = _im2col(xp, k, s, ho, wo)
        w = self.params["weight"].reshape(-1, self.out_ch)
        y = (cols @ w + self.params["bias"]).reshape(b, ho, wo, self.out_ch)
        return y, (xp.shape, cols)

    def backward(self, cache, gy: np.ndarray, need_input_grad: bool = True):
        xp_shape, cols = cache
        p, k, s = self.padding, self.kernel, self.stride
        b, ho, wo, o = gy.shape
        g2 = gy.reshape(-1, o)
        grads = {"weight": (cols.T @ g2).reshape(self.params["weight"].shape),
                 "bias": g2.sum(axis=0)}
        if not need_input_grad:
            return None, grads
        gcols = (g2 @ self.params["weight"].reshape(-1, o).T).reshape(b, ho, wo, k, k, -1)
        gxp = np.zeros(xp_shape, dtype=gy.dtype)
        for u in range(k):
            for v in range(k):
                gxp[:, u:u + s * ho:s, v:v + s * wo:s, :] += gcols[:, :, :, u, v, :]
        gx = gxp[:, p:xp_shape[1] - p, p:xp_shape[2] - p, :] if p else gxp
        return gx, grads


class ConvTranspose2d:
    """Kernel-2, stride-2 transposed convolution; weight is ``(in, 2, 2, out)``.

    Every output pixel sees exactly one input pixel, through one of four
    phase-specific weight slices.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / ((1.0 + LEAK ** 2) * in_ch))
        self.params = {
            "weight": (std * rng.standard_normal((in_ch, 2, 2, out_ch))).astype(dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }

    def forward(self, x: np.ndarray):
        b, h, w, c = x.shape
        y = x.reshape(-1, c) @ self.params["weight"].reshape(c, -1)
        y = y.reshape(b, h, w, 2, 2, self.out_ch).transpose(0, 1, 3, 2, 4, 5)
        return y.reshape(b, 2 * h, 2 * w, self.out_ch) + self.params["bias"], x

    def backward(self, cache, gy: np.ndarray):
        x = cache
        b, h, w, c = x.shape
        g = gy.reshape(b, h, 2, w, 2, self.out_ch).transpose(0, 1, 3, 2, 4, 5)
        g = g.reshape(b * h * w, -1)
        gx = (g @ self.params["weight"].reshape(c, -1).T).reshape(b, h, w, c)
        gw = (x.reshape(-1, c).T @ g).reshape(self.params["weight"].shape)
        return gx, {"weight": gw, "bias": gy.sum(axis=(0, 1, 2))}


def leaky_relu(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, LEAK * x), mask


def leaky_relu_backward(mask: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(mask, gy, LEAK * gy)


def concat(a: np.ndarray, b: np.ndarray):
    """Channel concatenation; the cache is the split point."""
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_backward(split: int, gy: np.ndarray):
    return gy[..., :split], gy[..., split:]


class ResidualBlock:
    """Two 3x3 convolutions plus a shortcut, combined by element-wise sum.

    Variant ``"A"`` uses the identity shortcut (shape preserved).  Variant
    ``"B"`` uses an activated 1x1 convolution shortcut, which lets the block
    change channel count and, with ``stride=2``, downsample.
    """

    def __init__(self, in_ch: int, out_ch: int, variant: str | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32, stride: int = 1):
        variant = variant or ("A" if in_ch == out_ch and stride == 1 else "B")
        if variant == "A" and (in_ch != out_ch or stride != 1):
            raise ValueError("identity shortcut needs in_ch == out_ch and stride 1")
        self.variant = variant
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng=rng, gain=0.5, dtype=dtype)
        self.shortcut = (Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng, dtype=dtype)
                         if variant == "B" else None)

    def layers(self) -> dict:
        named = {"conv1": self.conv1, "conv2": self.conv2}
        if self.shortcut is not None:
            named["shortcut"] = self.shortcut
        return named

    def forward(self, x: np.ndarray):
        h1, c1 = self.conv1.forward(x)
        a1, m1 = leaky_relu(h1)
        h2, c2 = self.conv2.forward(a1)
        f1, m2 = leaky_relu(h2)
        if self.shortcut is None:
            return f1 + x, (c1, m1, c2, m2, None, None)
        hs, cs = self.shortcut.forward(x)
        f2, ms = leaky_relu(hs)
        return f1 + f2, (c1, m1, c2, m2, cs, ms)

    def backward(self, cache, gy: np.ndarray):
        c1, m1, c2, m2, cs, ms = cache
        grads = {}
        g, grads["conv2"] = self.conv2.backward(c2, leaky_relu_backward(m2, gy))
        gx, grads["conv1"] = self.conv1.backward(c1, leaky_relu_backward(m1, g))
        if self.shortcut is None:
            return gx + gy, grads
        gs, grads["shortcut"] = self.shortcut.backward(cs, leaky_relu_backward(ms, gy))
        return gx + gs, grads
