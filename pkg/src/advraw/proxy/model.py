"""Encoder-decoder proxy of a black-box ISP.

Layout (channels 16/32/64)::

    in      5x5 conv 1->16
    enc1    residual(16)         -> skip1
    down1   residual-B(16->32, stride 2)
    enc2    residual(32)         -> skip2
    down2   residual-B(32->64, stride 2)
    mid1    residual(64)
    mid2    residual(64)
    up2     2x2/2 deconv 64->32, concat skip2, fuse2 3x3 conv 64->32
    up1     2x2/2 deconv 32->16, concat skip1, fuse1 3x3 conv 32->16
    out     3x3 conv 16->3 (linear)

Leaky ReLU (0.2) follows every convolution except ``out``; residual-A blocks keep
the shape, residual-B blocks downsample through a strided 1x1 shortcut.  Inputs whose sides
are not multiples of four are zero-padded at the bottom/right and the output
is cropped back.
"""

from __future__ import annotations

import copy

import numpy as np

from .layers import (Conv2d, ConvTranspose2d, ResidualBlock, concat, concat_backward, leaky_relu,
                     leaky_relu_backward)

MIN_SIZE = 16


class ProxyModel:
    def __init__(self, seed: int = 0, width: int = 16, dtype=np.float32):
        rng = np.random.default_rng(seed)
        w1, w2, w3 = width, 2 * width, 4 * width
        self.width = width
        self.seed = seed
        self.inp = Conv2d(1, w1, 5, rng=rng, dtype=dtype)
        self.enc1 = ResidualBlock(w1, w1, rng=rng, dtype=dtype)
        self.down1 = ResidualBlock(w1, w2, "B", rng=rng, dtype=dtype, stride=2)
        self.enc2 = ResidualBlock(w2, w2, rng=rng, dtype=dtype)
        self.down2 = ResidualBlock(w2, w3, "B", rng=rng, dtype=dtype, stride=2)
        self.mid1 = ResidualBlock(w3, w3, rng=rng, dtype=dtype)
        self.mid2 = ResidualBlock(w3, w3, rng=rng, dtype=dtype)
        self.up2 = ConvTranspose2d(w3, w2, rng=rng, dtype=dtype)
        self.fuse2 = Conv2d(2 * w2, w2, 3, rng=rng, dtype=dtype)
        self.up1 = ConvTranspose2d(w2, w1, rng=rng, dtype=dtype)
        self.fuse1 = Conv2d(2 * w1, w1, 3, rng=rng, dtype=dtype)
        self.out = Conv2d(w1, 3, 3, rng=rng, gain=0.5, dtype=dtype)
        self.out.params["bias"][:] = 0.5

    # ------------------------------------------------------------------ params
    def _modules(self) -> dict:
        return {"inp": self.inp, "enc1": self.enc1, "down1": self.down1, "enc2": self.enc2,
                "down2": self.down2, "mid1": self.mid1, "mid2": self.mid2, "up2": self.up2,
                "fuse2": self.fuse2, "up1": self.up1, "fuse1": self.fuse1, "out": self.out}

    def named_layers(self) -> list[tuple[str, object]]:
        named = []
        for name, mod in self._modules().items():
            if isinstance(mod, ResidualBlock):
                named.extend((f"{name}.{sub}", layer) for sub, layer in mod.layers().items())
            else:
                named.append((name, mod))
        return named

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter array in a fixed manifest order."""
        return [(f"{lname}.{pname}", layer.params[pname])
                for lname, layer in self.named_layers() for pname in ("weight", "bias")]

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_params()]

    @staticmethod
    def flatten_grads(grads: dict) -> dict:
        flat = {}

        def walk(prefix, node):
            for key, value in node.items():
                name = f"{prefix}.{key}" if prefix else key
                if isinstance(value, dict):
                    walk(name, value)
                else:
                    flat[name] = value
        walk("", grads)
        return flat

    def astype(self, dtype) -> "ProxyModel":
        """Copy with every parameter cast to ``dtype`` (float64 for gradient checks)."""
        clone = copy.deepcopy(self)
        for _, layer in clone.named_layers():
            for key in layer.params:
                layer.params[key] = layer.params[key].astype(dtype)
        return clone

    @property
    def dtype(self):
        return self.inp.params["weight"].dtype

    # ----------------------------------------------------------------- forward
    def forward(self, x: np.ndarray):
        """``x``: ``(B, H, W)`` RAW batch; returns unclamped ``(B, H, W, 3)`` and a cache."""
        if x.ndim != 3:
            raise ValueError(f"expected a (B, H, W) batch, got {x.shape}")
        h, w = x.shape[1:]
        if h < MIN_SIZE or w < MIN_SIZE or h % 2 or w % 2:
            raise ValueError(f"proxy input must have even sides >= {MIN_SIZE}, got {h}x{w}")
        ph, pw = (-h) % 4, (-w) % 4
        x = x.astype(self.dtype, copy=False)[..., None]
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
        c = {}
        a, c["inp"] = self.inp.forward(x)
        a, c["inp_act"] = leaky_relu(a)
        s1, c["enc1"] = self.enc1.forward(a)
        a, c["down1"] = self.down1.forward(s1)
        s2, c["enc2"] = self.enc2.forward(a)
        a, c["down2"] = self.down2.forward(s2)
        a, c["mid1"] = self.mid1.forward(a)
        a, c["mid2"] = self.mid2.forward(a)
        a, c["up2"] = self.up2.forward(a)
        a, c["up2_act"] = leaky_relu(a)
        a, c["cat2"] = concat(a, s2)
        a, c["fuse2"] = self.fuse2.forward(a)
        a, c["fuse2_act"] = leaky_relu(a)
        a, c["up1"] = self.up1.forward(a)
        a, c["up1_act"] = leaky_relu(a)
        a, c["cat1"] = concat(a, s1)
        a, c["fuse1"] = self.fuse1.forward(a)
        a, c["fuse1_act"] = leaky_relu(a)
        y, c["out"] = self.out.forward(a)
        c["crop"] = (h, w)
        return y[:, :h, :w, :], c

    def backward(self, cache: dict, gy: np.ndarray, need_input_grad: bool = True):
        """Returns ``(grad_input, flat_param_grads)`` for a cotangent on the output."""
        h, w = cache["crop"]
        full = cache["out"][0]  # padded input shape of the output conv
        gpad = np.zeros((gy.shape[0], full[1] - 2, full[2] - 2, 3), dtype=self.dtype)
        gpad[:, :h, :w, :] = gy
        g = {}
        d, g["out"] = self.out.backward(cache["out"], gpad)
        d, g["fuse1"] = self.fuse1.backward(cache["fuse1"], leaky_relu_backward(cache["fuse1_act"], d))
        d_up1, d_s1 = concat_backward(cache["cat1"], d)
        d, g["up1"] = self.up1.backward(cache["up1"], leaky_relu_backward(cache["up1_act"], d_up1))
        d, g["fuse2"] = self.fuse2.backward(cache["fuse2"], leaky_relu_backward(cache["fuse2_act"], d))
        d_up2, d_s2 = concat_backward(cache["cat2"], d)
        d, g["up2"] = self.up2.backward(cache["up2"], leaky_relu_backward(cache["up2_act"], d_up2))
        d, g["mid2"] = self.mid2.backward(cache["mid2"], d)
        d, g["mid1"] = self.mid1.backward(cache["mid1"], d)
        d, g["down2"] = self.down2.backward(cache["down2"], d)
        d, g["enc2"] = self.enc2.backward(cache["enc2"], d + d_s2)
        d, g["down1"] = self.down1.backward(cache["down1"], d)
        d, g["enc1"] = self.enc1.backward(cache["enc1"], d + d_s1)
        d, g["inp"] = self.inp.backward(cache["inp"], leaky_relu_backward(cache["inp_act"], d),
                                        need_input_grad=need_input_grad)
        gx = d[:, :h, :w, 0] if need_input_grad else None
        return gx, self.flatten_grads(g)

    # ----------------------------------------------------------- receptive field
    def receptive_box(self, i: int, j: int, h: int, w: int) -> tuple[int, int, int, int]:
        """Input rows/cols ``[r0, r1] x [c0, c1]`` that can influence output pixel ``(i, j)``."""

        def conv(iv, layer):
            lo, hi = iv
            return (lo * layer.stride - layer.padding,
                    hi * layer.stride - layer.padding + layer.kernel - 1)

        def res(iv, block):
            body = conv(conv(iv, block.conv2), block.conv1)
            return union(body, conv(iv, block.shortcut) if block.shortcut else iv)

        def union(a, b):
            return (min(a[0], b[0]), max(a[1], b[1]))

        def through(iv):
            # from the full-resolution fuse1 output back to the input
            iv = conv(iv, self.fuse1)
            # branch 1: skip1 directly; branch 2: up1 path
            low = (iv[0] // 2, iv[1] // 2)
            low = conv(low, self.fuse2)
            lower = (low[0] // 2, low[1] // 2)
            lower = res(res(lower, self.mid2), self.mid1)
            low = union(low, res(lower, self.down2))
            low = res(low, self.enc2)
            skip1 = union(iv, res(low, self.down1))
            return conv(res(skip1, self.enc1), self.inp)

        rows = through(conv((i, i), self.out))
        cols = through(conv((j, j), self.out))
        return (max(rows[0], 0), min(rows[1], h - 1), max(cols[0], 0), min(cols[1], w - 1))
