"""Proxy training losses: content MSE, global SSIM and a feature-space term.

All functions take NHWC arrays, either a single ``(H, W, 3)`` image or a
``(B, H, W, 3)`` batch.  SSIM uses whole-image statistics per channel (no
sliding window) and is averaged over channels and batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..image_core import RgbImage
from .layers import Conv2d, leaky_relu, leaky_relu_backward

PERCEPTUAL_CHANNELS = 8


class PerceptualExtractor:
    """Frozen three-layer 3x3 convolution stack (3 -> 8 -> 8 -> 8)."""

    def __init__(self, seed: int = 0, channels: int = PERCEPTUAL_CHANNELS):
        rng = np.random.default_rng(seed)
        self.layers = [Conv2d(3, channels, 3, rng=rng, dtype=np.float64),
                       Conv2d(channels, channels, 3, rng=rng, dtype=np.float64),
                       Conv2d(channels, channels, 3, rng=rng, dtype=np.float64)]
        for layer in self.layers:
            for arr in layer.params.values():
                arr.flags.writeable = False

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            x, m = leaky_relu(x)
            caches.append((c, m))
        return x, caches

    def backward(self, caches, g: np.ndarray) -> np.ndarray:
        for layer, (c, m) in zip(reversed(self.layers), reversed(caches)):
            g, _ = layer.backward(c, leaky_relu_backward(m, g))
        return g


@dataclass(frozen=True)
class ProxyLossConfig:
    lambda_ssim: float = 0.25
    lambda_perceptual: float = 0.0
    dynamic_range: float = 1.0
    perceptual_weights: tuple[float, ...] = field(default=(1.0,) * PERCEPTUAL_CHANNELS)
    perceptual_seed: int = 0

    def __post_init__(self):
        if self.lambda_ssim < 0 or self.lambda_perceptual < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.dynamic_range > 0:
            raise ValueError("dynamic range must be > 0")
        if len(self.perceptual_weights) != PERCEPTUAL_CHANNELS:
            raise ValueError(f"need {PERCEPTUAL_CHANNELS} perceptual channel weights")

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2

    @cached_property
    def extractor(self) -> PerceptualExtractor:
        return PerceptualExtractor(self.perceptual_seed)


@dataclass(frozen=True)
class SsimStats:
    mu_a: np.ndarray
    mu_b: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    cov_ab: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    content: float
    ssim_term: float
    perceptual: float
    total: float


def _batch(x) -> np.ndarray:
    if isinstance(x, RgbImage):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def ssim_stats(a, b) -> SsimStats:
    a, b = _batch(a), _batch(b)
    mu_a, mu_b = a.mean(axis=(1, 2)), b.mean(axis=(1, 2))
    da, db = a - mu_a[:, None, None], b - mu_b[:, None, None]
    return SsimStats(mu_a, mu_b, (da * da).mean(axis=(1, 2)), (db * db).mean(axis=(1, 2)),
                     (da * db).mean(axis=(1, 2)))


def _ssim_map(st: SsimStats, c1: float, c2: float):
    num1 = 2 * st.mu_a * st.mu_b + c1
    num2 = 2 * st.cov_ab + c2
    den1 = st.mu_a ** 2 + st.mu_b ** 2 + c1
    den2 = st.var_a + st.var_b + c2
    return num1 * num2 / (den1 * den2), (num1, num2, den1, den2)


def ssim(a, b, cfg: ProxyLossConfig = ProxyLossConfig()) -> float:
    a, b = _batch(a), _batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    value, _ = _ssim_map(ssim_stats(a, b), cfg.c1, cfg.c2)
    return float(value.mean())


def ssim_grad(a, b, cfg: ProxyLossConfig = ProxyLossConfig()) -> tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to ``a``."""
    a, b = _batch(a), _batch(b)
    st = ssim_stats(a, b)
    value, (num1, num2, den1, den2) = _ssim_map(st, cfg.c1, cfg.c2)
    n = a.shape[1] * a.shape[2]
    ex = lambda v: v[:, None, None, :]  # noqa: E731
    da = a - ex(st.mu_a)
    db = b - ex(st.mu_b)
    grad = ex(value) * (2 * ex(st.mu_b / num1) + 2 * db / ex(num2)
                        - 2 * ex(st.mu_a / den1) - 2 * da / ex(den2)) / n
    return float(value.mean()), grad / value.size


def _perceptual(pred: np.ndarray, target: np.ndarray, cfg: ProxyLossConfig, need_grad: bool):
    ext = cfg.extractor
    w = np.asarray(cfg.perceptual_weights)
    fp, caches = ext.forward(pred)
    ft, _ = ext.forward(target)
    diff = w * (fp - ft)
    value = float(np.mean(diff * diff))
    if not need_grad:
        return value, None
    return value, ext.backward(caches, 2.0 * w * diff / diff.size)


def total_loss(pred, target, cfg: ProxyLossConfig = ProxyLossConfig()) -> LossBreakdown:
    return loss_and_grad(pred, target, cfg, need_grad=False)[0]


def loss_and_grad(pred, target, cfg: ProxyLossConfig, need_grad: bool = True):
    """Breakdown of ``content + l1 * (1 - SSIM) + l2 * perceptual`` and d/d pred."""
    pred, target = _batch(pred), _batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    content = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size if need_grad else None
    ssim_value, g_ssim = ssim_grad(pred, target, cfg)
    ssim_term = 1.0 - ssim_value
    if need_grad and cfg.lambda_ssim:
        grad = grad - cfg.lambda_ssim * g_ssim
    perceptual = 0.0
    if cfg.lambda_perceptual or not need_grad:
        perceptual, g_per = _perceptual(pred, target, cfg, need_grad and cfg.lambda_perceptual > 0)
        if g_per is not None:
            grad = grad + cfg.lambda_perceptual * g_per
    total = content + cfg.lambda_ssim * ssim_term + cfg.lambda_perceptual * perceptual
    return LossBreakdown(content, ssim_term, perceptual, total), grad


def perceptual_loss(pred, target, cfg: ProxyLossConfig = ProxyLossConfig()) -> float:
    return _perceptual(_batch(pred), _batch(target), cfg, need_grad=False)[0]
