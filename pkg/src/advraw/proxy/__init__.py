"""Trainable proxy for a black-box ISP, supplying surrogate gradients."""

from __future__ import annotations

import numpy as np

from ..image_core import RawImage, RgbImage
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossBreakdown, ProxyLossConfig, SsimStats, ssim, ssim_stats, total_loss
from .model import ProxyModel
from .train import TrainResult, TrainSchedule, fit_proxy, psnr, train_proxy


def _plane(raw) -> np.ndarray:
    return raw.data if isinstance(raw, RawImage) else np.asarray(raw)


def proxy_forward_array(model: ProxyModel, x: np.ndarray) -> np.ndarray:
    """Unclamped ``HxWx3`` output for one ``HxW`` RAW plane."""
    y, _ = model.forward(np.asarray(x)[None])
    return y[0].astype(np.float64)


def proxy_vjp_array(model: ProxyModel, x: np.ndarray, grad_rgb: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if np.shape(grad_rgb) != x.shape + (3,):
        raise ValueError(f"cotangent shape {np.shape(grad_rgb)} != {x.shape + (3,)}")
    y, cache = model.forward(x[None])
    gx, _ = model.backward(cache, np.asarray(grad_rgb, dtype=model.dtype)[None])
    return gx[0].astype(np.float64)


def proxy_forward(model: ProxyModel, raw: RawImage) -> RgbImage:
    return RgbImage.from_unclamped(proxy_forward_array(model, _plane(raw)))


def proxy_vjp(model: ProxyModel, raw: RawImage, grad_rgb: np.ndarray) -> np.ndarray:
    return proxy_vjp_array(model, _plane(raw), grad_rgb)


def proxy_oracle(model: ProxyModel):
    from ..attack import GradientOracle
    return GradientOracle(lambda x: proxy_forward_array(model, x),
                          lambda x, g: proxy_vjp_array(model, x, g), name="proxy")


__all__ = [
    "LossBreakdown", "ProxyLossConfig", "ProxyModel", "SsimStats", "TrainResult", "TrainSchedule",
    "fit_proxy", "load_checkpoint", "proxy_forward", "proxy_oracle", "proxy_vjp", "psnr",
    "save_checkpoint", "ssim", "ssim_stats", "total_loss", "train_proxy",
]
