"""Procedural photo-like images and the desk-scale attack fixtures built on them.

Stands in for camera captures: an RGB scene is generated, then mosaicked into a
RAW plane.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image_core import BayerPattern, RawImage, RgbImage, mosaic


def _smooth_field(rng: np.random.Generator, size: tuple[int, int], sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
    field -= field.mean()
    spread = np.abs(field).max()
    return field / spread if spread > 0 else field


def photo_like(rng: np.random.Generator, size: tuple[int, int] = (128, 128),
               low: float = 0.1, high: float = 0.9, shapes: int = 4,
               texture: float = 0.03) -> RgbImage:
    """Smooth colour washes, a few soft-edged shapes and faint texture."""
    h, w = size
    scale = min(h, w)
    base = rng.uniform(0.3, 0.7, size=3)
    img = np.empty((h, w, 3))
    for c in range(3):
        img[..., c] = base[c] + 0.25 * _smooth_field(rng, (h, w), scale / 6)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(shapes):
        colour = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(0.08, 0.3) * scale
        if rng.random() < 0.5:
            dist = np.hypot(yy - cy, xx - cx) - radius
        else:
            dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) - radius
        alpha = 1.0 / (1.0 + np.exp(np.clip(dist / 1.5, -50, 50)))
        img = img * (1 - alpha[..., None]) + colour * alpha[..., None]
    img += texture * rng.standard_normal((h, w, 3))
    img = ndimage.uniform_filter(img, size=(2, 2, 1), mode="reflect")
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return RgbImage(low + (high - low) * img)


def busy_texture(rng: np.random.Generator, size: tuple[int, int] = (64, 64)) -> RgbImage:
    """Pixel-scale structure (noise, stripes, impulses) for proxy training."""
    h, w = size
    kind = rng.integers(3)
    if kind == 0:
        img = rng.random((h, w, 3))
        img = ndimage.gaussian_filter(img, (rng.uniform(0.3, 1.2),) * 2 + (0,))
    elif kind == 1:
        yy, xx = np.mgrid[0:h, 0:w]
        freq = rng.uniform(0.2, 1.5, size=3)
        angle = rng.uniform(0, np.pi, size=3)
        img = np.stack([0.5 + 0.5 * np.sin(freq[c] * (np.cos(angle[c]) * xx + np.sin(angle[c]) * yy))
                        for c in range(3)], axis=-1)
    else:
        img = photo_like(rng, size).data.copy()
        sparse = rng.random((h, w)) < rng.uniform(0.05, 0.3)
        img[sparse] = rng.random((int(sparse.sum()), 3))
    lo, hi = img.min(), img.max()
    return RgbImage((img - lo) / (hi - lo) if hi > lo else np.zeros_like(img))


def training_raws(n: int, size: int = 64, seed: int = 0, busy_fraction: float = 0.3,
                  pattern: BayerPattern = BayerPattern.RGGB) -> list[RawImage]:
    rng = np.random.default_rng(seed)
    raws = []
    for _ in range(n):
        if rng.random() < busy_fraction:
            rgb = busy_texture(rng, (size, size))
        else:
            rgb = photo_like(rng, (size, size), low=rng.uniform(0.0, 0.2),
                             high=rng.uniform(0.7, 1.0))
        raws.append(mosaic(rgb, pattern))
    return raws


@dataclass(frozen=True)
class Fixture:
    """One attack instance: clean RAW, target image and its class label."""

    source_raw: RawImage
    target: RgbImage
    target_label: str
    source_label: str


def attack_fixtures(n: int = 10, raw_size: int = 128, target_size: int = 32, seed: int = 0,
                    low: float = 0.2, high: float = 0.8) -> list[Fixture]:
    """Sources and targets drawn from the same photo-like distribution."""
    rng = np.random.default_rng(seed)
    fixtures = []
    for i in range(n):
        src = photo_like(rng, (raw_size, raw_size), low, high)
        tgt = photo_like(rng, (target_size, target_size), low, high, shapes=3, texture=0.02)
        fixtures.append(Fixture(mosaic(src), tgt, f"target{i}", f"source{i}"))
    return fixtures
