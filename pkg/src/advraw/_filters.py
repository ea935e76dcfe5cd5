"""Reflect-padded windowed filters and their adjoints (2-D planes, last axes)."""

from __future__ import annotations

import numpy as np


def reflect_index(n: int, r: int) -> np.ndarray:
    """Source index of every position in a plane of length ``n`` padded by ``r``."""
    if r >= n:
        raise ValueError(f"padding {r} needs at least {r + 1} samples, got {n}")
    return np.pad(np.arange(n), r, mode="reflect")


def reflect_pad(x: np.ndarray, r: int) -> np.ndarray:
    """Pad the first two axes by ``r`` with mirror (edge-excluded) reflection."""
    widths = [(r, r), (r, r)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, widths, mode="reflect")


def reflect_pad_adjoint(g: np.ndarray, r: int) -> np.ndarray:
    """Fold a padded-shape gradient back onto the unpadded plane."""
    h, w = g.shape[0] - 2 * r, g.shape[1] - 2 * r
    ri, ci = reflect_index(h, r), reflect_index(w, r)
    rows = np.zeros((h,) + g.shape[1:], dtype=g.dtype)
    np.add.at(rows, ri, g)
    out = np.zeros((h, w) + g.shape[2:], dtype=g.dtype)
    np.add.at(out, (slice(None), ci), rows)
    return out


def correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """``out[i, j] = sum_uv kernel[u, v] * pad(x)[i + u, j + v]`` (same size)."""
    k = kernel.shape[0]
    r = k // 2
    p = reflect_pad(x, r)
    h, w = x.shape[:2]
    out = np.zeros_like(x, dtype=np.float64)
    for u in range(k):
        for v in range(k):
            if kernel[u, v] != 0.0:
                out += kernel[u, v] * p[u:u + h, v:v + w]
    return out


def correlate_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    r = k // 2
    h, w = g.shape[:2]
    gp = np.zeros((h + 2 * r, w + 2 * r) + g.shape[2:], dtype=np.float64)
    for u in range(k):
        for v in range(k):
            if kernel[u, v] != 0.0:
                gp[u:u + h, v:v + w] += kernel[u, v] * g
    return reflect_pad_adjoint(gp, r)


def windows(x: np.ndarray, r: int) -> np.ndarray:
    """Stack of every reflect-padded window: shape ``(h, w, (2r+1)**2)``."""
    p = reflect_pad(x, r)
    view = np.lib.stride_tricks.sliding_window_view(p, (2 * r + 1, 2 * r + 1))
    return view.reshape(x.shape[0], x.shape[1], -1)
