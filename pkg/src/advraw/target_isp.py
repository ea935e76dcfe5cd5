"""Reference black-box ISP, reachable only through :meth:`BlackBoxIsp.query`.

Stage chain: black-level subtraction, white-balance gains, gradient-corrected
5x5 demosaicing (Malvar-He-Cutler), 3x3 colour correction, gamma.  Attack and
proxy code must treat it as an opaque ``raw -> rgb`` oracle.
"""

from __future__ import annotations

import json
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Sequence

import numpy as np

from . import _filters
from .image_core import RawImage, RgbImage

# Malvar-He-Cutler kernels, each summing to one.
_G_AT_RB = np.array([[0, 0, -1, 0, 0],
                     [0, 0, 2, 0, 0],
                     [-1, 2, 4, 2, -1],
                     [0, 0, 2, 0, 0],
                     [0, 0, -1, 0, 0]], dtype=np.float64) / 8.0
_RB_AT_G_ROW = np.array([[0, 0, 0.5, 0, 0],
                         [0, -1, 0, -1, 0],
                         [-1, 4, 5, 4, -1],
                         [0, -1, 0, -1, 0],
                         [0, 0, 0.5, 0, 0]], dtype=np.float64) / 8.0
_RB_AT_G_COL = _RB_AT_G_ROW.T.copy()
_RB_AT_BR = np.array([[0, 0, -1.5, 0, 0],
                      [0, 2, 0, 2, 0],
                      [-1.5, 0, 6, 0, -1.5],
                      [0, 2, 0, 2, 0],
                      [0, 0, -1.5, 0, 0]], dtype=np.float64) / 8.0

DEFAULT_CONFIG = {
    "white_balance": {"r": 1.25, "g": 1.0, "b": 1.15},
    "ccm": [[1.30, -0.20, -0.10],
            [-0.15, 1.30, -0.15],
            [-0.10, -0.20, 1.30]],
    "gamma": 1.0 / 2.2,
}


def _validate(config: dict) -> dict:
    merged = {**DEFAULT_CONFIG, **config}
    unknown = set(merged) - set(DEFAULT_CONFIG)
    if unknown:
        raise ValueError(f"unknown target ISP config keys: {sorted(unknown)}")
    wb = {**DEFAULT_CONFIG["white_balance"], **merged["white_balance"]}
    if set(wb) != {"r", "g", "b"} or min(wb.values()) <= 0:
        raise ValueError("white_balance needs positive r, g, b")
    ccm = np.asarray(merged["ccm"], dtype=np.float64)
    if ccm.shape != (3, 3) or not np.all(np.isfinite(ccm)):
        raise ValueError("ccm must be a finite 3x3 matrix")
    gamma = float(merged["gamma"])
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    return {"white_balance": wb, "ccm": ccm.tolist(), "gamma": gamma}


def _demosaic_mhc(x: np.ndarray, pattern) -> np.ndarray:
    h, w = x.shape
    cmap = pattern.channel_map(h, w)
    # colour of the horizontal neighbour tells which row type a green site sits in
    right = np.roll(cmap, -1, axis=1)
    g_at_rb = _filters.correlate(x, _G_AT_RB)
    row_est = _filters.correlate(x, _RB_AT_G_ROW)
    col_est = _filters.correlate(x, _RB_AT_G_COL)
    diag_est = _filters.correlate(x, _RB_AT_BR)

    out = np.empty((h, w, 3))
    for c, other in ((0, 2), (2, 0)):
        plane = np.where(cmap == c, x, 0.0)
        plane = np.where(cmap == other, diag_est, plane)
        green = cmap == 1
        plane = np.where(green & (right == c), row_est, plane)
        plane = np.where(green & (right != c), col_est, plane)
        out[..., c] = plane
    out[..., 1] = np.where(cmap == 1, x, g_at_rb)
    return out


class BlackBoxIsp:
    """Sealed pipeline; the only public operation is :meth:`query`."""

    __slots__ = ("__params",)

    def __init__(self, config: dict | None = None):
        params = _validate(dict(config or {}))
        object.__setattr__(self, "_BlackBoxIsp__params", MappingProxyType(params))

    def __setattr__(self, name, value):
        raise AttributeError("BlackBoxIsp is immutable")

    def __repr__(self) -> str:
        return "BlackBoxIsp(<sealed>)"

    def query(self, raw: RawImage) -> RgbImage:
        p = self.__params
        if raw.height % 2 or raw.width % 2:
            raise ValueError(f"RAW dimensions must be even, got {raw.shape}")
        x = (raw.data - raw.black_level) / (raw.white_level - raw.black_level)
        x = np.clip(x, 0.0, 1.0)
        wb = p["white_balance"]
        gains = np.array([wb["r"], wb["g"], wb["b"]])[raw.pattern.channel_map(*raw.shape)]
        x = np.clip(x * gains, 0.0, 1.0)
        rgb = _demosaic_mhc(x, raw.pattern)
        rgb = rgb @ np.asarray(p["ccm"]).T
        rgb = np.clip(rgb, 0.0, 1.0)
        return RgbImage(rgb ** p["gamma"])

    def config(self) -> dict:
        """Plain copy of the construction config, for run manifests."""
        return json.loads(json.dumps(dict(self.__params)))


def load_target_isp(path) -> BlackBoxIsp:
    return BlackBoxIsp(json.loads(Path(path).read_text()))


def tile(raw: RawImage, patch: int) -> list[RawImage]:
    """Non-overlapping ``patch x patch`` tiles on an even-offset grid."""
    if patch <= 0 or patch % 2:
        raise ValueError(f"patch size must be positive and even, got {patch}")
    if patch > raw.height or patch > raw.width:
        raise ValueError(f"patch {patch} larger than image {raw.shape}")
    tiles = []
    for i in range(0, raw.height - patch + 1, patch):
        for j in range(0, raw.width - patch + 1, patch):
            tiles.append(raw.replace(raw.data[i:i + patch, j:j + patch]))
    return tiles


def generate_pairs(isp: BlackBoxIsp, raws: Sequence[RawImage] | Iterable[RawImage],
                   patch: int | None = None) -> list[tuple[RawImage, RgbImage]]:
    """Query the target on every RAW (or every tile of it) and pair the results."""
    raws = list(raws)
    if not raws:
        raise ValueError("need at least one RAW image")
    pairs = []
    for raw in raws:
        for piece in ([raw] if patch is None else tile(raw, patch)):
            pairs.append((piece, isp.query(piece)))
    return pairs
