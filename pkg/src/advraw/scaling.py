"""Separable downscaling expressed as a pair of sparse matrices.

A scaler maps an ``m x n`` plane ``A`` to ``L @ A @ R`` with ``L`` of shape
``(m', m)`` and ``R`` of shape ``(n, n')``.  Coordinate conventions follow
OpenCV's ``resize``:

* nearest:  ``src = floor(dst * scale)``
* bilinear: ``src = (dst + 0.5) * scale - 0.5``, edge clamped
* bicubic:  same centres, 4 taps with ``a = -0.75``, replicated borders
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np
import scipy.sparse as sp

from .image_core import RawImage, RgbImage

BICUBIC_A = -0.75


class ScalingAlgorithm(str, enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def axis_weights(alg: ScalingAlgorithm, src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output tap indices and weights along one axis, shapes ``(dst, taps)``."""
    alg = ScalingAlgorithm(alg)
    j = np.arange(dst)
    if alg is ScalingAlgorithm.NEAREST:
        idx = np.minimum((j * src) // dst, src - 1)
        return idx[:, None], np.ones((dst, 1))

    centre = (j + 0.5) * (src / dst) - 0.5
    base = np.floor(centre).astype(np.int64)
    frac = centre - base
    if alg is ScalingAlgorithm.BILINEAR:
        low = base < 0
        high = base >= src - 1
        frac = np.where(low | high, 0.0, frac)
        base = np.clip(base, 0, src - 1)
        idx = np.stack([base, np.minimum(base + 1, src - 1)], axis=1)
        return idx, np.stack([1.0 - frac, frac], axis=1)

    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offsets[None, :], 0, src - 1)
    weights = _cubic(frac[:, None] - offsets[None, :])
    return idx, weights


def _axis_matrix(alg: ScalingAlgorithm, src: int, dst: int) -> sp.csr_matrix:
    idx, w = axis_weights(alg, src, dst)
    rows = np.repeat(np.arange(dst), idx.shape[1])
    mat = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(dst, src))
    mat.sum_duplicates()
    mat.eliminate_zeros()
    return mat


@dataclass(frozen=True)
class ScalingOperator:
    """Row operator ``L`` (dst_h x src_h) and column operator ``R`` (src_w x dst_w)."""

    L: sp.csr_matrix
    R: sp.csr_matrix
    algorithm: ScalingAlgorithm
    src_size: tuple[int, int]
    dst_size: tuple[int, int]

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return self.L.toarray(), self.R.toarray()

    @cached_property
    def _Lt(self) -> sp.csr_matrix:
        return self.L.T.tocsr()

    @cached_property
    def _Rt(self) -> sp.csr_matrix:
        return self.R.T.tocsr()


def build_operator(alg: ScalingAlgorithm | str, src: tuple[int, int],
                   dst: tuple[int, int]) -> ScalingOperator:
    alg = ScalingAlgorithm(alg)
    (sh, sw), (dh, dw) = tuple(src), tuple(dst)
    if min(sh, sw, dh, dw) < 1:
        raise ValueError(f"dimensions must be >= 1, got src={src} dst={dst}")
    if dh > sh or dw > sw:
        raise ValueError(f"only downscaling is supported, got src={src} dst={dst}")
    L = _axis_matrix(alg, sh, dh)
    R = _axis_matrix(alg, sw, dw).T.tocsr()
    return ScalingOperator(L, R, alg, (sh, sw), (dh, dw))


def _separable(left: sp.spmatrix, right_t: sp.spmatrix, x: np.ndarray) -> np.ndarray:
    # left @ x @ right_t.T, applied to every trailing channel at once
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    m, n, c = x.shape
    tmp = np.asarray(left @ x.reshape(m, n * c)).reshape(left.shape[0], n, c)
    tmp = tmp.transpose(1, 0, 2).reshape(n, -1)
    out = np.asarray(right_t @ tmp).reshape(right_t.shape[0], left.shape[0], c)
    out = out.transpose(1, 0, 2)
    return out[:, :, 0] if squeeze else out


def apply(op: ScalingOperator, x: np.ndarray) -> np.ndarray:
    """Unclamped linear map ``L @ x @ R`` per channel."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[:2] != op.src_size:
        raise ValueError(f"input spatial size {x.shape[:2]} != operator source {op.src_size}")
    return _separable(op.L, op._Rt, x)


def scale_adjoint(op: ScalingOperator, grad_out: np.ndarray) -> np.ndarray:
    """``L.T @ g @ R.T`` per channel: the exact adjoint of :func:`apply`."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape[:2] != op.dst_size:
        raise ValueError(f"gradient spatial size {g.shape[:2]} != operator target {op.dst_size}")
    return _separable(op._Lt, op.R, g)


Scalable = Union[RawImage, RgbImage, np.ndarray]


def scale(op: ScalingOperator, img: Scalable):
    """Downscale and clamp to [0, 1]; returns the same kind it was given."""
    if isinstance(img, RgbImage):
        return RgbImage(np.clip(apply(op, img.data), 0.0, 1.0))
    if isinstance(img, RawImage):
        return RawImage(np.clip(apply(op, img.data), 0.0, 1.0), img.pattern,
                        img.black_level, img.white_level)
    return np.clip(apply(op, img), 0.0, 1.0)
