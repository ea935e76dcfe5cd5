"""Supervised proxy training on RAW/RGB pairs collected from a target ISP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ..image_core import RawImage, RgbImage, psnr
from ..optim import Adam
from .losses import ProxyLossConfig, loss_and_grad, ssim
from .model import ProxyModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class QueryableIsp(Protocol):
    def query(self, raw: RawImage) -> RgbImage: ...


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 3000
    batch: int = 8
    lr: float = 2e-3
    crop: int | None = 32
    lr_floor: float = 0.05
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or not self.lr > 0:
            raise ValueError("steps and batch must be >= 1, lr > 0")
        if self.crop is not None and (self.crop % 4 or self.crop < 16):
            raise ValueError("crop must be a multiple of 4 and >= 16")

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``lr`` to ``lr * lr_floor``."""
        progress = step / max(self.steps - 1, 1)
        return self.lr * (self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass
class TrainResult:
    model: ProxyModel
    history: list[float]
    holdout_psnr: float
    holdout_ssim: float
    holdout_indices: list[int] = field(default_factory=list)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed train/held-out split; at least one held-out pair when ``n > 1``."""
    order = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(fraction * n))) if n > 1 else 0
    return np.sort(order[k:]), np.sort(order[:k])


def predict(model: ProxyModel, raws: np.ndarray, chunk: int = 8) -> np.ndarray:
    out = [model.forward(raws[i:i + chunk])[0] for i in range(0, len(raws), chunk)]
    return np.concatenate(out).astype(np.float64)


def fit_proxy(pairs: Sequence[tuple[RawImage, RgbImage]], cfg: ProxyLossConfig = ProxyLossConfig(),
              schedule: TrainSchedule = TrainSchedule(), seed: int = 0) -> TrainResult:
    if not pairs:
        raise ValueError("empty training set")
    shapes = {raw.shape for raw, _ in pairs}
    if len(shapes) != 1:
        raise ValueError(f"all training pairs must share one size, got {sorted(shapes)}")
    x_all = np.stack([raw.data for raw, _ in pairs]).astype(np.float32)
    y_all = np.stack([rgb.data for _, rgb in pairs]).astype(np.float32)
    train_idx, hold_idx = split_indices(len(pairs), schedule.holdout_fraction, seed)

    rng = np.random.default_rng(seed)
    model = ProxyModel(seed=seed)
    names = [name for name, _ in model.named_params()]
    opt = Adam(model.parameters(), lr=schedule.lr)
    h, w = x_all.shape[1:]
    crop = schedule.crop if schedule.crop is not None and schedule.crop < min(h, w) else None
    history = []
    for step in range(schedule.steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=schedule.batch)]
        xb, yb = x_all[idx], y_all[idx]
        if crop is not None:
            oi = 2 * rng.integers(0, (h - crop) // 2 + 1)
            oj = 2 * rng.integers(0, (w - crop) // 2 + 1)
            xb = xb[:, oi:oi + crop, oj:oj + crop]
            yb = yb[:, oi:oi + crop, oj:oj + crop]
        pred, cache = model.forward(xb)
        breakdown, grad = loss_and_grad(pred, yb, cfg)
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(f"non-finite loss at step {step}: {breakdown}")
        history.append(breakdown.total)
        _, grads = model.backward(cache, grad.astype(model.dtype), need_input_grad=False)
        opt.lr = schedule.lr_at(step)
        opt.step([grads[n] for n in names])
        if step % 250 == 0:
            log.info("step %d loss %.5f", step, breakdown.total)

    eval_idx = hold_idx if len(hold_idx) else train_idx
    pred = np.clip(predict(model, x_all[eval_idx]), 0.0, 1.0)
    target = y_all[eval_idx].astype(np.float64)
    return TrainResult(model, history, psnr(pred, target), ssim(pred, target, cfg),
                       [int(i) for i in hold_idx])


def train_proxy(target: QueryableIsp, raws: Sequence[RawImage],
                cfg: ProxyLossConfig = ProxyLossConfig(),
                schedule: TrainSchedule = TrainSchedule(), seed: int = 0) -> TrainResult:
    """Collect pairs by querying ``target`` on every RAW, then fit a proxy."""
    if not raws:
        raise ValueError("empty training set")
    return fit_proxy([(raw, target.query(raw)) for raw in raws], cfg, schedule, seed)
