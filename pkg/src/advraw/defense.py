"""RAW-domain filtering defenses: average and median over square windows."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import scaling
from ._filters import windows
from .image_core import RawImage, RgbImage
from .isp_diff import DifferentiableIsp, isp_forward


class FilterKind(str, enum.Enum):
    AVERAGE = "average"
    MEDIAN = "median"


@dataclass(frozen=True)
class FilterWindow:
    kind: FilterKind = FilterKind.MEDIAN
    radius: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(str.lower(self.kind)))
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"filter radius must be an integer >= 1, got {self.radius}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1


def filter_plane(x: np.ndarray, w: FilterWindow) -> np.ndarray:
    """Unclamped filter of a 2-D plane with reflect-padded borders."""
    x = np.asarray(x, dtype=np.float64)
    if w.radius >= min(x.shape):
        raise ValueError(f"{w.side}x{w.side} window does not fit a {x.shape[0]}x{x.shape[1]} image")
    stack = windows(x, w.radius)
    if w.kind is FilterKind.AVERAGE:
        return stack.mean(axis=-1)
    return np.median(stack, axis=-1)


def filter_raw(raw: RawImage, w: FilterWindow = FilterWindow()) -> RawImage:
    return raw.replace(np.clip(filter_plane(raw.data, w), 0.0, 1.0))


def render(isp, raw: RawImage) -> RgbImage:
    """Run ``raw`` through a differentiable ISP, a query-only ISP or a plain callable."""
    if isinstance(isp, DifferentiableIsp):
        return isp_forward(isp, raw)
    if hasattr(isp, "query"):
        return isp.query(raw)
    return isp(raw)


@dataclass(frozen=True)
class DefenseReport:
    attack_success_before: bool
    attack_success_after: bool
    semantics_recovered: bool
    labels: dict

    def to_dict(self) -> dict:
        return {"attack_success_before": self.attack_success_before,
                "attack_success_after": self.attack_success_after,
                "semantics_recovered": self.semantics_recovered,
                "labels": dict(self.labels)}


def evaluate_defense(source_raw: RawImage, adv_raw: RawImage, isp, op: scaling.ScalingOperator,
                     target: RgbImage, w: FilterWindow, predictor) -> DefenseReport:
    """Label-level effect of filtering the adversarial RAW.

    The attack counts as successful when the downscaled ISP output is labelled
    like the target.  Semantics count as recovered when the filtered output is
    labelled like the downscaled clean image.  The two are independent.
    """
    if source_raw.shape != adv_raw.shape:
        raise ValueError(f"source RAW {source_raw.shape} != adversarial RAW {adv_raw.shape}")
    if op.src_size != adv_raw.shape or op.dst_size != target.shape[:2]:
        raise ValueError("scaling operator does not match RAW and target sizes")
    out = lambda raw: scaling.scale(op, render(isp, raw))  # noqa: E731
    labels = {
        "target": predictor.predict(target),
        "source": predictor.predict(out(source_raw)),
        "before": predictor.predict(out(adv_raw)),
        "after": predictor.predict(out(filter_raw(adv_raw, w))),
    }
    return DefenseReport(labels["before"] == labels["target"], labels["after"] == labels["target"],
                         labels["after"] == labels["source"], labels)
