"""Differentiable ISP: a chain of RAW->RGB stages with hand-written VJPs.

Every stage exposes ``forward(x, ctx)`` and ``vjp(x, g, ctx)`` where ``x`` is
the stage input (``HxW`` before demosaicing, ``HxWx3`` after) and ``g`` the
cotangent on its output.  Nothing inside the chain is clamped; only images
emitted through :func:`isp_forward` are.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar, Sequence

import jsonschema
import numpy as np

from . import _filters
from .image_core import BayerPattern, RawImage, RgbImage

KERNEL_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
KERNEL_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
GAMMA_FLOOR = 1e-8


class IspConfigError(ValueError):
    """Invalid stage parameters, stage order or pipeline config document."""


@dataclass(frozen=True)
class RawContext:
    """Sensor metadata the RAW-domain stages need."""

    pattern: BayerPattern = BayerPattern.RGGB
    black_level: float = 0.0
    white_level: float = 1.0

    @classmethod
    def of(cls, raw: RawImage) -> "RawContext":
        return cls(raw.pattern, raw.black_level, raw.white_level)


@dataclass(frozen=True)
class BlackLevel:
    """``(x - black) / (white - black)``; levels default to the RAW metadata."""

    black: float | None = None
    white: float | None = None
    kind: ClassVar[str] = "black_level"
    domain: ClassVar[str] = "raw"

    def __post_init__(self):
        b = 0.0 if self.black is None else self.black
        w = 1.0 if self.white is None else self.white
        if not (0.0 <= b < w <= 1.0):
            raise IspConfigError(f"black_level needs 0 <= black < white <= 1, got {b}, {w}")

    def _levels(self, ctx: RawContext) -> tuple[float, float]:
        b = ctx.black_level if self.black is None else self.black
        w = ctx.white_level if self.white is None else self.white
        return b, w

    def forward(self, x, ctx):
        b, w = self._levels(ctx)
        return (x - b) / (w - b)

    def vjp(self, x, g, ctx):
        b, w = self._levels(ctx)
        return g / (w - b)


@dataclass(frozen=True)
class WhiteBalanceGain:
    r: float = 1.0
    g: float = 1.0
    b: float = 1.0
    kind: ClassVar[str] = "white_balance"
    domain: ClassVar[str] = "raw"

    def __post_init__(self):
        if min(self.r, self.g, self.b) <= 0:
            raise IspConfigError("white-balance gains must be > 0")

    def gain_map(self, shape, ctx: RawContext) -> np.ndarray:
        gains = np.array([self.r, self.g, self.b])
        return gains[ctx.pattern.channel_map(*shape)]

    def forward(self, x, ctx):
        return x * self.gain_map(x.shape, ctx)

    def vjp(self, x, g, ctx):
        return g * self.gain_map(x.shape, ctx)


@dataclass(frozen=True)
class DemosaicBilinear:
    """3x3 bilinear interpolation of each masked colour plane."""

    kind: ClassVar[str] = "demosaic_bilinear"
    domain: ClassVar[str] = "demosaic"

    @staticmethod
    def _kernels():
        return (KERNEL_RB, KERNEL_G, KERNEL_RB)

    def forward(self, x, ctx):
        masks = ctx.pattern.masks(*x.shape)
        return np.stack([_filters.correlate(x * m, k) for m, k in zip(masks, self._kernels())],
                        axis=-1)

    def vjp(self, x, g, ctx):
        masks = ctx.pattern.masks(*x.shape)
        out = np.zeros(x.shape)
        for c, (m, k) in enumerate(zip(masks, self._kernels())):
            out += m * _filters.correlate_adjoint(g[..., c], k)
        return out


@dataclass(frozen=True)
class BilateralFilter:
    """Per-channel bilateral filter over a ``(2r+1)^2`` reflect-padded window."""

    radius: int = 2
    sigma_spatial: float = 1.7
    sigma_range: float = 0.1
    kind: ClassVar[str] = "bilateral"
    domain: ClassVar[str] = "rgb"

    def __post_init__(self):
        if self.radius not in (1, 2, 3):
            raise IspConfigError(f"bilateral radius must be 1, 2 or 3, got {self.radius}")
        if self.sigma_spatial <= 0 or self.sigma_range <= 0:
            raise IspConfigError("bilateral sigmas must be > 0")

    def _spatial(self) -> np.ndarray:
        r = self.radius
        u, v = np.mgrid[-r:r + 1, -r:r + 1]
        return np.exp(-(u * u + v * v) / (2.0 * self.sigma_spatial ** 2)).ravel()

    def _terms(self, plane):
        win = _filters.windows(plane, self.radius)
        diff = win - plane[..., None]
        weights = self._spatial() * np.exp(-(diff * diff) / (2.0 * self.sigma_range ** 2))
        denom = weights.sum(-1)
        out = (weights * win).sum(-1) / denom
        return win, diff, weights, denom, out

    def forward(self, x, ctx):
        return np.stack([self._terms(x[..., c])[-1] for c in range(x.shape[-1])], axis=-1)

    def vjp(self, x, g, ctx):
        r = self.radius
        k = 2 * r + 1
        h, w = x.shape[:2]
        result = np.empty_like(x, dtype=np.float64)
        for c in range(x.shape[-1]):
            win, diff, weights, denom, out = self._terms(x[..., c])
            gc = g[..., c][..., None] / denom[..., None]
            direct = gc * weights
            # d weight / d(centre) = weight * diff / sigma_r^2, and minus that for the neighbour
            via_weight = gc * (win - out[..., None]) * weights * diff / self.sigma_range ** 2
            neighbour = (direct - via_weight).reshape(h, w, k, k)
            gp = np.zeros((h + 2 * r, w + 2 * r))
            for u in range(k):
                for v in range(k):
                    gp[u:u + h, v:v + w] += neighbour[:, :, u, v]
            result[..., c] = _filters.reflect_pad_adjoint(gp, r) + via_weight.sum(-1)
        return result


@dataclass(frozen=True)
class Gamma:
    """``max(x, floor) ** exponent``; the floor keeps the derivative finite."""

    exponent: float = 1.0 / 2.2
    kind: ClassVar[str] = "gamma"
    domain: ClassVar[str] = "rgb"

    def __post_init__(self):
        if not self.exponent > 0:
            raise IspConfigError("gamma exponent must be > 0")

    def forward(self, x, ctx):
        return np.maximum(x, GAMMA_FLOOR) ** self.exponent

    def vjp(self, x, g, ctx):
        base = np.maximum(x, GAMMA_FLOOR)
        return np.where(x > GAMMA_FLOOR, g * self.exponent * base ** (self.exponent - 1.0), 0.0)


STAGE_TYPES = {cls.kind: cls for cls in (BlackLevel, WhiteBalanceGain, DemosaicBilinear,
                                         BilateralFilter, Gamma)}
_DOMAIN_RANK = {"raw": 0, "demosaic": 1, "rgb": 2}


@dataclass(frozen=True)
class DifferentiableIsp:
    stages: tuple = field(default_factory=lambda: (DemosaicBilinear(),))

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        kinds = [s.domain for s in stages]
        if kinds.count("demosaic") != 1:
            raise IspConfigError("pipeline needs exactly one demosaic stage")
        ranks = [_DOMAIN_RANK[k] for k in kinds]
        if ranks != sorted(ranks):
            raise IspConfigError(
                "stage order violation: RAW-domain stages must precede demosaic and "
                f"RGB-domain stages must follow it, got {[s.kind for s in stages]}")

    def forward_array(self, x: np.ndarray, ctx: RawContext = RawContext()) -> np.ndarray:
        """Unclamped composition of every stage."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] % 2 or x.shape[1] % 2:
            raise ValueError(f"RAW plane must be 2-D with even sides, got {x.shape}")
        for stage in self.stages:
            x = stage.forward(x, ctx)
        return x

    def vjp_array(self, x: np.ndarray, g: np.ndarray, ctx: RawContext = RawContext()) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        inputs = []
        for stage in self.stages:
            inputs.append(x)
            x = stage.forward(x, ctx)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise ValueError(f"cotangent shape {g.shape} != output shape {x.shape}")
        for stage, inp in zip(reversed(self.stages), reversed(inputs)):
            g = stage.vjp(inp, g, ctx)
        return g

    def to_config(self) -> dict:
        return {"stages": [{"kind": s.kind, **asdict(s)} for s in self.stages]}


def isp_forward(isp: DifferentiableIsp, raw: RawImage) -> RgbImage:
    return RgbImage.from_unclamped(isp.forward_array(raw.data, RawContext.of(raw)))


def isp_vjp(isp: DifferentiableIsp, raw: RawImage, grad_rgb: np.ndarray) -> np.ndarray:
    """Transposed Jacobian of the unclamped pipeline at ``raw`` applied to ``grad_rgb``."""
    expected = raw.shape + (3,)
    if np.shape(grad_rgb) != expected:
        raise ValueError(f"cotangent shape {np.shape(grad_rgb)} != {expected}")
    return isp.vjp_array(raw.data, grad_rgb, RawContext.of(raw))


def bilinear_pipeline() -> DifferentiableIsp:
    return DifferentiableIsp((DemosaicBilinear(),))


def bilateral_pipeline(radius: int = 2, sigma_spatial: float = 1.7,
                       sigma_range: float = 0.1) -> DifferentiableIsp:
    return DifferentiableIsp((DemosaicBilinear(),
                              BilateralFilter(radius, sigma_spatial, sigma_range)))


# --------------------------------------------------------------------------- config

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_LEVEL = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

PIPELINE_SCHEMA = {
    "type": "object",
    "required": ["stages"],
    "additionalProperties": False,
    "properties": {
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "oneOf": [
                    {"properties": {"kind": {"const": "black_level"}, "black": _LEVEL,
                                    "white": _LEVEL},
                     "additionalProperties": False},
                    {"properties": {"kind": {"const": "white_balance"}, "r": _POSITIVE,
                                    "g": _POSITIVE, "b": _POSITIVE},
                     "additionalProperties": False},
                    {"properties": {"kind": {"const": "demosaic_bilinear"}},
                     "additionalProperties": False},
                    {"properties": {"kind": {"const": "bilateral"},
                                    "radius": {"enum": [1, 2, 3]},
                                    "sigma_spatial": _POSITIVE, "sigma_range": _POSITIVE},
                     "additionalProperties": False},
                    {"properties": {"kind": {"const": "gamma"}, "exponent": _POSITIVE},
                     "additionalProperties": False},
                ],
            },
        }
    },
}


def pipeline_from_config(doc: dict | Sequence) -> DifferentiableIsp:
    """Build a pipeline from ``{"stages": [{"kind": ..., **params}, ...]}``."""
    if isinstance(doc, (list, tuple)):
        doc = {"stages": list(doc)}
    try:
        jsonschema.validate(doc, PIPELINE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise IspConfigError(f"pipeline config: {exc.message} at {list(exc.absolute_path)}") from exc
    stages = []
    for stage in doc["stages"]:
        params = {k: v for k, v in stage.items() if k != "kind"}
        stages.append(STAGE_TYPES[stage["kind"]](**params))
    return DifferentiableIsp(tuple(stages))


def load_pipeline(path) -> DifferentiableIsp:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IspConfigError(f"{path}: {exc}") from exc
    return pipeline_from_config(doc)


def stage_is_linear(stage) -> bool:
    return isinstance(stage, (BlackLevel, WhiteBalanceGain, DemosaicBilinear)) or (
        isinstance(stage, Gamma) and math.isclose(stage.exponent, 1.0))
