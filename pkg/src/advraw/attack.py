"""Image-scaling attack on the RAW plane.

The attack minimises

    mean((h(S_R) - h(A_R))**2) + c * mean((T - L @ h(A_R) @ R)**2)

over the adversarial RAW ``A_R`` with Adam, projecting onto ``[0, 1]``.  The
ISP ``h`` is seen only through a :class:`GradientOracle`: the differentiable
ISP itself, or a trained proxy of a black-box one.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import scaling
from .image_core import RawImage, RgbImage, l2_loss
from .isp_diff import DifferentiableIsp, RawContext
from .optim import Adam

log = logging.getLogger(__name__)


class AttackDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    c: float = 2.5
    iterations: int = 1000
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    success_l2_threshold: float = 0.0250
    output_match_threshold: float = 0.005
    clip_every_step: bool = True

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (self.success_l2_threshold > 0 and self.output_match_threshold > 0):
            raise ValueError("thresholds must be > 0")


@dataclass(frozen=True)
class AttackObjectiveReport:
    raw_term: float
    out_term: float
    total: float


@dataclass(frozen=True)
class GradientOracle:
    """A RAW->RGB forward map paired with its vector-Jacobian product."""

    forward: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "oracle"


def isp_oracle(isp: DifferentiableIsp, ctx: RawContext | RawImage = RawContext(),
               verify_at: np.ndarray | None = None) -> GradientOracle:
    if isinstance(ctx, RawImage):
        ctx = RawContext.of(ctx)
    oracle = GradientOracle(lambda x: isp.forward_array(x, ctx),
                            lambda x, g: isp.vjp_array(x, g, ctx), name="isp")
    if verify_at is not None:
        verify_oracle(oracle, verify_at)
    return oracle


def directional_check(oracle: GradientOracle, x: np.ndarray, rng: np.random.Generator,
                      eps: float = 1e-4) -> tuple[float, float]:
    """(VJP estimate, central difference) of ``<cotangent, J @ direction>``."""
    x = np.asarray(x, dtype=np.float64)
    y = oracle.forward(x)
    cot = rng.standard_normal(np.shape(y))
    direction = rng.standard_normal(x.shape)
    analytic = float(np.sum(oracle.vjp(x, cot) * direction))
    plus = oracle.forward(x + eps * direction)
    minus = oracle.forward(x - eps * direction)
    numeric = float(np.sum(cot * (plus - minus)) / (2 * eps))
    return analytic, numeric


def verify_oracle(oracle: GradientOracle, x: np.ndarray, probes: int = 2, seed: int = 0,
                  rtol: float = 1e-3, eps: float = 1e-4) -> None:
    """Spot-check the VJP against central differences; raises on disagreement."""
    x = np.asarray(x, dtype=np.float64)
    y = oracle.forward(x)
    if np.shape(oracle.vjp(x, np.zeros_like(y))) != x.shape:
        raise ValueError(f"{oracle.name}: VJP shape does not match input shape")
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        analytic, numeric = directional_check(oracle, x, rng, eps)
        if abs(analytic - numeric) > rtol * max(abs(numeric), 1e-12):
            raise ValueError(f"{oracle.name}: VJP {analytic:.6g} disagrees with "
                             f"finite difference {numeric:.6g}")


def _as_array(img) -> np.ndarray:
    if isinstance(img, (RawImage, RgbImage)):
        return img.data
    return np.asarray(img, dtype=np.float64)


def _evaluate(oracle: GradientOracle, x: np.ndarray, source: np.ndarray, target: np.ndarray,
              op: scaling.ScalingOperator, c: float, need_grad: bool = True):
    attack_img = oracle.forward(x)
    if attack_img.shape != source.shape:
        raise ValueError(f"oracle output {attack_img.shape} != source image {source.shape}")
    if op.src_size != source.shape[:2] or op.dst_size != target.shape[:2]:
        raise ValueError(f"scaling operator {op.src_size}->{op.dst_size} does not map "
                         f"{source.shape[:2]} to {target.shape[:2]}")
    output = scaling.apply(op, attack_img)
    d1 = source - attack_img
    d2 = target - output
    raw_term = float(np.mean(d1 * d1))
    out_term = float(np.mean(d2 * d2))
    report = AttackObjectiveReport(raw_term, out_term, raw_term + c * out_term)
    if not need_grad:
        return report, None
    g_attack = (-2.0 / d1.size) * d1 + c * scaling.scale_adjoint(op, (-2.0 / d2.size) * d2)
    return report, oracle.vjp(x, g_attack)


def objective(oracle: GradientOracle, adv_raw, source, target, op: scaling.ScalingOperator,
              c: float) -> AttackObjectiveReport:
    """Objective terms at ``adv_raw``; ``source`` is ``h(S_R)``, unclamped if possible."""
    return _evaluate(oracle, _as_array(adv_raw), _as_array(source), _as_array(target), op, c,
                     need_grad=False)[0]


def objective_gradient(oracle: GradientOracle, adv_raw, source, target,
                       op: scaling.ScalingOperator, c: float) -> np.ndarray:
    return _evaluate(oracle, _as_array(adv_raw), _as_array(source), _as_array(target), op, c)[1]


@dataclass
class AttackResult:
    adversarial: RawImage
    trace: list[AttackObjectiveReport]
    best_iteration: int
    report: AttackObjectiveReport
    config: AttackConfig = field(default_factory=AttackConfig)


def run_attack(oracle: GradientOracle, source_raw: RawImage, target, op: scaling.ScalingOperator,
               cfg: AttackConfig = AttackConfig(), seed: int = 0) -> AttackResult:
    """Adam on the attack objective starting from the clean RAW.

    The optimiser is deterministic; ``seed`` is recorded for manifests only.
    The returned RAW is the lowest-objective iterate (earliest on ties),
    clipped to ``[0, 1]``.
    """
    del seed
    target = _as_array(target)
    x = np.array(source_raw.data, dtype=np.float64)
    source = oracle.forward(x)
    adam = Adam([x], cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)

    report, grad = _evaluate(oracle, x, source, target, op, cfg.c)
    best_total, best_x, best_iter = report.total, x.copy(), 0
    trace: list[AttackObjectiveReport] = []
    for k in range(1, cfg.iterations + 1):
        adam.step([grad])
        if cfg.clip_every_step:
            np.clip(x, 0.0, 1.0, out=x)
        report, grad = _evaluate(oracle, x, source, target, op, cfg.c)
        if not (math.isfinite(report.total) and np.all(np.isfinite(grad))):
            raise AttackDiverged(f"objective became non-finite at iteration {k}")
        trace.append(report)
        if report.total < best_total:
            best_total, best_x, best_iter = report.total, x.copy(), k
    adversarial = source_raw.replace(np.clip(best_x, 0.0, 1.0))
    final, _ = _evaluate(oracle, adversarial.data, source, target, op, cfg.c, need_grad=False)
    log.debug("attack done: best iteration %d, total %.6g", best_iter, final.total)
    return AttackResult(adversarial, trace, best_iter, final, cfg)


def best_so_far(trace: list[AttackObjectiveReport]) -> list[float]:
    return list(np.minimum.accumulate([r.total for r in trace]))


def write_trace(trace: list[AttackObjectiveReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "raw_term", "out_term", "total"])
        for k, r in enumerate(trace, start=1):
            writer.writerow([k, repr(r.raw_term), repr(r.out_term), repr(r.total)])


class QueryableIsp(Protocol):
    def query(self, raw: RawImage) -> RgbImage: ...


class Labeller(Protocol):
    def predict(self, img: RgbImage) -> str: ...


@dataclass
class TransferResult:
    attack_image: RgbImage
    output_image: RgbImage
    metrics: dict


def transfer_attack(adv_raw: RawImage, target_isp: QueryableIsp, op: scaling.ScalingOperator,
                    target: RgbImage, source_raw: RawImage,
                    predictor: Labeller | None = None) -> TransferResult:
    """Run the crafted RAW through the real (black-box) ISP and measure the outcome."""
    if adv_raw.shape != source_raw.shape:
        raise ValueError(f"adversarial RAW {adv_raw.shape} != source RAW {source_raw.shape}")
    if op.src_size != adv_raw.shape or op.dst_size != target.shape[:2]:
        raise ValueError("scaling operator does not match RAW and target sizes")
    source = target_isp.query(source_raw)
    attack_img = target_isp.query(adv_raw)
    output = scaling.scale(op, attack_img)
    metrics = {
        "l2_raw": l2_loss(source_raw, adv_raw),
        "l2_source_attack": l2_loss(source, attack_img),
        "l2_target_output": l2_loss(target, output),
    }
    if predictor is not None:
        metrics["pred_target"] = predictor.predict(target)
        metrics["pred_output"] = predictor.predict(output)
        metrics["pred_source"] = predictor.predict(scaling.scale(op, source))
        metrics["objective1_met"] = metrics["pred_output"] == metrics["pred_target"]
    return TransferResult(attack_img, output, metrics)


def config_dict(cfg: AttackConfig) -> dict:
    return asdict(cfg)


def load_attack_config(path) -> AttackConfig:
    return AttackConfig(**json.loads(Path(path).read_text()))
