"""Attack verdicts, label predictors and c-sweep drivers."""

from __future__ import annotations

import os
import subprocess
import tempfile
import threading
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import scaling
from .attack import AttackConfig, GradientOracle, run_attack
from .image_core import RawImage, RgbImage, l2_loss, load_rgb, psnr, save_rgb
from .proxy.losses import ssim

OBJECTIVE2_THRESHOLD = 0.025


class PredictorError(RuntimeError):
    pass


def resize_to(img: RgbImage, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize by the package's own scaling operators; upscaling is refused."""
    if img.shape[:2] == tuple(size):
        return img.data
    return scaling.apply(scaling.build_operator("bilinear", img.shape[:2], size), img.data)


class PrototypeGallery:
    """Nearest-prototype labeller: minimum per-element MSE, first entry wins ties."""

    def __init__(self, entries: Sequence[tuple[str, RgbImage]]):
        if not entries:
            raise ValueError("a gallery needs at least one prototype")
        sizes = {img.shape for _, img in entries}
        if len(sizes) != 1:
            raise ValueError(f"prototypes must share one size, got {sorted(sizes)}")
        self.labels = [label for label, _ in entries]
        self.size = next(iter(sizes))[:2]
        self._protos = np.stack([img.data for _, img in entries])

    @classmethod
    def from_directory(cls, path) -> "PrototypeGallery":
        files = sorted(Path(path).glob("*.ppm"))
        if not files:
            raise ValueError(f"no <label>.ppm prototypes in {path}")
        return cls([(f.stem, load_rgb(f)) for f in files])

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for label, proto in zip(self.labels, self._protos):
            save_rgb(RgbImage(proto), path / f"{label}.ppm")

    def distances(self, img: RgbImage) -> np.ndarray:
        x = resize_to(img, self.size)
        return ((self._protos - x) ** 2).mean(axis=(1, 2, 3))

    def predict(self, img: RgbImage) -> str:
        return self.labels[int(np.argmin(self.distances(img)))]


class ExternalCommand:
    """Classifier run as a subprocess: ``argv + [image.ppm]`` prints one label token."""

    def __init__(self, argv: Sequence[str], timeout: float | None = 60.0):
        if not argv:
            raise ValueError("empty predictor command")
        self.argv = list(argv)
        self.timeout = timeout
        self._lock = threading.Lock()

    def predict(self, img: RgbImage) -> str:
        with self._lock, tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "query.ppm")
            save_rgb(img, path)
            proc = subprocess.run(self.argv + [path], capture_output=True, text=True,
                                  timeout=self.timeout, check=False)
        if proc.returncode != 0:
            raise PredictorError(f"{self.argv[0]} exited with {proc.returncode}: {proc.stderr.strip()}")
        tokens = proc.stdout.split()
        if len(tokens) != 1:
            raise PredictorError(f"{self.argv[0]} printed {len(tokens)} tokens, expected one label")
        return tokens[0]


@dataclass(frozen=True)
class AttackVerdict:
    objective1_met: bool
    objective2_met: bool
    l2_raw: float
    l2_rgb: float
    psnr_source_attack: float
    ssim_target_output: float
    pred_target: str
    pred_output: str

    @property
    def success(self) -> bool:
        return self.objective1_met and self.objective2_met

    def to_dict(self) -> dict:
        return {**asdict(self), "success": self.success}


def verdict(source_raw: RawImage, adv_raw: RawImage, source: RgbImage, attack_img: RgbImage,
            target: RgbImage, output: RgbImage, predictor,
            raw_threshold: float = OBJECTIVE2_THRESHOLD,
            rgb_threshold: float = OBJECTIVE2_THRESHOLD) -> AttackVerdict:
    if target.shape != output.shape:
        raise ValueError(f"target {target.shape} != output {output.shape}")
    l2_raw, l2_rgb = l2_loss(source_raw, adv_raw), l2_loss(source, attack_img)
    pred_t, pred_o = predictor.predict(target), predictor.predict(output)
    return AttackVerdict(pred_o == pred_t, l2_raw <= raw_threshold and l2_rgb <= rgb_threshold,
                         l2_raw, l2_rgb, psnr(source, attack_img), ssim(target, output),
                         pred_t, pred_o)


def asr(verdicts: Sequence[AttackVerdict]) -> float:
    if not verdicts:
        raise ValueError("asr of an empty batch")
    return 100.0 * sum(v.success for v in verdicts) / len(verdicts)


@dataclass(frozen=True)
class SweepInstance:
    """Everything one attack needs; ``render`` maps a RAW to the RGB judged by the predictor."""

    oracle: GradientOracle
    source_raw: RawImage
    target: RgbImage
    op: scaling.ScalingOperator
    predictor: object
    render: Callable[[RawImage], RgbImage] | None = None

    def rgb(self, raw: RawImage) -> RgbImage:
        if self.render is not None:
            return self.render(raw)
        return RgbImage.from_unclamped(self.oracle.forward(raw.data))


@dataclass(frozen=True)
class SweepRow:
    c: float
    raw_term: float
    out_term: float
    total: float
    asr: float
    verdict: AttackVerdict


def attack_and_judge(inst: SweepInstance, cfg: AttackConfig = AttackConfig(), seed: int = 0):
    result = run_attack(inst.oracle, inst.source_raw, inst.target, inst.op, cfg, seed)
    source, attack_img = inst.rgb(inst.source_raw), inst.rgb(result.adversarial)
    output = scaling.scale(inst.op, attack_img)
    return result, verdict(inst.source_raw, result.adversarial, source, attack_img, inst.target,
                           output, inst.predictor, cfg.success_l2_threshold, cfg.success_l2_threshold)


def c_sweep(inst: SweepInstance, c_values: Sequence[float], seed: int = 0,
            base: AttackConfig = AttackConfig()) -> list[SweepRow]:
    """One attack per ``c`` with a shared seed; rows sorted by ``c``."""
    if not c_values:
        raise ValueError("no c values given")
    rows = []
    for c in sorted(float(c) for c in c_values):
        result, v = attack_and_judge(inst, replace(base, c=c), seed)
        rows.append(SweepRow(c, result.report.raw_term, result.report.out_term, result.report.total,
                             asr([v]), v))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> list[dict]:
    return [{"c": r.c, "raw_term": r.raw_term, "out_term": r.out_term, "total": r.total,
             "asr": r.asr} for r in rows]
