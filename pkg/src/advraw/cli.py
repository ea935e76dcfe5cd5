"""Command-line front end.

Every subcommand writes into ``--out-dir`` and finishes with
``run_manifest.json``.  Artifacts are staged in a hidden directory and only
moved into place once the whole run succeeded, so a failed run leaves nothing
behind.  ``advraw replay MANIFEST --out-dir DIR`` re-executes a recorded run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

from . import __version__, defense, evaluation, isp_diff, scaling, synthetic, target_isp
from .attack import AttackConfig, config_dict, isp_oracle, load_attack_config, run_attack
from .attack import transfer_attack, write_trace
from .image_core import RawImage, RgbImage, load_raw, load_rgb, save_raw, save_rgb
from .proxy import ProxyLossConfig, TrainSchedule, load_checkpoint, proxy_oracle, save_checkpoint
from .proxy import fit_proxy

log = logging.getLogger("advraw")

MANIFEST = "run_manifest.json"
BUILTIN_PIPELINES = {"bilinear": isp_diff.bilinear_pipeline, "bilateral": isp_diff.bilateral_pipeline}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- loaders

def _pipeline(name: str) -> isp_diff.DifferentiableIsp:
    if name in BUILTIN_PIPELINES:
        return BUILTIN_PIPELINES[name]()
    if not Path(name).is_file():
        raise CliError(f"pipeline config not found: {name}")
    return isp_diff.load_pipeline(name)


def _target_isp(path: str | None) -> target_isp.BlackBoxIsp:
    if path is None:
        return target_isp.BlackBoxIsp()
    if not Path(path).is_file():
        raise CliError(f"target ISP config not found: {path}")
    return target_isp.load_target_isp(path)


def _file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    return h, w


def _attack_config(args) -> AttackConfig:
    base = load_attack_config(_file(args.attack_config, "attack config")) if args.attack_config \
        else AttackConfig()
    overrides = {k: v for k, v in (("c", args.c), ("iterations", args.iterations),
                                   ("learning_rate", args.lr)) if v is not None}
    return AttackConfig(**{**config_dict(base), **overrides})


def _gallery(args, target: RgbImage, source_out: RgbImage):
    """User gallery, or the two-class default: the target versus the downscaled clean image."""
    if args.gallery:
        if not Path(args.gallery).is_dir():
            raise CliError(f"gallery directory not found: {args.gallery}")
        return evaluation.PrototypeGallery.from_directory(args.gallery)
    if args.predictor_cmd:
        return evaluation.ExternalCommand(args.predictor_cmd.split())
    return evaluation.PrototypeGallery([("target", target), ("source", source_out)])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, out: Path) -> dict:
    if args.kind == "training":
        raws = synthetic.training_raws(args.n, args.size, seed=args.seed)
        for i, raw in enumerate(raws):
            save_raw(raw, out / f"raw_{i:04d}.pgm")
        return {"count": len(raws)}
    fixtures = synthetic.attack_fixtures(args.n, args.size, args.target_size, seed=args.seed)
    for i, fx in enumerate(fixtures):
        save_raw(fx.source_raw, out / f"source_{i:02d}.pgm")
        save_rgb(fx.target, out / f"target_{i:02d}.ppm")
    return {"count": len(fixtures)}


def cmd_isp_run(args, out: Path) -> dict:
    raw = load_raw(_file(args.raw, "RAW image"))
    isp = target_isp.BlackBoxIsp() if args.pipeline == "target" else _pipeline(args.pipeline)
    rgb = defense.render(isp, raw)
    save_rgb(rgb, out / "rgb.ppm")
    cfg = isp.to_config() if isinstance(isp, isp_diff.DifferentiableIsp) else isp.config()
    return {"pipeline": cfg}


def cmd_scale(args, out: Path) -> dict:
    path = _file(args.image, "image")
    is_raw = path.suffix.lower() == ".pgm"
    img = load_raw(path) if is_raw else load_rgb(path)
    op = scaling.build_operator(args.algorithm, img.shape[:2], args.size)
    result = scaling.scale(op, img)
    if is_raw:
        save_raw(result, out / "scaled.pgm")
    else:
        save_rgb(result, out / "scaled.ppm")
    return {}


def _write_attack(out: Path, adv: RawImage, attack_img: RgbImage, output: RgbImage, trace) -> None:
    save_raw(adv, out / "adversarial.pgm")
    save_rgb(attack_img, out / "attack.ppm")
    save_rgb(output, out / "output.ppm")
    write_trace(trace, out / "trace.csv")


def cmd_attack_direct(args, out: Path) -> dict:
    raw = load_raw(_file(args.raw, "RAW image"))
    target = load_rgb(_file(args.target, "target image"))
    isp = _pipeline(args.pipeline)
    cfg = _attack_config(args)
    op = scaling.build_operator(args.algorithm, raw.shape, target.shape[:2])
    oracle = isp_oracle(isp, raw)
    result = run_attack(oracle, raw, target, op, cfg, seed=args.seed)
    source, attack_img = isp_diff.isp_forward(isp, raw), isp_diff.isp_forward(isp, result.adversarial)
    output = scaling.scale(op, attack_img)
    predictor = _gallery(args, target, scaling.scale(op, source))
    v = evaluation.verdict(raw, result.adversarial, source, attack_img, target, output, predictor,
                           cfg.success_l2_threshold, cfg.success_l2_threshold)
    _write_attack(out, result.adversarial, attack_img, output, result.trace)
    _write_json(out / "verdict.json", {**v.to_dict(), "best_iteration": result.best_iteration,
                                       "raw_term": result.report.raw_term,
                                       "out_term": result.report.out_term,
                                       "total": result.report.total})
    return {"attack": config_dict(cfg), "pipeline": isp.to_config()}


def cmd_train_proxy(args, out: Path) -> dict:
    raw_dir = Path(args.raw_dir)
    files = sorted(raw_dir.glob("*.pgm")) if raw_dir.is_dir() else []
    if not files:
        raise CliError(f"no .pgm RAW files in {args.raw_dir}")
    isp = _target_isp(args.target_isp)
    loss = ProxyLossConfig(lambda_ssim=args.lambda_ssim, lambda_perceptual=args.lambda_perceptual)
    schedule = TrainSchedule(steps=args.steps, batch=args.batch, lr=args.lr,
                             crop=args.crop or None)
    pairs = target_isp.generate_pairs(isp, [load_raw(f) for f in files], patch=args.patch)
    result = fit_proxy(pairs, loss, schedule, seed=args.seed)
    save_checkpoint(result.model, out / "proxy.bin")
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total"])
        writer.writerows([k, repr(v)] for k, v in enumerate(result.history))
    _write_json(out / "metrics.json", {"holdout_psnr": result.holdout_psnr,
                                       "holdout_ssim": result.holdout_ssim,
                                       "holdout_indices": result.holdout_indices,
                                       "pairs": len(pairs)})
    return {"target_isp": isp.config(), "schedule": vars(schedule).copy(),
            "loss": {"lambda_ssim": loss.lambda_ssim, "lambda_perceptual": loss.lambda_perceptual}}


def cmd_attack_proxy(args, out: Path) -> dict:
    raw = load_raw(_file(args.raw, "RAW image"))
    target = load_rgb(_file(args.target, "target image"))
    model = load_checkpoint(_file(args.checkpoint, "checkpoint"))
    isp = _target_isp(args.target_isp)
    cfg = _attack_config(args)
    op = scaling.build_operator(args.algorithm, raw.shape, target.shape[:2])
    result = run_attack(proxy_oracle(model), raw, target, op, cfg, seed=args.seed)
    predictor = _gallery(args, target, scaling.scale(op, isp.query(raw)))
    transfer = transfer_attack(result.adversarial, isp, op, target, raw, predictor)
    v = evaluation.verdict(raw, result.adversarial, isp.query(raw), transfer.attack_image, target,
                           transfer.output_image, predictor,
                           cfg.success_l2_threshold, cfg.success_l2_threshold)
    _write_attack(out, result.adversarial, transfer.attack_image, transfer.output_image,
                  result.trace)
    _write_json(out / "transfer.json", transfer.metrics)
    _write_json(out / "verdict.json", {**v.to_dict(), "best_iteration": result.best_iteration})
    return {"attack": config_dict(cfg), "target_isp": isp.config()}


def cmd_defend(args, out: Path) -> dict:
    source_raw = load_raw(_file(args.source_raw, "source RAW"))
    adv_raw = load_raw(_file(args.adv_raw, "adversarial RAW"))
    target = load_rgb(_file(args.target, "target image"))
    isp = target_isp.BlackBoxIsp() if args.pipeline == "target" else _pipeline(args.pipeline)
    window = defense.FilterWindow(args.filter, args.radius)
    op = scaling.build_operator(args.algorithm, adv_raw.shape, target.shape[:2])
    predictor = _gallery(args, target, scaling.scale(op, defense.render(isp, source_raw)))
    report = defense.evaluate_defense(source_raw, adv_raw, isp, op, target, window, predictor)
    save_raw(defense.filter_raw(adv_raw, window), out / "filtered.pgm")
    _write_json(out / "report.json", report.to_dict())
    return {"window": {"kind": window.kind.value, "radius": window.radius}}


def cmd_sweep_c(args, out: Path) -> dict:
    raw = load_raw(_file(args.raw, "RAW image"))
    target = load_rgb(_file(args.target, "target image"))
    isp = _pipeline(args.pipeline)
    base = _attack_config(args)
    op = scaling.build_operator(args.algorithm, raw.shape, target.shape[:2])
    predictor = _gallery(args, target, scaling.scale(op, isp_diff.isp_forward(isp, raw)))
    inst = evaluation.SweepInstance(isp_oracle(isp, raw), raw, target, op, predictor,
                                    render=lambda r: isp_diff.isp_forward(isp, r))
    rows = evaluation.c_sweep(inst, args.c_values, seed=args.seed, base=base)
    table = evaluation.sweep_table(rows)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]))
        writer.writeheader()
        writer.writerows({k: repr(v) for k, v in row.items()} for row in table)
    _write_json(out / "sweep.json", table)
    return {"attack": config_dict(base), "pipeline": isp.to_config()}


# ---------------------------------------------------------------- parser

def _add_attack_flags(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--algorithm", choices=[a.value for a in scaling.ScalingAlgorithm],
                   default="bilinear", help="downscaling algorithm (default: bilinear)")
    p.add_argument("--c", type=float, default=None, help="output-term weight (default 2.5)")
    p.add_argument("--iterations", type=int, default=None, help="Adam steps (default 1000)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 0.01)")
    p.add_argument("--attack-config", default=None, help="JSON file with AttackConfig fields")
    p.add_argument("--seed", type=int, required=seed_required, help="run seed (recorded)")


def _add_predictor_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gallery", default=None, help="directory of <label>.ppm prototypes")
    g.add_argument("--predictor-cmd", default=None,
                   help="external classifier command; receives one image path, prints a label")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advraw", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"advraw {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out-dir", required=True, help="directory receiving every artifact")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write synthetic training RAWs or attack fixtures")
    p.add_argument("--kind", choices=["training", "fixtures"], default="training")
    p.add_argument("--n", type=int, default=10, help="number of images or fixtures")
    p.add_argument("--size", type=int, default=64, help="RAW side length")
    p.add_argument("--target-size", type=int, default=16, help="fixture target side length")
    p.add_argument("--seed", type=int, required=True)

    p = command("isp-run", cmd_isp_run, "render a RAW image to RGB")
    p.add_argument("--raw", required=True, help="input RAW (.pgm with optional .meta.json)")
    p.add_argument("--pipeline", default="bilinear",
                   help="'bilinear', 'bilateral', 'target' or a pipeline JSON file")

    p = command("scale", cmd_scale, "downscale a PPM or PGM image")
    p.add_argument("--image", required=True)
    p.add_argument("--algorithm", choices=[a.value for a in scaling.ScalingAlgorithm],
                   default="bilinear")
    p.add_argument("--size", type=_size, required=True, help="destination size HxW")

    p = command("attack-direct", cmd_attack_direct, "attack through a differentiable ISP")
    p.add_argument("--raw", required=True)
    p.add_argument("--target", required=True, help="target image (.ppm) at the output size")
    p.add_argument("--pipeline", default="bilinear", help="'bilinear', 'bilateral' or JSON file")
    _add_attack_flags(p)
    _add_predictor_flags(p)

    p = command("train-proxy", cmd_train_proxy, "train a proxy of the black-box ISP")
    p.add_argument("--raw-dir", required=True, help="directory of training .pgm RAWs")
    p.add_argument("--target-isp", default=None, help="target ISP JSON config (default built-in)")
    p.add_argument("--patch", type=int, default=None, help="tile RAWs into patches of this size")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--crop", type=int, default=32, help="training crop side, 0 for full images")
    p.add_argument("--lambda-ssim", type=float, default=0.25)
    p.add_argument("--lambda-perceptual", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)

    p = command("attack-proxy", cmd_attack_proxy,
                "attack with proxy gradients, then transfer through the black-box ISP")
    p.add_argument("--raw", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--checkpoint", required=True, help="proxy checkpoint from train-proxy")
    p.add_argument("--target-isp", default=None)
    _add_attack_flags(p)
    _add_predictor_flags(p)

    p = command("defend", cmd_defend, "filter an adversarial RAW and report the outcome")
    p.add_argument("--source-raw", required=True)
    p.add_argument("--adv-raw", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--filter", choices=[k.value for k in defense.FilterKind], default="median")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--pipeline", default="bilinear",
                   help="'bilinear', 'bilateral', 'target' or a pipeline JSON file")
    p.add_argument("--algorithm", choices=[a.value for a in scaling.ScalingAlgorithm],
                   default="bilinear")
    _add_predictor_flags(p)

    p = command("sweep-c", cmd_sweep_c, "run one attack per c value on a single instance")
    p.add_argument("--raw", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--pipeline", default="bilinear")
    p.add_argument("--c-values", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    _add_attack_flags(p)
    _add_predictor_flags(p)

    p = sub.add_parser("replay", help="re-run a recorded manifest into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=None)
    return parser


# ---------------------------------------------------------------- driver

PATH_ARGS = ("raw", "target", "pipeline", "raw_dir", "target_isp", "checkpoint", "source_raw",
             "adv_raw", "image", "gallery", "attack_config")


def _recorded_args(args) -> dict:
    """Arguments as replayable JSON; existing input paths become absolute."""
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir", "verbose")}
    for key in PATH_ARGS:
        value = doc.get(key)
        if isinstance(value, str) and Path(value).exists():
            doc[key] = str(Path(value).resolve())
    return doc


COMMANDS = {"synth": cmd_synth, "isp-run": cmd_isp_run, "scale": cmd_scale,
            "attack-direct": cmd_attack_direct, "train-proxy": cmd_train_proxy,
            "attack-proxy": cmd_attack_proxy, "defend": cmd_defend, "sweep-c": cmd_sweep_c}


def _replay_args(args) -> argparse.Namespace:
    doc = json.loads(_file(args.manifest, "manifest").read_text())
    recorded = doc.get("args") if isinstance(doc, dict) else None
    if not isinstance(recorded, dict) or recorded.get("command") not in COMMANDS:
        raise CliError(f"{args.manifest}: not a run manifest")
    recorded = dict(recorded)
    if isinstance(recorded.get("size"), list):
        recorded["size"] = tuple(recorded["size"])
    return argparse.Namespace(**recorded, func=COMMANDS[recorded["command"]],
                              out_dir=args.out_dir, verbose=args.verbose)


def run(args) -> Path:
    """Execute a parsed command; returns the output directory."""
    started = time.perf_counter()
    out = Path(args.out_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    try:
        resolved = args.func(args, stage)
        produced = sorted(p.name for p in stage.iterdir())
        for name in produced:
            os.replace(stage / name, out / name)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        if created and not any(out.iterdir()):
            out.rmdir()
        raise
    stage.rmdir()
    manifest = {
        "subcommand": args.command,
        "args": _recorded_args(args),
        "config": resolved,
        "seed": getattr(args, "seed", None),
        "outputs": produced,
        "out_dir": str(out),
        "version": __version__,
        "duration_s": time.perf_counter() - started,
    }
    tmp = out / (MANIFEST + ".tmp")
    _write_json(tmp, manifest)
    os.replace(tmp, out / MANIFEST)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "replay":
            args = _replay_args(args)
        run(args)
    except (CliError, ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"advraw: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
