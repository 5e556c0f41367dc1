"""Command-line entry point: ``rotdetr <command> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_model
from .config import ExperimentConfig, preset
from .encoder import Encoder, EncoderConfig, count_ops
from .errors import CheckpointError, ConfigurationError, FreezeViolation
from .finetune import FrozenTrunk, RefineHead, finetune, refine_scenes
from .geometry import rotated_iou
from .gradcheck import CHECKS, run_suite
from .metrics import evaluate
from .model import Detector
from .synth import make_dataset, save_scenes
from .train import predict, train


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else preset(args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "thresholds", None):
        cfg.eval.thresholds = [float(t) for t in args.thresholds.split(",")]
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_detector(path) -> tuple[Detector, ExperimentConfig]:
    ckpt = Checkpoint.load(path)
    cfg = ExperimentConfig.from_dict(ckpt.config)
    model = Detector(cfg.model, cfg.seed)
    model.load_state_dict(ckpt.tensors)
    return model, cfg


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def cmd_gradcheck(args) -> int:
    results = run_suite(args.op, seed=args.seed or 0, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  rel_err={r.rel_error:.3e}  {'ok' if r.passed else 'FAIL'}  ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_iou(args) -> int:
    print(repr(rotated_iou(args.box_a, args.box_b)))
    return 0


def cmd_bench(args) -> int:
    H, W, C, K = args.H, args.W, args.C, args.K
    ds, at = count_ops("dsconv", H, W, C, K), count_ops("attention", H, W, C, K)
    enc = {kind: Encoder(np.random.default_rng(0), EncoderConfig(kind=kind, num_layers=args.layers, channels=C,
                                                                 kernel=K), num_levels=1)
           for kind in ("dsconv", "attention")}
    print(f"H={H} W={W} C={C} K={K}")
    print(f"{'kind':<10} {'mults/layer':>14} {'params/layer':>13} {f'params x{args.layers}':>12}")
    for kind, oc in (("dsconv", ds), ("attention", at)):
        print(f"{kind:<10} {oc.multiply_adds:>14} {oc.parameters:>13} {enc[kind].num_parameters():>12}")
    print(f"attention/dsconv mults ratio: {at.multiply_adds / ds.multiply_adds:.3f}")
    return 0


def cmd_gen_scenes(args) -> int:
    cfg = _load_config(args)
    scenes = make_dataset(cfg)
    path = save_scenes(scenes, _out_dir(args), args.dump_images)
    print(f"wrote {path} ({len(scenes)} scenes)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    scenes = make_dataset(cfg)

    def log(step, loss):
        if args.log_every and (step % args.log_every == 0 or step == cfg.optimizer.steps - 1):
            print(f"step {step:5d}  loss {loss:.5f}", flush=True)

    result = train(cfg, scenes, callback=log)
    save_model(out / "checkpoint.bin", result.model, cfg.to_dict(), {"steps": cfg.optimizer.steps})
    print(f"wrote {out / 'checkpoint.bin'}")
    _write(out / "loss_curve.csv", "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.losses)))
    report = evaluate(predict(result.model, scenes), [s.gts for s in scenes], cfg.eval.thresholds,
                      cfg.eval.ap_iou, cfg.model.num_classes)
    _write(out / "metrics.csv", report.to_csv())
    print(f"trained {cfg.optimizer.steps} steps in {result.seconds:.1f}s; final loss {result.losses[-1] if result.losses else float('nan'):.5f}")
    return 0


def cmd_eval(args) -> int:
    model, ckpt_cfg = _load_detector(args.checkpoint)
    cfg = _load_config(args) if (args.config or args.preset_given) else ckpt_cfg
    if getattr(args, "thresholds", None):
        cfg.eval.thresholds = [float(t) for t in args.thresholds.split(",")]
    scenes = make_dataset(cfg)
    report = evaluate(predict(model, scenes), [s.gts for s in scenes], cfg.eval.thresholds,
                      cfg.eval.ap_iou, cfg.model.num_classes)
    _write(_out_dir(args) / "metrics.csv", report.to_csv())
    for name, key, value in report.rows():
        print(f"{name:<18} {key:<8} {value:.6f}")
    return 0


def cmd_finetune(args) -> int:
    model, ckpt_cfg = _load_detector(args.checkpoint)
    cfg = _load_config(args) if (args.config or args.preset_given) else ckpt_cfg
    out = _out_dir(args)
    scenes = make_dataset(cfg)
    gts = [s.gts for s in scenes]
    trunk = FrozenTrunk(model)
    before = evaluate([trunk.forward(s.image).final for s in scenes], gts, cfg.eval.thresholds,
                      cfg.eval.ap_iou, cfg.model.num_classes)
    head = RefineHead(np.random.default_rng(cfg.seed + 1), cfg.model.channels, cfg.model.num_classes, cfg.finetune)
    try:
        result = finetune(trunk, head, scenes, cfg)
    except FreezeViolation as exc:
        print(f"freeze contract violated: {exc}", file=sys.stderr)
        return 2
    after = evaluate(refine_scenes(trunk, head, scenes), gts, cfg.eval.thresholds, cfg.eval.ap_iou,
                     cfg.model.num_classes)
    save_model(out / "head.bin", head, cfg.to_dict(), {"trunk_checksum": result.checksum})
    _write(out / "metrics_proposals.csv", before.to_csv())
    _write(out / "metrics_refined.csv", after.to_csv())
    print(f"trunk checksum {result.checksum} (unchanged)")
    print(f"mean matched IoU {before.mean_iou:.4f} -> {after.mean_iou:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rotdetr", description="Oriented set-prediction detector toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True, config=True):
        if config:
            p.add_argument("--config", type=Path, help="experiment config JSON")
            p.add_argument("--preset", default=None, help="named config: default, overfit, full_scale")
        p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", default="runs/latest", help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, out=False, config=False)
    p.add_argument("--op", action="append", choices=sorted(CHECKS), help="run only this check (repeatable)")
    p.add_argument("--corrupt", choices=sorted(CHECKS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("iou", help="rotated IoU of two boxes (cx cy w h alpha)")
    p.add_argument("--box-a", type=float, nargs=5, required=True, metavar=("CX", "CY", "W", "H", "ALPHA"))
    p.add_argument("--box-b", type=float, nargs=5, required=True, metavar=("CX", "CY", "W", "H", "ALPHA"))
    p.set_defaults(func=cmd_iou)

    p = sub.add_parser("bench", help="operation counts of both encoder kinds")
    p.add_argument("--H", type=int, default=32)
    p.add_argument("--W", type=int, default=32)
    p.add_argument("--C", type=int, default=32)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--layers", type=int, default=6)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-scenes", help="write synthetic scene annotations")
    common(p)
    p.add_argument("--dump-images", action="store_true")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train a detector on synthetic scenes")
    common(p)
    p.add_argument("--thresholds", help="comma-separated IoU thresholds for recall")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("finetune", cmd_finetune, "train a refinement head on a frozen checkpoint")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--thresholds", help="comma-separated IoU thresholds for recall")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "preset"):
        args.preset_given = args.preset is not None
        if args.preset is None:
            args.preset = "default"
    try:
        return args.func(args)
    except (ConfigurationError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
