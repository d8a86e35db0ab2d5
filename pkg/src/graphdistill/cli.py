"""Command-line surface: gen, train-teacher, distill, eval, gradcheck, vis."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from .affinity import default_offsets, make_offsets
from .metrics import compute_metric_report, mean_report, pca_rgb, report_to_text, write_ppm
from .network import load_checkpoint, save_checkpoint
from .pipeline import evaluate_model, predict_segmentation
from .synthetic import SyntheticSpec, load_dataset, save_dataset
from .tensors import load_label_mask
from .training import (
    GRAD_CHECK_SELECTORS,
    TrainerConfig,
    distill_student,
    grad_check,
    train_teacher,
)


def parse_offsets(text: str):
    """Parse 'dr:dc,dr:dc,...' into an offset tuple."""
    pairs = []
    for token in text.split(","):
        dr, dc = token.strip().split(":")
        pairs.append((int(dr), int(dc)))
    return make_offsets(pairs)


def _add_trainer_flags(sub, with_lambdas: bool):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--iters", type=int, default=2000)
    sub.add_argument("--batch", type=int, default=2)
    sub.add_argument("--embed-dim", type=int, default=8)
    sub.add_argument("--offsets", type=parse_offsets, default=default_offsets())
    if with_lambdas:
        for k, default in zip(range(1, 6), (0.1, 0.1, 10.0, 1.0, 1.0)):
            sub.add_argument(f"--lambda{k}", type=float, default=default)
        sub.add_argument("--bank-k", type=int, default=32)
        sub.add_argument("--bank-l", type=int, default=12)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphdistill",
        description="Pixel-embedding instance segmentation with graph relation distillation",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate a synthetic Voronoi dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)

    teach = subs.add_parser("train-teacher", help="train the wide network on affinity labels")
    teach.add_argument("--data", required=True)
    teach.add_argument("--out", required=True)
    _add_trainer_flags(teach, with_lambdas=False)

    dist = subs.add_parser("distill", help="distill a narrow student from a teacher checkpoint")
    dist.add_argument("--data", required=True)
    dist.add_argument("--teacher", required=True)
    dist.add_argument("--out", required=True)
    _add_trainer_flags(dist, with_lambdas=True)

    ev = subs.add_parser("eval", help="evaluate a checkpoint or prediction directory")
    ev.add_argument("--data", required=True)
    group = ev.add_mutually_exclusive_group(required=True)
    group.add_argument("--student", help="student checkpoint path")
    group.add_argument("--teacher", help="teacher checkpoint path")
    group.add_argument("--pred", help="directory of pred_%%04d.grdt label masks")
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--offsets", type=parse_offsets, default=default_offsets())
    ev.add_argument("--report", choices=("text", "structured"), default="text")
    ev.add_argument("--out", help="write the report here instead of stdout")

    gc = subs.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    gc.add_argument("--seed", type=int, default=0)

    vis = subs.add_parser("vis", help="write PCA embedding visualizations as PPM images")
    vis.add_argument("--data", required=True)
    group = vis.add_mutually_exclusive_group(required=True)
    group.add_argument("--student")
    group.add_argument("--teacher")
    vis.add_argument("--out", required=True)
    vis.add_argument("--offsets", type=parse_offsets, default=default_offsets())

    return parser


def _trainer_config(args, teacher: bool) -> TrainerConfig:
    cfg = TrainerConfig(
        batch_size=args.batch,
        iterations=args.iters,
        offsets=args.offsets,
        embed_dim=args.embed_dim,
        seed=args.seed,
    )
    if not teacher:
        cfg.lambda1, cfg.lambda2, cfg.lambda3 = args.lambda1, args.lambda2, args.lambda3
        cfg.lambda4, cfg.lambda5 = args.lambda4, args.lambda5
        cfg.bank_capacity, cfg.bank_samples = args.bank_k, args.bank_l
    return cfg


def _write_config_sidecar(checkpoint_path, cfg: TrainerConfig) -> None:
    with open(str(checkpoint_path) + ".cfg.txt", "w") as f:
        for cfg_field in fields(cfg):
            f.write(f"{cfg_field.name}: {getattr(cfg, cfg_field.name)}\n")


def _cmd_gen(args) -> int:
    spec = SyntheticSpec(seed=args.seed)
    save_dataset(args.out, spec)
    print(f"wrote {spec.train_count} train / {spec.test_count} test samples to {args.out}")
    return 0


def _cmd_train_teacher(args) -> int:
    cfg = _trainer_config(args, teacher=True)
    dataset = load_dataset(args.data, "train")
    params, reports = train_teacher(dataset, cfg)
    save_checkpoint(args.out, params)
    _write_config_sidecar(args.out, cfg)
    print(f"teacher trained: aff {reports[0].aff:.6f} -> {reports[-1].aff:.6f}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _trainer_config(args, teacher=False)
    dataset = load_dataset(args.data, "train")
    teacher = load_checkpoint(args.teacher)
    student, reports = distill_student(teacher, dataset, cfg)
    save_checkpoint(args.out, student)
    _write_config_sidecar(args.out, cfg)
    print(f"student distilled: total {reports[0].total:.6f} -> {reports[-1].total:.6f}")
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data, "test")
    if args.pred:
        reports = []
        for i, (_, mask) in enumerate(dataset):
            pred = load_label_mask(os.path.join(args.pred, f"pred_{i:04d}.grdt"))
            reports.append(compute_metric_report(pred, mask))
        report = mean_report(reports)
    else:
        params = load_checkpoint(args.student or args.teacher)
        report = evaluate_model(params, dataset, args.offsets, args.threshold)
    if args.report == "structured":
        text = json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n"
    else:
        text = report_to_text(report)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for selector in GRAD_CHECK_SELECTORS:
        err = grad_check(selector, seed=args.seed)
        worst = max(worst, err)
        print(f"{selector}: {err:.3e}")
    print(f"max: {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def _cmd_vis(args) -> int:
    dataset = load_dataset(args.data, "test")
    params = load_checkpoint(args.student or args.teacher)
    os.makedirs(args.out, exist_ok=True)
    for i, (image, _) in enumerate(dataset):
        _, emap = predict_segmentation(params, image, args.offsets)
        write_ppm(os.path.join(args.out, f"emb_{i:04d}.ppm"), pca_rgb(emap))
    print(f"wrote {len(dataset)} PPM images to {args.out}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "vis": _cmd_vis,
}


def main(argv=None) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
