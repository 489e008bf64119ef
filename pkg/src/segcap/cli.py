"""Command-line interface: gen / train / eval / ablate / gradcheck.

Every command is deterministic given its config and seed. Exit codes:
0 success, 2 validation failure (bad inputs, malformed data, incompatible
checkpoint), 3 numeric failure (non-finite loss, failed gradient check).
The SEGCAP_THREADS environment variable caps worker fan-out; the current
implementation is single-process, so any positive value is accepted and the
effective worker count is min(SEGCAP_THREADS, 1).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import gradchecks
from .autodiff import NonFiniteError
from .data import GenConfig, generate_dataset, load_video, serialize_seg_caption
from .graphs import GraphError
from .losses import LossInputError
from .metrics import caption_overlap, class_ap, instance_map, jf_mean, write_metrics
from .model import (Model, ModelConfig, NumericFailure, load_checkpoint,
                    save_checkpoint, train)
from .tensorio import FormatError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

VARIANTS = {
    "full": (True, True),
    "spa-only": (True, False),
    "tem-only": (False, True),
    "neither": (False, False),
}

LAMBDA_SWEEP = (0.0, 1.0, 2.0, 5.0, 10.0)


def worker_cap():
    """Effective worker count from SEGCAP_THREADS (single-process: <= 1)."""
    raw = os.environ.get("SEGCAP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SEGCAP_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError("SEGCAP_THREADS must be >= 1")
    return min(n, 1)


def _load_config(path):
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("config file must contain a JSON object")
    return doc


def _model_config(doc, args):
    cfg = ModelConfig.from_dict(doc)
    if getattr(args, "lam", None) is not None:
        cfg = replace(cfg, lam=args.lam)
    if getattr(args, "include_positive_in_denominator", False):
        cfg = replace(cfg, include_positive_in_denominator=True)
    variant = getattr(args, "variant", None)
    if variant is not None:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        spatial, temporal = VARIANTS[variant]
        cfg = replace(cfg, spatial_on=spatial, temporal_on=temporal)
    if cfg.lam < 0:
        raise ValueError("lambda must be >= 0")
    return cfg


def load_split(data_dir, split):
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    entries = [e for e in manifest["entries"] if e["split"] == split]
    if not entries:
        raise ValueError(f"split {split!r} is empty in {manifest_path}")
    return [load_video(data_dir / e["dir"]) for e in entries]


def evaluate_model(model, videos):
    """Metric dict over a list of annotated videos."""
    records = []
    caption_scores = []
    gt_vocab_tokens = []
    for video in videos:
        record, prediction = model.eval_record(video)
        records.append(record)
        pred_tokens = model.vocab.decode(prediction.caption)
        gt_tokens = serialize_seg_caption(video.caption).split()
        caption_scores.append(caption_overlap(pred_tokens, gt_tokens))
        gt_vocab_tokens.append(gt_tokens)
    jf, j, f = jf_mean(records)
    ap, ap50, ap75 = class_ap(records)
    return {
        "jf": jf,
        "j": j,
        "f": f,
        "ap": ap,
        "ap50": ap50,
        "ap75": ap75,
        "instance_map": instance_map(records),
        "caption_f1": float(np.mean(caption_scores)),
    }


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(
            f"{out} is non-empty; pass --force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)
    doc = _load_config(args.config)
    gen_fields = {k: v for k, v in doc.items()
                  if k in GenConfig.__dataclass_fields__}
    cfg = GenConfig(**gen_fields)
    train_count = args.train_count or int(doc.get("train_count", 20))
    eval_count = args.eval_count or int(doc.get("eval_count", 5))
    entries = generate_dataset(out, train_count, cfg,
                               master_seed=args.seed, split="train")
    entries += generate_dataset(out, eval_count, cfg,
                                master_seed=args.seed + 1, split="eval")
    manifest = {
        "seed": args.seed,
        "gen_config": asdict(cfg),
        "entries": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(entries)} videos to {out}")
    return EXIT_OK


def cmd_train(args):
    doc = _load_config(args.config)
    cfg = _model_config(doc, args)
    videos = load_split(args.data, "train")
    if args.resume:
        model = load_checkpoint(args.resume, seed=args.seed)
        if asdict(model.config) != asdict(cfg) and args.config is not None:
            raise ValueError("resume checkpoint config conflicts with --config")
    else:
        model = Model(cfg, seed=args.seed)
    steps = args.steps if args.steps is not None else int(doc.get("steps", 100))
    lr = args.lr if args.lr is not None else float(doc.get("lr", 5e-4))
    mask_frames = int(doc.get("mask_frames_per_step", 2))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = train(model, videos, steps, lr=lr, seed=args.seed,
                 log_path=out / "train_log.csv",
                 mask_frames_per_step=mask_frames)
    save_checkpoint(out, model)
    print(f"trained {steps} steps; final total loss {rows[-1]['total']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint, seed=args.seed)
    videos = load_split(args.data, args.split)
    metrics = evaluate_model(model, videos)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, json_path=out / "metrics.json",
                  csv_path=out / "metrics.csv",
                  split=args.split, seed=args.seed)
    for key, value in metrics.items():
        print(f"{key}: {value:.4f}")
    return EXIT_OK


def _ablate_run(doc, videos_train, videos_eval, spatial, temporal, lam,
                seed, steps, lr, mask_frames):
    cfg = ModelConfig.from_dict(doc)
    cfg = replace(cfg, spatial_on=spatial, temporal_on=temporal, lam=lam)
    model = Model(cfg, seed=seed)
    train(model, videos_train, steps, lr=lr, seed=seed,
          mask_frames_per_step=mask_frames)
    return evaluate_model(model, videos_eval)


def cmd_ablate(args):
    worker_cap()
    doc = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    steps = args.steps if args.steps is not None else int(doc.get("steps", 100))
    lr = args.lr if args.lr is not None else float(doc.get("lr", 5e-4))
    mask_frames = int(doc.get("mask_frames_per_step", 2))
    videos_train = load_split(args.data, "train")
    videos_eval = load_split(args.data, args.split)

    runs = []
    for name, (spatial, temporal) in VARIANTS.items():
        runs.append((f"variant:{name}", spatial, temporal, 2.0))
    for lam in LAMBDA_SWEEP:
        runs.append((f"lambda:{lam:g}", True, True, lam))

    metric_keys = ["jf", "j", "f", "ap", "ap50", "ap75",
                   "instance_map", "caption_f1"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, spatial, temporal, lam in runs:
        for seed in seeds:
            metrics = _ablate_run(doc, videos_train, videos_eval, spatial,
                                  temporal, lam, seed, steps, lr, mask_frames)
            row = {
                "run": label,
                "spatial": int(spatial),
                "temporal": int(temporal),
                "lam": lam,
                "seed": seed,
            }
            row.update({k: metrics[k] for k in metric_keys})
            rows.append(row)
            print(f"{label} seed={seed} jf={metrics['jf']:.4f} "
                  f"instance_map={metrics['instance_map']:.4f}")
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["run", "spatial", "temporal", "lam", "seed"] + metric_keys,
        )
        writer.writeheader()
        writer.writerows(rows)

    # lambda sweep table: one row per AP-style metric, one column per lambda,
    # averaged over seeds
    sweep_path = out.with_name(out.stem + "_lambda" + out.suffix)
    sweep_metrics = ["ap", "ap50", "ap75", "instance_map"]
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + [f"lam={lam:g}" for lam in LAMBDA_SWEEP])
        for metric in sweep_metrics:
            values = []
            for lam in LAMBDA_SWEEP:
                vals = [r[metric] for r in rows if r["run"] == f"lambda:{lam:g}"]
                values.append(float(np.mean(vals)))
            writer.writerow([metric] + [f"{v:.4f}" for v in values])
    print(f"wrote {out} and {sweep_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    start = time.time()
    results = gradchecks.run_registered()
    failed = False
    for name, err, passed in results:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<24s} rel_err={err:.3e}  {status}")
        failed |= not passed
    if args.full_model:
        err = gradchecks.model_parameter_check()
        passed = err <= gradchecks.DEFAULT_TOL
        print(f"{'model_parameters':<24s} rel_err={err:.3e}  "
              f"{'PASS' if passed else 'FAIL'}")
        failed |= not passed
    print(f"{len(results)} checks in {time.time() - start:.1f}s")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="segcap",
        description="Prompt-guided video segmentation and captioning on a "
                    "synthetic moving-shapes benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.add_argument("--train-count", type=int)
    p.add_argument("--eval-count", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--include-positive-in-denominator", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component/lambda ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--split", default="eval")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--full-model", action="store_true",
                   help="also probe sampled coordinates of all model "
                        "parameters through the total objective")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericFailure, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, GraphError, FormatError,
            LossInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
