"""Command-line entry point: synth / train / eval / ablate / bench.

Every command resolves a flat config (file plus flag overrides), prints its
hash, and writes all outputs under the directory given by --out. Report
paths emit JSON/CSV plus rendered PNG figures.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import ablation
from .config import RunConfig, load_config
from .data import load_dataset, read_manifest, write_dataset
from .errors import ConfigError, DataError, NumericError
from .figures import (ensure_dir, save_ablation_figure, save_eval_figure,
                      save_loss_curves, save_runtime_figure)
from .metrics import benchmark, evaluate
from .pipeline import Pipeline
from .refiner import InstanceMask, write_predictions
from .scene import gt_instances_from_cloud
from .trainer import fit, load_checkpoint, pipeline_from_checkpoint


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True):
    parser.add_argument("--config", default=None, help="config file path")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")
    parser.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")


def _resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, overrides)
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    print(f"config_hash {cfg.config_hash()}")
    return cfg


def _build_pipeline(cfg: RunConfig) -> Pipeline:
    return Pipeline.build(num_classes=cfg.num_classes, voxel_size=cfg.voxel_size,
                          widths=cfg.backbone_widths,
                          decoder_width=cfg.decoder_width,
                          head_levels=cfg.head_levels,
                          refiner_config=cfg.refiner_config(),
                          decode=cfg.decode_settings(), seed=cfg.seed)


def _load_pipeline(cfg: RunConfig, checkpoint_path) -> Pipeline:
    payload = load_checkpoint(checkpoint_path)
    if payload["config_hash"] and payload["config_hash"] != cfg.config_hash():
        print(f"warning: checkpoint config hash {payload['config_hash']} "
              f"differs from current {cfg.config_hash()}", file=sys.stderr)
    return pipeline_from_checkpoint(payload)


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    n_train = args.n_train if args.n_train is not None else cfg.train_scenes
    n_val = args.n_val if args.n_val is not None else cfg.val_scenes
    manifest = write_dataset(args.out, cfg, n_train, n_val, force=args.force)
    print(f"wrote {n_train} train + {n_val} val scenes to {args.out} "
          f"({len(manifest['hashes'])} files)")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = ensure_dir(args.out)
    train_records = load_dataset(args.data, "train")
    val_records = load_dataset(args.data, "val")
    manifest = read_manifest(args.data)
    if manifest["num_classes"] != cfg.num_classes:
        raise DataError(
            f"dataset has {manifest['num_classes']} classes, config expects "
            f"{cfg.num_classes}")
    pipeline = _build_pipeline(cfg)
    log_path = out / "log.jsonl"
    if log_path.exists():
        log_path.unlink()
    def progress(rec):
        msg = (f"epoch {rec['epoch']:3d} total {rec['total']:.4f}")
        if rec["val_AP"] is not None:
            msg += f" val_AP {rec['val_AP']:.3f} val_AP50 {rec['val_AP50']:.3f}"
        print(msg)
    result = fit(train_records, val_records, pipeline, cfg.train_config(),
                 num_classes=cfg.num_classes, log_path=log_path,
                 ckpt_dir=out, config_items=cfg.items(),
                 config_hash=cfg.config_hash(), progress=progress)
    (out / "config.txt").write_text(cfg.dump() + "\n")
    figures_dir = ensure_dir(out / "figures")
    save_loss_curves(result.log, figures_dir / "loss_curves.png")
    print(f"best val AP {result.best_val_ap:.4f} (epoch {result.best_epoch}); "
          f"checkpoints in {out}")
    return 0


def _report_csv_row(path, header: list, row: list):
    new_file = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(header)
        writer.writerow(row)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = ensure_dir(args.out)
    records = load_dataset(args.data, args.split)
    gts = [gt_instances_from_cloud(rec.cloud) for rec in records]
    if args.oracle:
        preds = []
        for rec, gt in zip(records, gts):
            scene_masks = []
            for class_id, idx in gt:
                mask = np.zeros(len(rec.cloud), dtype=bool)
                mask[idx] = True
                scene_masks.append(InstanceMask(point_mask=mask,
                                                class_id=class_id, score=1.0))
            preds.append(scene_masks)
    else:
        if not args.checkpoint:
            raise ConfigError("eval requires --checkpoint (or --oracle)")
        pipeline = _load_pipeline(cfg, args.checkpoint)
        preds = [pipeline.infer_masks(rec.cloud) for rec in records]
    preds_dir = ensure_dir(out / "preds")
    for rec, masks in zip(records, preds):
        write_predictions(masks, preds_dir / f"{rec.scene_id}.pred")
    report = evaluate(preds, gts, num_classes=cfg.num_classes,
                      min_mask_size=cfg.min_mask_size)
    doc = report.to_dict()
    doc["split"] = args.split
    doc["config_hash"] = cfg.config_hash()
    print(json.dumps(doc, indent=2, sort_keys=True))
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _report_csv_row(out / "report.csv",
                    ["config_hash", "split", "ap", "ap50", "ap25",
                     "prec50", "rec50"],
                    [cfg.config_hash(), args.split, report.ap, report.ap50,
                     report.ap25, report.prec50, report.rec50])
    save_eval_figure(report, list(cfg.shape_catalog),
                     ensure_dir(out / "figures") / "per_class_ap.png")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = ensure_dir(args.out)
    train_records = load_dataset(args.data, "train")
    val_records = load_dataset(args.data, "val")
    pipeline = _load_pipeline(cfg, args.checkpoint)
    values = [int(v) for v in args.values.split(",")] if args.values else None
    csv_path = out / f"ablation_{args.axis}.csv"
    if args.axis == "unet_levels":
        levels = values if values is not None else [0, 1, 2, 3, 4]
        rows = ablation.ablate_unet_levels(
            pipeline, train_records, val_records, cfg.refiner_train_config(),
            cfg.num_classes, levels=levels,
            progress=lambda r: print(f"levels {r[0]}: AP {r[1]:.4f}"))
        for row in rows:
            _report_csv_row(csv_path, ["unet_levels", "ap", "ap50", "ap25"], row)
        save_ablation_figure("unet_levels", rows,
                             ensure_dir(out / "figures") / "ablation_unet_levels.png")
    elif args.axis == "proposal_cap":
        targets = values if values is not None else [20, 60, 100, 140]
        rows = ablation.ablate_proposal_caps(
            pipeline, val_records, cfg.num_classes, targets=targets,
            repeats=max(cfg.bench_repeats, 3),
            progress=lambda r: print(
                f"cap {r[0]}: AP {r[1]:.4f} runtime {r[2] * 1e3:.1f} ms "
                f"(mean count {r[3]:.1f})"))
        for row in rows:
            _report_csv_row(csv_path,
                            ["proposal_cap", "ap", "runtime_median_s",
                             "mean_count"], row)
        save_ablation_figure("proposal_cap", rows,
                             ensure_dir(out / "figures") / "ablation_proposal_cap.png")
    else:
        raise ConfigError(f"unknown ablation axis {args.axis!r}")
    print(f"ablation rows appended to {csv_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out = ensure_dir(args.out)
    records = load_dataset(args.data, args.split)
    pipeline = _load_pipeline(cfg, args.checkpoint)
    repeats = args.repeats if args.repeats is not None else cfg.bench_repeats
    stats = benchmark(pipeline, [rec.cloud for rec in records], repeats=repeats)
    doc = stats.to_dict()
    doc["config_hash"] = cfg.config_hash()
    doc["scenes"] = len(records)
    doc["repeats"] = repeats
    print(json.dumps({k: doc[k] for k in ("median_s", "p90_s", "scenes",
                                          "repeats", "config_hash")},
                     indent=2, sort_keys=True))
    with open(out / "runtime.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_runtime_figure(stats, ensure_dir(out / "figures") / "runtime.png")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskseg",
        description="Desk-scale top-down 3D instance segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-val", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the full pipeline")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--oracle", action="store_true",
                   help="score ground truth fed back as predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", default=None,
                   help="comma-separated axis values")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="benchmark inference runtime")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--repeats", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
