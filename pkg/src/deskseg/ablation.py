"""Ablation experiments: refiner depth sweep and proposal-count sweep.

The depth sweep retrains only the refiner at each requested level with the
detector frozen, isolating the refinement contribution. The proposal-count
sweep calibrates NMS settings until the detector emits roughly the requested
number of proposals per scene, then measures AP and runtime at each cap.
"""

from __future__ import annotations

import numpy as np
import torch

from .detector import decode_proposals
from .errors import ConfigError
from .metrics import benchmark
from .pipeline import DecodeSettings, Pipeline
from .refiner import RefinerConfig, TinyUNet
from .trainer import TrainConfig, evaluate_pipeline, fit
from .voxels import voxelize

NMS_GRID = (0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95)
CALIBRATION_THRESHOLD = 1e-4


def retrain_refiner(pipeline: Pipeline, levels: int, train_records: list,
                    cfg: TrainConfig, num_classes: int,
                    refiner_seed: int = 0) -> Pipeline:
    """Fresh refiner of the given depth trained against a frozen detector."""
    base_rc = pipeline.refiner_config
    rc = RefinerConfig(levels=levels, base_channels=base_rc.base_channels,
                       iou_match_threshold=base_rc.iou_match_threshold,
                       mask_threshold=base_rc.mask_threshold,
                       gt_label_rule=base_rc.gt_label_rule)
    if levels == 0:
        return pipeline.with_refiner(None, rc)
    torch.manual_seed(refiner_seed)
    refiner = TinyUNet(in_channels=pipeline.detector.decoder_width, config=rc,
                       dtype=pipeline.detector.dtype)
    swapped = pipeline.with_refiner(refiner, rc)
    fit(train_records, [], swapped, cfg, num_classes=num_classes,
        train_refiner_only=True)
    return swapped


def ablate_unet_levels(pipeline: Pipeline, train_records: list,
                       val_records: list, cfg: TrainConfig, num_classes: int,
                       levels=(0, 1, 2, 3, 4), progress=None) -> list:
    """Rows (level, ap, ap50, ap25) with the detector frozen throughout."""
    rows = []
    for level in levels:
        if not 0 <= int(level) <= 4:
            raise ConfigError(f"unet level {level} outside 0..4")
        variant = retrain_refiner(pipeline, int(level), train_records, cfg,
                                  num_classes)
        report = evaluate_pipeline(variant, val_records, num_classes)
        rows.append((int(level), report.ap, report.ap50, report.ap25))
        if progress:
            progress(rows[-1])
    return rows


def mean_proposal_count(pipeline: Pipeline, scenes: list,
                        decode: DecodeSettings) -> float:
    probe = pipeline.with_decode(
        score_threshold=decode.score_threshold, nms_iou=decode.nms_iou,
        max_proposals=decode.max_proposals, pre_nms_limit=decode.pre_nms_limit)
    counts = []
    for rec in scenes:
        grid = voxelize(rec.cloud, probe.voxel_size)
        with torch.no_grad():
            _bb, head_outs = probe.detector.forward_grid(grid)
            props = decode_proposals(
                head_outs, probe.voxel_size,
                score_threshold=decode.score_threshold, nms_iou=decode.nms_iou,
                max_proposals=decode.max_proposals,
                pre_nms_limit=decode.pre_nms_limit)
        counts.append(len(props))
    return float(np.mean(counts))


def calibrate_decode_for_count(pipeline: Pipeline, scenes: list,
                               target: int) -> DecodeSettings:
    """NMS settings whose proposal stream approximates the requested count.

    The score threshold drops to a floor so weak candidates survive, and the
    NMS IoU loosens along a fixed ladder until enough survivors remain; the
    per-scene cap then trims the stream to the target.
    """
    if target < 1:
        raise ConfigError("proposal target must be at least 1")
    probe_scenes = scenes[:min(6, len(scenes))]
    chosen = NMS_GRID[-1]
    for nms_iou in NMS_GRID:
        decode = DecodeSettings(score_threshold=CALIBRATION_THRESHOLD,
                                nms_iou=nms_iou, max_proposals=max(target * 4, 16),
                                pre_nms_limit=4096)
        count = mean_proposal_count(pipeline, probe_scenes, decode)
        if count >= 0.9 * target:
            chosen = nms_iou
            break
    return DecodeSettings(score_threshold=CALIBRATION_THRESHOLD, nms_iou=chosen,
                          max_proposals=int(target), pre_nms_limit=4096)


def ablate_proposal_caps(pipeline: Pipeline, val_records: list,
                         num_classes: int, targets=(20, 60, 100, 140),
                         bench_scenes: int = 12, repeats: int = 4,
                         progress=None) -> list:
    """Rows (target, ap, runtime_median_s, mean_count) for one trained model."""
    rows = []
    bench_set = [rec.cloud for rec in val_records[:bench_scenes]]
    for target in targets:
        decode = calibrate_decode_for_count(pipeline, val_records, int(target))
        variant = pipeline.with_decode(
            score_threshold=decode.score_threshold, nms_iou=decode.nms_iou,
            max_proposals=decode.max_proposals, pre_nms_limit=decode.pre_nms_limit)
        report = evaluate_pipeline(variant, val_records, num_classes)
        stats = benchmark(variant, bench_set, repeats=repeats)
        count = mean_proposal_count(variant, val_records[:bench_scenes], decode)
        rows.append((int(target), report.ap, stats.median_s, count))
        if progress:
            progress(rows[-1])
    return rows
