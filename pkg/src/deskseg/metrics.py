"""Instance segmentation evaluation (AP over mask-IoU thresholds) and
wall-clock benchmarking of the inference pipeline.

Predictions are matched greedily in descending score order to the
highest-IoU unmatched ground truth of the same class; the PR curve is pooled
over all scenes and integrated with the all-point (max-precision envelope)
interpolation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

AP_THRESHOLDS = tuple(np.arange(50, 100, 5) / 100.0)  # 0.50 ... 0.95


@dataclass
class MetricsReport:
    ap: float
    ap50: float
    ap25: float
    per_class_ap: dict
    prec50: float
    rec50: float
    runtime_median_s: float | None = None
    runtime_p90_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "ap": self.ap, "ap50": self.ap50, "ap25": self.ap25,
            "per_class_ap": {str(k): list(v) for k, v in self.per_class_ap.items()},
            "prec50": self.prec50, "rec50": self.rec50,
            "runtime_median_s": self.runtime_median_s,
            "runtime_p90_s": self.runtime_p90_s,
        }


def mask_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """IoU over point index sets given as same-length boolean masks."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise DataError(
            f"mask length mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    union = np.count_nonzero(pred_mask | gt_mask)
    if union == 0:
        return 0.0
    inter = np.count_nonzero(pred_mask & gt_mask)
    return inter / union


def _ap_from_flags(tp_flags: np.ndarray, n_gt: int) -> float:
    """Area under the pooled PR curve, all-point interpolation."""
    if n_gt == 0:
        return 0.0
    if tp_flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for r, p in zip(recall, precision):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def _greedy_tp_flags(order, scene_of, iou_rows, threshold):
    """TP flags for one class at one threshold under greedy score matching."""
    taken: dict = {}
    flags = np.zeros(len(order), dtype=bool)
    for rank, pred_pos in enumerate(order):
        scene = scene_of[pred_pos]
        used = taken.setdefault(scene, set())
        best_gt, best_iou = -1, 0.0
        for gt_local, iou in iou_rows[pred_pos]:
            if gt_local in used:
                continue
            # Highest IoU wins; iterating ascending gt index breaks exact ties
            # toward the lower index via the strict comparison.
            if iou >= threshold and iou > best_iou:
                best_gt, best_iou = gt_local, iou
        if best_gt >= 0:
            used.add(best_gt)
            flags[rank] = True
    return flags


def evaluate(predictions, ground_truth, iou_thresholds=AP_THRESHOLDS,
             num_classes: int | None = None, min_mask_size: int = 1) -> MetricsReport:
    """ScanNet-style evaluation.

    `predictions` is a per-scene list of InstanceMask; `ground_truth` a
    per-scene list of (class_id, point_index_array). AP averages the
    per-threshold AP over `iou_thresholds`, then over the classes present in
    the ground truth. Prec50/Rec50 are micro-averaged at threshold 0.5.
    """
    if len(predictions) != len(ground_truth):
        raise DataError("predictions and ground truth must cover the same scenes")
    gt_classes = sorted({int(c) for scene in ground_truth for c, _ in scene})
    if num_classes is None:
        num_classes = (max(gt_classes) + 1) if gt_classes else 0
    for scene in ground_truth:
        for c, _ in scene:
            if not (0 <= int(c) < num_classes):
                raise DataError(f"ground truth references unknown class {c}")
    for scene in predictions:
        for mask in scene:
            if not (0 <= int(mask.class_id) < num_classes):
                raise DataError(f"prediction references unknown class {mask.class_id}")

    # Per-scene IoUs between predictions and same-class ground truths,
    # computed once and reused across thresholds.
    per_class = {c: {"order_keys": [], "scene_of": [], "iou_rows": [], "n_gt": 0}
                 for c in range(num_classes)}
    total_gt = 0
    for scene_id, (preds, gts) in enumerate(zip(predictions, ground_truth)):
        n_points = preds[0].point_mask.shape[0] if preds else None
        gt_masks = []
        for c, idx in gts:
            idx = np.asarray(idx, dtype=np.int64)
            gt_masks.append((int(c), idx))
            per_class[int(c)]["n_gt"] += 1
            total_gt += 1
        for pred_idx, mask in enumerate(preds):
            if n_points is not None and mask.point_mask.shape[0] != n_points:
                raise DataError("prediction mask length differs within a scene")
            if int(np.count_nonzero(mask.point_mask)) < min_mask_size:
                continue
            c = int(mask.class_id)
            rows = []
            pred_count = int(np.count_nonzero(mask.point_mask))
            for gt_local, (gc, idx) in enumerate(gt_masks):
                if gc != c:
                    continue
                if idx.size and idx.max() >= mask.point_mask.shape[0]:
                    raise DataError("ground truth index exceeds scene point count")
                inter = int(np.count_nonzero(mask.point_mask[idx]))
                union = pred_count + idx.size - inter
                rows.append((gt_local, inter / union if union else 0.0))
            entry = per_class[c]
            entry["order_keys"].append((-mask.score, scene_id, pred_idx))
            entry["scene_of"].append(scene_id)
            entry["iou_rows"].append(rows)

    thresholds = tuple(float(t) for t in iou_thresholds)
    all_thresholds = sorted(set(thresholds) | {0.25, 0.5})
    per_class_curves = {}
    for c, entry in per_class.items():
        if entry["n_gt"] == 0:
            continue
        order = sorted(range(len(entry["order_keys"])),
                       key=lambda i: entry["order_keys"][i])
        aps = {}
        for t in all_thresholds:
            flags = _greedy_tp_flags(order, entry["scene_of"], entry["iou_rows"], t)
            aps[t] = (_ap_from_flags(flags, entry["n_gt"]), flags)
        per_class_curves[c] = aps

    def class_mean(metric):
        vals = [metric(c) for c in per_class_curves]
        return float(np.mean(vals)) if vals else 0.0

    ap = class_mean(lambda c: np.mean([per_class_curves[c][t][0] for t in thresholds]))
    ap50 = class_mean(lambda c: per_class_curves[c][0.5][0])
    ap25 = class_mean(lambda c: per_class_curves[c][0.25][0])
    per_class_ap = {
        c: (float(np.mean([per_class_curves[c][t][0] for t in thresholds])),
            per_class_curves[c][0.5][0], per_class_curves[c][0.25][0])
        for c in per_class_curves
    }

    # Micro precision/recall at IoU 0.5 using the same greedy matching.
    tp_total = sum(int(per_class_curves[c][0.5][1].sum()) for c in per_class_curves)
    n_preds_total = sum(
        1 for scene in predictions for m in scene
        if int(np.count_nonzero(m.point_mask)) >= min_mask_size)
    prec50 = tp_total / n_preds_total if n_preds_total else 0.0
    rec50 = tp_total / total_gt if total_gt else 0.0

    return MetricsReport(ap=ap, ap50=ap50, ap25=ap25, per_class_ap=per_class_ap,
                         prec50=float(prec50), rec50=float(rec50))


@dataclass
class RuntimeStats:
    median_s: float
    p90_s: float
    samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"median_s": self.median_s, "p90_s": self.p90_s,
                "samples": list(self.samples)}


def benchmark(pipeline, scenes, repeats: int = 3) -> RuntimeStats:
    """End-to-end per-scene inference timings.

    Each scene runs `repeats` times; the first (warm-up) run is discarded.
    `pipeline` is any callable taking a PointCloud.
    """
    if repeats < 3:
        raise DataError("benchmark needs repeats >= 3")
    samples = []
    for cloud in scenes:
        for r in range(repeats):
            start = time.perf_counter()
            pipeline(cloud)
            elapsed = time.perf_counter() - start
            if r > 0:
                samples.append(elapsed)
    return RuntimeStats(median_s=float(np.median(samples)),
                        p90_s=float(np.percentile(samples, 90)),
                        samples=samples)
