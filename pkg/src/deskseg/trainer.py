"""Joint end-to-end training of the detector and refiner.

The total loss is the sum of the two detection losses and the refinement
loss, accumulated in that fixed order every step. Refinement consumes the
detector's current decoded proposals; during an initial warm-up fraction of
the schedule, ground-truth boxes are additionally injected as proposals so
the refiner sees usable regions before the detector converges.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .detector import (DetectionTargets, Proposal, assign_targets,
                       decode_proposals, detection_loss)
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .metrics import evaluate
from .pipeline import DecodeSettings, Pipeline
from .refiner import (RefinerConfig, gt_voxel_labels, match_for_training,
                      refine_logits_batch, seg_loss)
from .scene import PointCloud, gt_instances_from_cloud
from .sparse import stack_topologies
from .voxels import RoI, extract_roi, voxelize
from .geometry import Box3D


@dataclass
class LossBreakdown:
    l_cls: float
    l_reg: float
    l_seg: float
    total: float

    @staticmethod
    def from_parts(l_cls: float, l_reg: float, l_seg: float) -> "LossBreakdown":
        # Fixed accumulation order; total must reproduce bit-for-bit.
        return LossBreakdown(l_cls=l_cls, l_reg=l_reg, l_seg=l_seg,
                             total=l_cls + l_reg + l_seg)


@dataclass
class TrainConfig:
    epochs: int = 33
    batch_size: int = 6
    lr: float = 1e-3
    lr_drop_fracs: tuple = (280 / 330, 320 / 330)
    lr_drop_epochs: tuple | None = None  # explicit override of the fractions
    lr_drop_factor: float = 0.1
    seed: int = 0
    weight_decay: float = 1e-4
    clip_grad_norm: float = 10.0
    warmup_gt: bool = True
    warmup_frac: float = 0.1
    augment: bool = True
    val_interval: int = 8

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        drops = self.resolved_drops()
        if any(d >= self.epochs for d in drops):
            raise ConfigError("lr drop epochs must be smaller than epochs")

    def resolved_drops(self) -> list:
        if self.lr_drop_epochs is not None:
            drops = [int(d) for d in self.lr_drop_epochs]
            if drops != sorted(set(drops)):
                raise ConfigError("lr_drop_epochs must be strictly increasing")
            return drops
        drops = []
        for frac in self.lr_drop_fracs:
            d = int(np.floor(self.epochs * frac))
            if 0 < d < self.epochs and d not in drops:
                drops.append(d)
        return drops

    def lr_at_epoch(self, epoch: int) -> float:
        drops = self.resolved_drops()
        n = sum(1 for d in drops if epoch > d)
        return self.lr * (self.lr_drop_factor ** n)


@dataclass
class SceneRecord:
    cloud: PointCloud
    gt_boxes: list  # list of (Box3D, class_id)
    scene_id: str = ""


def augment_scene(record: SceneRecord, rng: np.random.Generator) -> SceneRecord:
    """Random z-rotation plus per-axis xy flips about the cloud's footprint
    center; ground-truth boxes are re-fit to the transformed instance points."""
    pts = record.cloud.points.copy()
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    cx, cy = (lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0
    if rng.integers(0, 2):
        pts[:, 0] = 2 * cx - pts[:, 0]
    if rng.integers(0, 2):
        pts[:, 1] = 2 * cy - pts[:, 1]
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    x = pts[:, 0] - cx
    y = pts[:, 1] - cy
    pts[:, 0] = cx + c * x - s * y
    pts[:, 1] = cy + s * x + c * y
    cloud = PointCloud(points=pts, semantic_ids=record.cloud.semantic_ids.copy(),
                       instance_ids=record.cloud.instance_ids.copy())
    gt = []
    for k, (_box, class_id) in enumerate(record.gt_boxes):
        idx = cloud.instance_indices(k)
        sub = pts[idx]
        gt.append((Box3D.from_bounds(sub.min(axis=0), sub.max(axis=0)), class_id))
    return SceneRecord(cloud=cloud, gt_boxes=gt, scene_id=record.scene_id)


def _scene_row_slices(coords: np.ndarray, num_scenes: int) -> list:
    """Contiguous row ranges per batch id in a (M, 4) sorted coord array."""
    bounds = np.searchsorted(coords[:, 0], np.arange(num_scenes + 1))
    return [slice(int(bounds[b]), int(bounds[b + 1])) for b in range(num_scenes)]


def compute_losses(batch: list, pipeline: Pipeline, warmup: bool = False):
    """Differentiable (l_cls, l_reg, l_seg) tensors for a batch of scenes.

    Pure given parameters; train_step wraps this with the optimizer update.
    """
    if not batch:
        raise DataError("training requires a non-empty batch")
    vs = pipeline.voxel_size
    dtype = pipeline.detector.dtype

    grids = [voxelize(rec.cloud, vs) for rec in batch]
    topo, slices = stack_topologies([g.coords for g in grids])
    feats = torch.cat([torch.as_tensor(g.features, dtype=dtype) for g in grids])
    bb = pipeline.detector.backbone(topo, feats)
    head_outs = pipeline.detector.heads(bb)

    # Detection targets, assigned per scene then concatenated in batch order
    # (batched rows are sorted by batch id, so blocks line up).
    gt_flat = []
    head_slices = [_scene_row_slices(h.coords, len(batch)) for h in head_outs]
    per_scene_targets = []
    for b, rec in enumerate(batch):
        occ = [(h.stride, h.coords[head_slices[i][b]][:, 1:])
               for i, h in enumerate(head_outs)]
        tgt = assign_targets(rec.gt_boxes, occ, vs)
        base = len(gt_flat)
        for lvl in range(len(head_outs)):
            shift = tgt.gt_index[lvl] >= 0
            tgt.gt_index[lvl][shift] += base
        gt_flat.extend([box for box, _ in rec.gt_boxes])
        per_scene_targets.append(tgt)
    merged = DetectionTargets(
        labels=[np.concatenate([t.labels[l] for t in per_scene_targets])
                for l in range(len(head_outs))],
        reg=[np.concatenate([t.reg[l] for t in per_scene_targets])
             for l in range(len(head_outs))],
        gt_index=[np.concatenate([t.gt_index[l] for t in per_scene_targets])
                  for l in range(len(head_outs))])

    l_cls_t, l_reg_t = detection_loss(head_outs, merged, gt_flat, vs)

    # Refinement on matched RoIs of the current proposals (plus injected
    # ground-truth boxes during warm-up). Level-0 refiners have no
    # parameters, so their segmentation loss is identically zero.
    rois, labels = [], []
    roi_feats = bb.roi_features.features
    if pipeline.refiner is not None:
        for b, rec in enumerate(batch):
            proposals = decode_proposals(
                head_outs, vs, batch=b,
                score_threshold=pipeline.decode.score_threshold,
                nms_iou=pipeline.decode.nms_iou,
                max_proposals=pipeline.decode.max_proposals,
                pre_nms_limit=pipeline.decode.pre_nms_limit)
            if warmup:
                proposals = proposals + [Proposal(box=box, class_id=cls, score=1.0)
                                         for box, cls in rec.gt_boxes]
            match = match_for_training(rec.gt_boxes, proposals,
                                       pipeline.refiner_config.iou_match_threshold)
            scene_feats = roi_feats[slices[b]]
            for gi, pi, _iou in match.pairs:
                sel = extract_roi(grids[b], proposals[pi])
                if sel.num_voxels == 0:
                    continue
                roi = RoI(proposal=proposals[pi], voxel_indices=sel.voxel_indices,
                          coords=sel.coords,
                          features=scene_feats[torch.as_tensor(sel.voxel_indices)])
                rois.append(roi)
                labels.append(gt_voxel_labels(grids[b], rec.cloud.instance_ids,
                                              roi, gi,
                                              rule=pipeline.refiner_config.gt_label_rule))
    if rois:
        logit_list = refine_logits_batch(pipeline.refiner, rois, vs)
        l_seg_t = seg_loss(logit_list, labels)
    else:
        l_seg_t = torch.zeros((), dtype=dtype)
    return l_cls_t, l_reg_t, l_seg_t


def train_step(batch: list, pipeline: Pipeline, optimizer, cfg: TrainConfig,
               warmup: bool = False) -> LossBreakdown:
    """One gradient step on the summed loss over a batch of scene records."""
    pipeline.detector.train()
    if pipeline.refiner is not None:
        pipeline.refiner.train()
    l_cls_t, l_reg_t, l_seg_t = compute_losses(batch, pipeline, warmup=warmup)
    total_t = l_cls_t + l_reg_t + l_seg_t
    if not torch.isfinite(total_t):
        ids = [rec.scene_id or f"batch[{i}]" for i, rec in enumerate(batch)]
        raise NumericError(
            f"non-finite loss (cls={float(l_cls_t.detach())}, "
            f"reg={float(l_reg_t.detach())}, seg={float(l_seg_t.detach())}) "
            f"on scenes {ids}")
    optimizer.zero_grad(set_to_none=True)
    total_t.backward()
    if cfg.clip_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(pipeline.parameters(), cfg.clip_grad_norm)
    optimizer.step()
    return LossBreakdown.from_parts(float(l_cls_t.detach()), float(l_reg_t.detach()),
                                    float(l_seg_t.detach()))


def _adamw(params, cfg: TrainConfig):
    try:
        return torch.optim.AdamW(params, lr=cfg.lr,
                                 weight_decay=cfg.weight_decay, fused=True)
    except (RuntimeError, ValueError):
        return torch.optim.AdamW(params, lr=cfg.lr,
                                 weight_decay=cfg.weight_decay, foreach=True)


def make_optimizer(pipeline: Pipeline, cfg: TrainConfig):
    return _adamw(pipeline.parameters(), cfg)


def evaluate_pipeline(pipeline: Pipeline, records: list, num_classes: int,
                      min_mask_size: int = 1):
    preds, gts = [], []
    for rec in records:
        preds.append(pipeline.infer_masks(rec.cloud))
        gts.append([(c, idx) for c, idx in gt_instances_from_cloud(rec.cloud)])
    return evaluate(preds, gts, num_classes=num_classes,
                    min_mask_size=min_mask_size)


@dataclass
class FitResult:
    pipeline: Pipeline
    log: list = field(default_factory=list)
    best_val_ap: float = float("nan")
    best_epoch: int = -1


def fit(train_records: list, val_records: list, pipeline: Pipeline,
        cfg: TrainConfig, num_classes: int, log_path=None, ckpt_dir=None,
        config_items: dict | None = None, config_hash: str = "",
        resume_from: dict | None = None, train_refiner_only: bool = False,
        progress=None) -> FitResult:
    """Run the epoch loop with lr drops, periodic validation, checkpoints."""
    cfg.validate()
    if not train_records:
        raise DataError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    if train_refiner_only:
        if pipeline.refiner is None:
            raise ConfigError("cannot train a level-0 refiner alone")
        for p in pipeline.detector.parameters():
            p.requires_grad_(False)
        optimizer = _adamw(pipeline.refiner.parameters(), cfg)
    else:
        optimizer = make_optimizer(pipeline, cfg)

    start_epoch = 1
    result = FitResult(pipeline=pipeline)
    if resume_from is not None:
        apply_checkpoint(pipeline, resume_from)
        optimizer.load_state_dict(resume_from["optimizer"])
        rng.bit_generator.state = resume_from["rng_numpy"]
        torch.set_rng_state(resume_from["rng_torch"])
        start_epoch = int(resume_from["epoch"]) + 1
        result.log = list(resume_from.get("log", []))
        result.best_val_ap = resume_from.get("best_val_ap", float("nan"))

    warmup_epochs = int(np.ceil(cfg.epochs * cfg.warmup_frac)) if cfg.warmup_gt else 0
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs + 1):
            t0 = time.perf_counter()
            lr = cfg.lr_at_epoch(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = rng.permutation(len(train_records))
            sums = np.zeros(4)
            n_steps = 0
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                batch = [train_records[i] for i in idx]
                if cfg.augment:
                    batch = [augment_scene(rec, rng) for rec in batch]
                br = train_step(batch, pipeline, optimizer, cfg,
                                warmup=epoch <= warmup_epochs)
                sums += (br.l_cls, br.l_reg, br.l_seg, br.total)
                n_steps += 1
            means = sums / max(n_steps, 1)
            record = {"epoch": epoch,
                      "l_cls": means[0], "l_reg": means[1], "l_seg": means[2],
                      "total": means[3],
                      "val_AP": None, "val_AP50": None, "val_AP25": None,
                      "wall_seconds": None}
            run_val = val_records and (
                epoch % cfg.val_interval == 0 or epoch == cfg.epochs)
            val_report = None
            if run_val:
                val_report = evaluate_pipeline(pipeline, val_records, num_classes)
                record["val_AP"] = val_report.ap
                record["val_AP50"] = val_report.ap50
                record["val_AP25"] = val_report.ap25
            record["wall_seconds"] = time.perf_counter() - t0
            result.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if progress:
                progress(record)
            if ckpt_dir is not None:
                state = _checkpoint_payload(pipeline, cfg, optimizer, rng, epoch,
                                            result, config_items, config_hash,
                                            val_report)
                _write_checkpoint(state, f"{ckpt_dir}/last.ckpt")
                if val_report is not None and (
                        np.isnan(result.best_val_ap)
                        or val_report.ap > result.best_val_ap):
                    result.best_val_ap = val_report.ap
                    result.best_epoch = epoch
                    _write_checkpoint(state, f"{ckpt_dir}/best.ckpt")
    finally:
        if log_fh:
            log_fh.close()
        if train_refiner_only:
            for p in pipeline.detector.parameters():
                p.requires_grad_(True)
    return result


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CKPT_FORMAT = "deskseg-ckpt-v1"


def _pipeline_meta(pipeline: Pipeline) -> dict:
    det = pipeline.detector
    rc = pipeline.refiner_config
    return {
        "num_classes": det.num_classes,
        "widths": list(det.widths),
        "decoder_width": det.decoder_width,
        "head_levels": list(det.head_levels),
        "voxel_size": pipeline.voxel_size,
        "refiner_levels": rc.levels,
        "base_channels": rc.base_channels,
        "iou_match_threshold": rc.iou_match_threshold,
        "mask_threshold": rc.mask_threshold,
        "gt_label_rule": rc.gt_label_rule,
        "decode": {
            "score_threshold": pipeline.decode.score_threshold,
            "nms_iou": pipeline.decode.nms_iou,
            "max_proposals": pipeline.decode.max_proposals,
            "pre_nms_limit": pipeline.decode.pre_nms_limit,
        },
    }


def _checkpoint_payload(pipeline, cfg, optimizer, rng, epoch, result,
                        config_items, config_hash, val_report) -> dict:
    return {
        "format": CKPT_FORMAT,
        "meta": _pipeline_meta(pipeline),
        "detector": pipeline.detector.state_dict(),
        "refiner": (pipeline.refiner.state_dict()
                    if pipeline.refiner is not None else None),
        "optimizer": optimizer.state_dict(),
        "rng_numpy": rng.bit_generator.state,
        "rng_torch": torch.get_rng_state(),
        "epoch": epoch,
        "log": list(result.log),
        "best_val_ap": result.best_val_ap,
        "val_metrics": val_report.to_dict() if val_report is not None else None,
        "config_items": dict(config_items or {}),
        "config_hash": config_hash,
    }


def _write_checkpoint(payload: dict, path):
    torch.save(payload, str(path))
    manifest = [f"format {payload['format']}",
                f"config_hash {payload['config_hash']}"]
    for prefix in ("detector", "refiner"):
        sd = payload[prefix]
        if sd is None:
            continue
        for name, tensor in sd.items():
            shape = "x".join(str(s) for s in tensor.shape) or "scalar"
            manifest.append(f"param {prefix}.{name} {shape}")
    with open(str(path) + ".manifest", "w") as fh:
        fh.write("\n".join(manifest) + "\n")


def save_checkpoint(pipeline: Pipeline, cfg: TrainConfig, path,
                    config_items: dict | None = None, config_hash: str = "",
                    optimizer=None, epoch: int = 0) -> dict:
    optimizer = optimizer or make_optimizer(pipeline, cfg)
    rng = np.random.default_rng(cfg.seed)
    payload = _checkpoint_payload(pipeline, cfg, optimizer, rng, epoch,
                                  FitResult(pipeline=pipeline), config_items,
                                  config_hash, None)
    _write_checkpoint(payload, path)
    return payload


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a {CKPT_FORMAT} checkpoint")
    for key in ("meta", "detector", "epoch", "config_hash"):
        if key not in payload:
            raise CheckpointError(f"checkpoint missing entry {key!r}")
    return payload


def apply_checkpoint(pipeline: Pipeline, payload: dict):
    """Load parameters into an existing pipeline; strict shape checking."""
    for prefix, module in (("detector", pipeline.detector),
                           ("refiner", pipeline.refiner)):
        sd = payload.get(prefix)
        if module is None and sd is None:
            continue
        if module is None or sd is None:
            raise CheckpointError(
                f"{prefix}: checkpoint and pipeline disagree on presence")
        current = module.state_dict()
        if set(sd.keys()) != set(current.keys()):
            missing = sorted(set(current) ^ set(sd))[0]
            raise CheckpointError(f"{prefix}.{missing}: parameter set mismatch")
        for name in sorted(current.keys()):
            if tuple(sd[name].shape) != tuple(current[name].shape):
                raise CheckpointError(
                    f"{prefix}.{name}: shape {tuple(sd[name].shape)} does not "
                    f"match {tuple(current[name].shape)}")
        module.load_state_dict(sd)


def pipeline_from_checkpoint(payload: dict, dtype=torch.float32) -> Pipeline:
    meta = payload["meta"]
    rc = RefinerConfig(levels=meta["refiner_levels"],
                       base_channels=meta["base_channels"],
                       iou_match_threshold=meta["iou_match_threshold"],
                       mask_threshold=meta["mask_threshold"],
                       gt_label_rule=meta["gt_label_rule"])
    decode = DecodeSettings(**meta["decode"])
    pipeline = Pipeline.build(num_classes=meta["num_classes"],
                              voxel_size=meta["voxel_size"],
                              widths=tuple(meta["widths"]),
                              decoder_width=meta["decoder_width"],
                              head_levels=tuple(meta["head_levels"]),
                              refiner_config=rc, decode=decode, dtype=dtype)
    apply_checkpoint(pipeline, payload)
    return pipeline
